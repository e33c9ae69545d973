"""relureduce/cli.py

Command-line surface: profile, criticality, reduce, merge and estimate.
Exit codes: 0 success, 2 configuration or usage, 3 graph, 4 training, 5 equivalence.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = ["build_parser", "main"]

# std library
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

# 3rd party
import pandas as pd

# own
from .architectures import FAMILIES, build_architecture
from .config import RunConfig, load_config
from .criticality import criticality_scores, read_measurements_csv, train_probes
from .data import DATASET_KINDS, ingest_dataset
from .engine import checkpoint_from_bytes, checkpoint_to_bytes, evaluate, init_model, train
from .errors import ConfigError, ReluReduceError
from .functions import atomic_write_bytes, atomic_write_text, parse_relu_count, pd_format, read_csv_checked, resolve_threads, write_csv
from .latency import WEIGHTINGS, default_latency_model, fit_latency_model, read_latency_points
from .merge import merge_model
from .netir import count_convs, stage_view
from .passes import PARITIES, apply_step
from .pipeline import (
    candidate_steps,
    candidates_frame,
    check_override,
    culling_plan,
    execute_pipeline,
    pareto_frame,
    points_from_csv,
)
from .profiler import FLOP_CONVENTION, count_relus, distribution_report, layer_table, stage_table

logger = logging.getLogger(__name__)


# argument parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="JSON run configuration")
    g.add_argument("--seed", type=int, help="seed of every random source")
    g.add_argument("--threads", type=int, help="worker threads (default: $RELUREDUCE_THREADS or 1)")
    g.add_argument("--out-dir", help="directory for every written file")
    g.add_argument("--dry-run", action="store_true", help="validate and print the plan, write nothing")
    g.add_argument("--progress", action="store_true", help="show training progress bars")
    g.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    return p


def _arch_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("architecture")
    g.add_argument("--arch", help=f"network family: {', '.join(FAMILIES)}")
    g.add_argument("--input", type=int, help="input side length")
    g.add_argument("--classes", type=int, help="number of classes")
    g.add_argument("--alpha", help="channel scale in (0, 1]")
    g.add_argument("--rho", help="resolution scale in (0, 1]")
    g.add_argument("--strip-residuals", action="store_true", default=None, help="drop every residual connection")


def _train_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--dataset", choices=DATASET_KINDS, help="dataset kind")
    g.add_argument("--dataset-path", help="directory with the CIFAR binary batches")
    g.add_argument("--train-size", type=int, help="cap on training samples")
    g.add_argument("--test-size", type=int, help="cap on test samples")
    g.add_argument("--epochs", type=int, help="epochs of every training run")
    g.add_argument("--batch-size", type=int, help="mini-batch size")
    g.add_argument("--lr", type=float, help="initial learning rate")
    g.add_argument("--no-kd", action="store_true", help="train without distillation")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="relureduce", description="ReLU-count reduction for private-inference networks")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("profile", parents=[common], help="count ReLUs, FLOPs and parameters")
    _arch_options(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("criticality", parents=[common], help="rank stages by ReLU criticality")
    _arch_options(p)
    _train_options(p)
    p.add_argument("--from-csv", help="stage measurements (stage,relus,acc_wo_kd,acc_w_kd) instead of training")
    p.add_argument("--w", type=float, help="criticality exponent (default 0.07)")
    p.add_argument("--probe-without-kd", action="store_true", default=None, help="also train every probe without distillation")
    p.set_defaults(func=cmd_criticality)

    p = sub.add_parser("reduce", parents=[common], help="run the culling/thinning/reshaping pipeline")
    _arch_options(p)
    _train_options(p)
    p.add_argument("--accuracy-from-csv", help="candidate points with measured accuracies instead of training")
    p.add_argument("--criticality-csv", help="stage measurements to rank the stages instead of training probes")
    p.add_argument("--stages-override", help="comma-separated stages to cull in a single iteration")
    p.add_argument("--parity", choices=PARITIES, help="which alternate ReLU layers thinning keeps")
    p.add_argument("--single-block", action="store_true", default=None, help="add a candidate thinned down to the last block of each stage")
    p.add_argument("--keep-going", action="store_true", default=None, help="skip candidates whose training fails")
    p.add_argument("--latency-csv", help="refit the latency model on (relus, latency_s) points")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("merge", parents=[common], help="fold BN and merge ReLU-free linear layers of a checkpoint")
    p.add_argument("checkpoint_in", help="input checkpoint")
    p.add_argument("checkpoint_out", nargs="?", help="output checkpoint (default: <out-dir>/<input>.merged)")
    p.add_argument("--allow-border-drift", action="store_true", help="also compose convs through zero-padded tensors")
    p.add_argument("--samples", type=int, default=100, help="random inputs of the equivalence check")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative L-inf error")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("estimate", parents=[common], help="estimate private-inference latency from ReLU counts")
    p.add_argument("kilo_relus", nargs="*", type=float, help="ReLU counts in thousands")
    p.add_argument("--pareto-csv", help="estimate every row of a pareto.csv")
    p.add_argument("--refit-csv", help="refit the latency model on (relus, latency_s) points first")
    p.add_argument("--weighting", choices=WEIGHTINGS, default="relative", help="residual weighting of a refit")
    p.set_defaults(func=cmd_estimate)

    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _run_config(args: argparse.Namespace) -> RunConfig:
    opt = lambda name: getattr(args, name, None)  # noqa: E731
    override = opt("stages_override")
    cfg = load_config(opt("config")).override(
        seed=opt("seed"),
        threads=opt("threads"),
        io__out_dir=opt("out_dir"),
        io__dataset=opt("dataset"),
        io__dataset_path=opt("dataset_path"),
        io__train_size=opt("train_size"),
        io__test_size=opt("test_size"),
        arch__family=opt("arch"),
        arch__input=opt("input"),
        arch__num_classes=opt("classes"),
        arch__alpha=opt("alpha"),
        arch__rho=opt("rho"),
        arch__strip_residuals=opt("strip_residuals"),
        train__epochs=opt("epochs"),
        train__batch_size=opt("batch_size"),
        train__lr0=opt("lr"),
        kd__enabled=False if opt("no_kd") else None,
        pipeline__w=opt("w"),
        pipeline__parity=opt("parity"),
        pipeline__single_block=opt("single_block"),
        pipeline__keep_going=opt("keep_going"),
        pipeline__probe_without_kd=opt("probe_without_kd"),
        pipeline__stages_override=[s.strip() for s in override.split(",") if s.strip()] if override else None,
    )
    cfg.check_paths()
    return cfg


def _print_frame(df: pd.DataFrame) -> None:
    print(df.to_string(index=False, float_format=pd_format(".4f")))


# commands


def cmd_profile(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    g = build_architecture(cfg.arch.spec())
    out = Path(cfg.io.out_dir)
    stem = g.name if g.input_shape == cfg.arch.spec().input_shape else f"{g.name}_{g.input_shape.height}px"
    files = {
        "layers": out / f"{stem}_layers.csv",
        "stages": out / f"{stem}_stages.csv",
        "distribution": out / f"{stem}_distribution.csv",
        "graph": out / f"{stem}_graph.json",
    }
    stages = stage_table(g)
    _print_frame(stages)
    print(f"#Conv: {count_convs(g)}")
    if args.dry_run:
        print(cfg.manifest(), end="")
        for path in files.values():
            print(f"would write {path}")
        return 0
    write_csv(layer_table(g), files["layers"], comment=FLOP_CONVENTION)
    write_csv(stages, files["stages"], comment=FLOP_CONVENTION)
    write_csv(distribution_report(g).to_frame(), files["distribution"])
    atomic_write_text(files["graph"], g.to_json(indent=2) + "\n")
    return 0


def cmd_criticality(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    g = build_architecture(cfg.arch.spec())
    out = Path(cfg.io.out_dir)
    if args.dry_run:
        print(cfg.manifest(), end="")
        source = args.from_csv or f"{stage_view(g).depth} probe networks trained on {cfg.io.dataset}"
        print(f"would score {g.name} stages from {source} and write {out / 'criticality.csv'}")
        if args.from_csv:
            read_measurements_csv(args.from_csv)
        return 0

    if args.from_csv:
        measurements = read_measurements_csv(args.from_csv)
    else:
        threads = resolve_threads(cfg.threads)
        train_set, test_set = ingest_dataset(cfg.dataset_descriptor())
        kd = None
        if cfg.kd.enabled:
            teacher = init_model(g, seed=cfg.seed)
            train(teacher, train_set, cfg.train, progress=args.progress, label="teacher")
            logger.info("teacher accuracy %.2f%%", 100 * evaluate(teacher, test_set))
            kd = replace(cfg.kd.config(), teacher=teacher)
        measurements = train_probes(
            g,
            train_set,
            test_set,
            cfg.train,
            kd,
            without_kd=cfg.pipeline.probe_without_kd or not cfg.kd.enabled,
            threads=threads,
            progress=args.progress,
        )
    report = criticality_scores(measurements, cfg.pipeline.w, use_kd=cfg.kd.enabled)
    print(report)
    write_csv(report.to_frame(), out / "criticality.csv")
    atomic_write_text(out / "manifest.json", cfg.manifest())
    return 0


def cmd_reduce(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    pcfg = cfg.pipeline_config()
    g = build_architecture(pcfg.arch)
    out = Path(cfg.io.out_dir)
    latency = fit_latency_model(read_latency_points(args.latency_csv), "relative") if args.latency_csv else default_latency_model()

    report = None
    if args.criticality_csv:
        report = criticality_scores(read_measurements_csv(args.criticality_csv), pcfg.w, use_kd=pcfg.use_kd)
    if pcfg.stages_override is not None:
        check_override(g, pcfg.stages_override)
        if report is not None:
            culling_plan(g, report, pcfg.stages_override)

    if args.dry_run:
        print(cfg.manifest(), end="")
        if args.accuracy_from_csv:
            points = points_from_csv(args.accuracy_from_csv, g, latency)
            print(f"would take {len(points)} candidate point(s) from {args.accuracy_from_csv}")
        elif report is not None:
            for steps in candidate_steps(g, culling_plan(g, report, pcfg.stages_override), pcfg.ladder, pcfg.parity, pcfg.single_block):
                for step in steps:
                    print(f"{step.label}: {count_relus(apply_step(g, step)).total} ReLUs")
        else:
            iterations = 1 if pcfg.stages_override is not None else stage_view(g).depth - 1
            print(f"would train a teacher, {stage_view(g).depth} probes and {iterations * pcfg.candidates_per_iteration} candidates")
        print(f"would write {out / 'candidates.csv'} and {out / 'pareto.csv'}")
        return 0

    if args.accuracy_from_csv:
        points = points_from_csv(args.accuracy_from_csv, g, latency)
    else:
        run = execute_pipeline(pcfg, criticality=report, latency_model=latency, threads=resolve_threads(cfg.threads), progress=args.progress)
        points = run.candidates
        if report is None:
            write_csv(run.criticality.to_frame(), out / "criticality.csv")
        print(f"teacher accuracy: {run.teacher_accuracy:.2f}%")

    write_csv(candidates_frame(points), out / "candidates.csv")
    pareto = pareto_frame(points)
    write_csv(pareto, out / "pareto.csv")
    atomic_write_text(out / "manifest.json", cfg.manifest())
    _print_frame(pareto)
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    src = Path(args.checkpoint_in)
    if not src.is_file():
        raise ConfigError(f"no such checkpoint: {src}")
    if args.samples < 1 or args.tolerance <= 0:
        raise ConfigError("--samples must be >= 1 and --tolerance positive")
    model = checkpoint_from_bytes(src.read_bytes())
    dst = Path(args.checkpoint_out) if args.checkpoint_out else Path(args.out_dir or ".") / f"{src.name}.merged"

    before = count_convs(model.graph, include_shortcuts=True)
    merged, report = merge_model(model, args.allow_border_drift, args.samples, args.tolerance)
    print(f"convs: {before} -> {count_convs(merged.graph, include_shortcuts=True)}")
    print(f"max error: {report.max_rel_error:.3e} ({report})")
    if args.dry_run:
        print(f"would write {dst}")
        return 0
    atomic_write_bytes(dst, checkpoint_to_bytes(merged))
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    if args.refit_csv:
        model = fit_latency_model(read_latency_points(args.refit_csv), args.weighting)
    else:
        model = default_latency_model()
    kilo = list(args.kilo_relus)
    if args.pareto_csv:
        kilo += _kilo_relus_of(args.pareto_csv)
    if not kilo:
        raise ConfigError("nothing to estimate: pass ReLU counts or --pareto-csv")
    if any(k < 0 for k in kilo):
        raise ConfigError("ReLU counts must be non-negative")
    rows = []
    for k in kilo:
        est = model.predict_u(k)
        rows.append((k, float(model(k)), est.s))
    print(repr(model))
    _print_frame(pd.DataFrame(rows, columns=["kilo_relus", "latency_s", "latency_u"]))
    return 0


def _kilo_relus_of(source: str) -> list[float]:
    df = read_csv_checked(source, ["relus"])
    try:
        return [parse_relu_count(r) for r in df["relus"]]
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except ReluReduceError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
