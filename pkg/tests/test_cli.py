# std library
import json

# 3rd party
import pytest

# own
import relureduce as rr
from relureduce.cli import build_parser, main

MEASUREMENTS = "stage,relus,acc_wo_kd,acc_w_kd\nS1,262144,61.93,59.85\nS2,131072,67.63,68.79\nS3,65536,67.41,69.92\nS4,32768,58.90,63.16\n"

CANDIDATES = "culled,thinned,alpha,rho,relus,accuracy,latency_s\nS1,,,,229.38K,76.22,4.61\nS1,S2+S3+S4,,,114.69K,74.72,2.38\nS1+S4,,,,196.61K,73.00,3.94\n"


def test_profile_writes_tables(tmp_path, capsys):
    assert main(["profile", "--arch", "ResNet18", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "557056" in out
    assert "#Conv: 17" in out

    stages = (tmp_path / "ResNet18_stages.csv").read_text().splitlines()
    assert stages[0].startswith("# flops")
    assert stages[1] == "stage,relus,flops,params,relus_with_classifier"
    layers = rr.pd.read_csv(tmp_path / "ResNet18_layers.csv", comment="#")
    assert layers["relus"].sum() == 557_056
    graph = rr.NetworkGraph.from_json((tmp_path / "ResNet18_graph.json").read_text())
    assert rr.count_relus(graph).total == 557_056
    assert (tmp_path / "ResNet18_distribution.csv").is_file()


def test_profile_dry_run_writes_nothing(tmp_path, capsys):
    assert main(["profile", "--arch", "VGG16", "--out-dir", str(tmp_path / "out"), "--dry-run"]) == 0
    assert "would write" in capsys.readouterr().out
    assert not (tmp_path / "out").exists()


def test_criticality_from_csv(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    csv.write_text(MEASUREMENTS)
    assert main(["criticality", "--from-csv", str(csv), "--out-dir", str(tmp_path)]) == 0
    assert "S1 < S4 < S2 < S3" in capsys.readouterr().out
    df = rr.pd.read_csv(tmp_path / "criticality.csv")
    assert df.loc[df["never_cull"], "stage"].tolist() == ["S3"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["pipeline"]["w"] == 0.07


def test_criticality_without_kd_from_csv(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    csv.write_text(MEASUREMENTS)
    assert main(["criticality", "--from-csv", str(csv), "--no-kd", "--out-dir", str(tmp_path)]) == 0
    assert "without KD" in capsys.readouterr().out


def test_empty_csv_is_a_usage_error(tmp_path, capsys):
    csv = tmp_path / "empty.csv"
    csv.write_text("")
    assert main(["criticality", "--from-csv", str(csv), "--out-dir", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_reduce_with_measured_accuracies(tmp_path, capsys):
    csv = tmp_path / "acc.csv"
    csv.write_text(CANDIDATES)
    assert main(["reduce", "--accuracy-from-csv", str(csv), "--out-dir", str(tmp_path)]) == 0
    pareto = rr.pd.read_csv(tmp_path / "pareto.csv", keep_default_na=False)
    # 196.61K at 73.00% is dominated by 114.69K at 74.72%
    assert pareto["relus"].tolist() == [229_380, 114_690]
    candidates = rr.pd.read_csv(tmp_path / "candidates.csv", keep_default_na=False)
    assert candidates["pareto"].tolist() == [True, True, False]
    assert (tmp_path / "manifest.json").is_file()


def test_reduce_dry_run_prints_grid(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    csv.write_text(MEASUREMENTS)
    assert main(["reduce", "--criticality-csv", str(csv), "--out-dir", str(tmp_path / "o"), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "cull[S1] thin[S2+S3+S4] alpha=0.5 rho=0.5: 14336 ReLUs" in out
    assert "cull[S1+S4]: 196608 ReLUs" in out
    assert not (tmp_path / "o").exists()


def test_stages_override_with_most_critical_stage(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    csv.write_text(MEASUREMENTS)
    code = main(["reduce", "--criticality-csv", str(csv), "--stages-override", "S1,S3", "--out-dir", str(tmp_path)])
    assert code == 2
    assert "S3" in capsys.readouterr().err
    assert not (tmp_path / "candidates.csv").exists()


def test_unknown_stage_override(tmp_path):
    assert main(["reduce", "--stages-override", "S9", "--out-dir", str(tmp_path), "--dry-run"]) == 2


def test_merge_checkpoint(tmp_path, capsys):
    spec = rr.ArchitectureSpec("ResNet6", rr.TensorShape(3, 8, 8), num_classes=4, alpha="1/16")
    g = rr.cull(rr.build_architecture(spec), ["S1", "S2"])
    src = tmp_path / "model.rrdk"
    src.write_bytes(rr.checkpoint_to_bytes(rr.init_model(g)))
    assert main(["merge", str(src), "--out-dir", str(tmp_path), "--samples", "10"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("convs: 8 -> ")
    assert "max error" in out
    merged = rr.checkpoint_from_bytes((tmp_path / "model.rrdk.merged").read_bytes())
    assert rr.count_convs(merged.graph, include_shortcuts=True) < 8


def test_merge_rejects_corrupted_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.rrdk"
    bad.write_bytes(b"NOPE!" + bytes(20))
    assert main(["merge", str(bad), str(tmp_path / "out.rrdk")]) == 2
    assert "magic" in capsys.readouterr().err
    assert main(["merge", str(tmp_path / "missing.rrdk")]) == 2


def test_estimate(tmp_path, capsys):
    assert main(["estimate", "917.52", "7.17"]) == 0
    out = capsys.readouterr().out
    assert "19.26" in out

    pareto = tmp_path / "pareto.csv"
    pareto.write_text("relus,accuracy\n229380,76.22\n")
    assert main(["estimate", "--pareto-csv", str(pareto)]) == 0
    assert "229.38" in capsys.readouterr().out


def test_estimate_refit_and_errors(tmp_path, capsys):
    points = tmp_path / "points.csv"
    points.write_text("relus,latency_s\n0,1.0\n10K,2.0\n20K,3.0\n")
    assert main(["estimate", "30", "--refit-csv", str(points)]) == 0
    assert "4.0" in capsys.readouterr().out
    # refits weight residuals like the bundled model unless told otherwise
    assert build_parser().parse_args(["estimate"]).weighting == "relative"
    assert build_parser().parse_args(["estimate", "--weighting", "ols"]).weighting == "ols"
    assert main(["estimate"]) == 2
    assert main(["estimate", "--", "-1"]) == 2


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["reduce", "--parity", "sometimes"])
    assert e.value.code == 2
    config = tmp_path / "c.json"
    config.write_text('{"arch": {"layers": 18}}')
    assert main(["profile", "--config", str(config), "--out-dir", str(tmp_path)]) == 2
