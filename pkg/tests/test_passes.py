# std library
from fractions import Fraction

# 3rd party
import pytest

# own
import relureduce as rr


@pytest.fixture(scope="module")
def resnet18():
    return rr.build_architecture(rr.ArchitectureSpec("ResNet18"))


def total(g: rr.NetworkGraph) -> int:
    return rr.count_relus(g).total


def test_cull_takes_conv1_along(resnet18):
    culled = rr.cull(resnet18, ["S1"])
    assert total(culled) == 229_376
    assert rr.count_relus(culled).stage("Conv1") == 0
    assert rr.validate(culled).ok
    assert culled.provenance[-1] == "cull(Conv1,S1)"


def test_cull_two_stages(resnet18):
    assert total(rr.cull(resnet18, {"S1", "S4"})) == 196_608


def test_cull_unknown_stage(resnet18):
    with pytest.raises(rr.GraphError):
        rr.cull(resnet18, ["S7"])


def test_thin_halves_each_stage(resnet18):
    culled = rr.cull(resnet18, ["S1"])
    thinned = rr.thin(culled, ["S2", "S3", "S4"])
    assert total(thinned) == 114_688
    for sid in ("S2", "S3", "S4"):
        assert rr.count_relus(thinned).stage(sid) == rr.count_relus(culled).stage(sid) // 2


def test_thin_parity_picks_the_other_half(resnet18):
    odd = rr.thin(resnet18, ["S2"], "keep-odd")
    even = rr.thin(resnet18, ["S2"], "keep-even")
    kept_odd = {n.id for n in odd.of_kind(rr.ReLU)}
    kept_even = {n.id for n in even.of_kind(rr.ReLU)}
    s2 = set(rr.stage_view(resnet18).nodes_of("S2"))
    assert not (kept_odd & kept_even & s2)
    # keep-odd keeps the block outputs
    assert "s2.b2.relu" in kept_odd
    with pytest.raises(rr.ConfigError):
        rr.thin(resnet18, ["S2"], "keep-some")


def test_thin_depthwise_stage():
    g = rr.build_architecture(rr.ArchitectureSpec("MobileNetV1"))
    thinned = rr.thin(g, ["S2"])
    s2 = rr.stage_view(thinned).nodes_of("S2")
    roles = {thinned.node(i).role for i in s2 if isinstance(thinned.node(i).kind, rr.ReLU)}
    assert roles == {"pointwise"}


def test_reshape_arithmetic(resnet18):
    base = rr.thin(rr.cull(resnet18, ["S1"]), ["S2", "S3", "S4"])
    assert total(rr.reshape(base, alpha="1/2")) == 57_344
    assert total(rr.reshape(base, rho=0.5)) == 28_672
    assert total(rr.reshape(base, Fraction(1, 2), Fraction(1, 2))) == 14_336
    # the classifier keeps its width
    assert rr.reshape(base, alpha=0.5).output.out_shape.channels == 100


def test_reshape_rejects_bad_factors(resnet18):
    for bad in (0, 1.5, -1, "x"):
        with pytest.raises(rr.ConfigError):
            rr.reshape(resnet18, alpha=bad)


def test_reshape_collapse():
    vgg = rr.build_architecture(rr.ArchitectureSpec("VGG16"))
    with pytest.raises(rr.GraphError):
        rr.reshape(vgg, rho=Fraction(1, 16))


def test_apply_step_combined(resnet18):
    step = rr.ReduceStep({"S1", "S4"}, {"S2", "S3"}, alpha=0.5)
    assert total(rr.apply_step(resnet18, step)) == 49_152
    assert step.label == "cull[S1+S4] thin[S2+S3] alpha=0.5"


def test_reduce_step_validation():
    with pytest.raises(rr.ConfigError):
        rr.ReduceStep({"S1"}, {"S1"})
    with pytest.raises(rr.ConfigError):
        rr.ReduceStep.from_dict({"culled": ["S1"], "width": "1/2"})
    step = rr.ReduceStep.from_dict({"culled": ["S2", "S1"], "alpha": "1/4"})
    assert step.alpha == Fraction(1, 4)
    assert step.to_dict()["culled"] == ["S1", "S2"]


def test_passes_do_not_touch_their_input(resnet18):
    before = resnet18.to_json()
    rr.apply_step(resnet18, rr.ReduceStep({"S1"}, {"S2"}, alpha=0.5, rho=0.5))
    assert resnet18.to_json() == before


def relu_layers(g: rr.NetworkGraph, sid: str) -> int:
    ids = set(rr.stage_view(g).nodes_of(sid))
    return sum(1 for n in g.of_kind(rr.ReLU) if n.id in ids)


def test_thinning_twice_quarters_the_layers():
    g = rr.build_architecture(rr.ArchitectureSpec("ResNet34", rr.TensorShape(3, 64, 64)))
    once = rr.thin(g, ["S1", "S2", "S3"])
    twice = rr.thin(once, ["S1", "S2", "S3"])
    for sid in ("S1", "S2", "S3"):
        k = relu_layers(g, sid)
        assert relu_layers(once, sid) == -(-k // 2)
        assert relu_layers(twice, sid) == -(-k // 4)


def test_cull_and_thin_commute(resnet18):
    a = rr.cull(rr.thin(resnet18, ["S2", "S3"]), ["S1", "S4"])
    b = rr.thin(rr.cull(resnet18, ["S1", "S4"]), ["S2", "S3"])
    assert total(a) == total(b) == 98_304
    assert {n.id for n in a.of_kind(rr.ReLU)} == {n.id for n in b.of_kind(rr.ReLU)}


@pytest.mark.parametrize(
    "rewrite",
    [lambda g: rr.cull(g, ["S1", "S4"]), lambda g: rr.thin(g, ["S2", "S3"], "keep-even")],
)
def test_cull_and_thin_keep_shapes_flops_and_params(resnet18, rewrite):
    out = rewrite(resnet18)
    shapes = {n.id: n.out_shape for n in rr.infer_shapes(out).nodes}
    flops_before, flops_after = dict(rr.count_flops(resnet18).per_layer), dict(rr.count_flops(out).per_layer)
    for n in resnet18.nodes:
        if isinstance(n.kind, rr.ReLU):
            continue
        assert shapes[n.id] == n.out_shape
        assert flops_after[n.id] == flops_before[n.id]
    assert rr.count_params(out).total == rr.count_params(resnet18).total


def test_single_block_thinning(resnet18):
    step = rr.ReduceStep({"S1"}, {"S2", "S3", "S4"}, alpha="1/2", rho="1/2", single_block=True)
    assert total(rr.apply_step(resnet18, step)) == 7_168
    thinned = rr.thin(rr.cull(resnet18, ["S1"]), ["S2", "S3", "S4"], single_block=True)
    kept = {n.id for n in thinned.of_kind(rr.ReLU)}
    assert kept == {"s2.b2.relu", "s3.b2.relu", "s4.b2.relu"}
    assert thinned.provenance[-1] == "thin(S2,S3,S4;keep-odd;single-block)"

    tiny = rr.build_architecture(rr.ArchitectureSpec("ResNet18", rr.TensorShape(3, 64, 64), num_classes=200))
    assert total(rr.apply_step(tiny, step)) == 28_672
    deeper = rr.ReduceStep({"S1", "S2"}, {"S3", "S4"}, alpha="1/2", rho="1/2", single_block=True)
    assert total(rr.apply_step(tiny, deeper)) == 12_288


def test_single_block_without_blocks():
    # VGG stages are a single block, depthwise stages keep one pointwise ReLU
    vgg = rr.build_architecture(rr.ArchitectureSpec("VGG16"))
    assert total(rr.thin(vgg, ["S3"], single_block=True)) == total(rr.thin(vgg, ["S3"]))
    mobile = rr.build_architecture(rr.ArchitectureSpec("MobileNetV1"))
    thinned = rr.thin(mobile, ["S2"], single_block=True)
    assert relu_layers(thinned, "S2") == 1


def test_single_block_step_round_trip():
    with pytest.raises(rr.ConfigError):
        rr.ReduceStep({"S1"}, single_block=True)
    step = rr.ReduceStep({"S1"}, {"S2"}, single_block=True)
    assert step.label == "cull[S1] thin[S2*]"
    assert rr.ReduceStep.from_dict(step.to_dict()) == step
    assert not rr.ReduceStep.from_dict({"culled": ["S1"], "thinned": ["S2"]}).single_block
