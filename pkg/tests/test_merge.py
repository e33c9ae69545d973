# 3rd party
import numpy as np
import pytest

# own
import relureduce as rr


def head(last: str) -> tuple:
    return (
        rr.LayerNode("pool", rr.AvgPool(1, 1, global_pool=True), (last,), stage_tag="Classifier"),
        rr.LayerNode("flat", rr.Flatten(), ("pool",), stage_tag="Classifier"),
        rr.LayerNode("fc", rr.FullyConnected(5), ("flat",), stage_tag="Classifier"),
    )


def graph(*nodes: rr.LayerNode, channels: int = 3) -> rr.NetworkGraph:
    return rr.infer_shapes(rr.NetworkGraph((rr.LayerNode("in", rr.Input()),) + nodes, rr.TensorShape(channels, 8, 8), 5, "chain"))


def randomized(g: rr.NetworkGraph, seed: int = 0) -> rr.Model:
    """Model whose BN statistics are far from the identity"""
    model = rr.init_model(g, seed=seed)
    rng = np.random.default_rng(seed)
    for name in model.buffers:
        model.buffers[name] = rng.uniform(0.5, 1.5, size=model.buffers[name].shape).astype(np.float32)
    for name, t in model.params.items():
        if name.endswith((".gamma", ".beta")):
            t.data = rng.uniform(0.5, 1.5, size=t.data.shape).astype(np.float32)
    return model


def test_fold_bn_is_exact():
    g = graph(
        rr.LayerNode("c1", rr.Conv2d(4, 3, padding=1), ("in",)),
        rr.LayerNode("bn", rr.BatchNorm(), ("c1",)),
        *head("bn"),
    )
    model = randomized(g)
    folded, w = rr.fold_bn(g, model.state())
    assert not folded.of_kind(rr.BatchNorm)
    assert folded.node("c1").kind.bias
    report = rr.equivalence_check(g, folded, model.state(), w)
    assert report.passed
    assert report.max_rel_error < 1e-4


def test_pointwise_then_3x3_merges_into_one_conv():
    g = graph(
        rr.LayerNode("c1", rr.Conv2d(6, 1), ("in",)),
        rr.LayerNode("c2", rr.Conv2d(4, 3, padding=1), ("c1",)),
        *head("c2"),
    )
    merged, report = rr.merge_model(rr.init_model(g, seed=1))
    assert rr.count_convs(merged.graph) == 1
    assert merged.graph.node("c2").kind.kernel == 3
    assert report.max_rel_error < 1e-4


def test_padded_chain_needs_border_drift():
    g = graph(
        rr.LayerNode("c1", rr.Conv2d(4, 3, padding=1), ("in",)),
        rr.LayerNode("c2", rr.Conv2d(4, 3, padding=1), ("c1",)),
        *head("c2"),
    )
    folded, w = rr.fold_bn(g, rr.init_model(g).state())
    kept, _ = rr.merge_adjacent_linear(folded, w)
    assert rr.count_convs(kept) == 2
    drifted, _ = rr.merge_adjacent_linear(folded, w, allow_border_drift=True)
    assert rr.count_convs(drifted) == 1
    assert drifted.node("c2").kind.kernel == 5


def test_residual_add_is_absorbed():
    g = graph(
        rr.LayerNode("c1", rr.Conv2d(4, 3, padding=1), ("in",)),
        rr.LayerNode("bn", rr.BatchNorm(), ("c1",)),
        rr.LayerNode("add", rr.Add(), ("bn", "in")),
        *head("add"),
        channels=4,
    )
    merged, report = rr.merge_model(randomized(g, seed=2))
    assert not merged.graph.of_kind(rr.Add)
    assert rr.count_convs(merged.graph) == 1
    assert report.passed


def test_merge_without_linear_pairs_is_a_no_op():
    g = graph(
        rr.LayerNode("c1", rr.Conv2d(4, 3, padding=1, bias=True), ("in",)),
        rr.LayerNode("r1", rr.ReLU(), ("c1",)),
        rr.LayerNode("c2", rr.Conv2d(4, 3, padding=1, bias=True), ("r1",)),
        *head("c2"),
    )
    model = rr.init_model(g, seed=3)
    merged, report = rr.merge_model(model)
    assert merged.graph == model.graph
    for name, arr in model.state().items():
        np.testing.assert_array_equal(merged.state()[name], arr)
    assert report.max_rel_error == 0.0


def test_culled_resnet_merges_and_stays_equivalent():
    spec = rr.ArchitectureSpec("ResNet6", rr.TensorShape(3, 16, 16), num_classes=10, alpha="1/16")
    g = rr.cull(rr.build_architecture(spec), ["S1", "S2"])
    model = randomized(g, seed=4)
    merged, report = rr.merge_model(model, n_samples=20)
    assert rr.count_convs(merged.graph, include_shortcuts=True) < rr.count_convs(g, include_shortcuts=True)
    assert report.max_rel_error < 1e-4


def test_merge_requires_folded_bn():
    g = graph(
        rr.LayerNode("c1", rr.Conv2d(4, 1), ("in",)),
        rr.LayerNode("bn", rr.BatchNorm(), ("c1",)),
        *head("bn"),
    )
    with pytest.raises(rr.GraphError):
        rr.merge_adjacent_linear(g, rr.init_model(g).state())


def test_equivalence_check_detects_a_different_function():
    g = graph(rr.LayerNode("c1", rr.Conv2d(4, 3, padding=1), ("in",)), *head("c1"))
    a = rr.init_model(g, seed=0).state()
    b = rr.init_model(g, seed=1).state()
    assert not rr.equivalence_check(g, g, a, b, n_samples=10).passed


def test_culled_resnet18_padded_chains():
    spec = rr.ArchitectureSpec("ResNet18", rr.TensorShape(3, 16, 16), num_classes=4, alpha="1/8")
    g = rr.cull(rr.build_architecture(spec), ["S1"])
    model = randomized(g, seed=5)
    folded, w = rr.fold_bn(g, model.state())
    before = rr.count_convs(g, include_shortcuts=True)

    # every S1 block is conv3x3 -> conv3x3 over a zero-padded tensor plus an identity
    # shortcut on the block input: no exact merge applies
    exact, w_exact = rr.merge_adjacent_linear(folded, w)
    assert rr.count_convs(exact, include_shortcuts=True) == before
    assert rr.equivalence_check(g, exact, model.state(), w_exact, n_samples=10).passed

    drifted, _ = rr.merge_adjacent_linear(folded, w, allow_border_drift=True)
    assert rr.count_convs(drifted, include_shortcuts=True) < before
