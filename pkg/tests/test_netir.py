# std library
import json

# 3rd party
import pytest

# own
import relureduce as rr


def tiny_graph() -> rr.NetworkGraph:
    nodes = (
        rr.LayerNode("in", rr.Input()),
        rr.LayerNode("c1", rr.Conv2d(4, 3, padding=1), ("in",)),
        rr.LayerNode("r1", rr.ReLU(), ("c1",)),
        rr.LayerNode("pool", rr.AvgPool(1, 1, global_pool=True), ("r1",)),
        rr.LayerNode("flat", rr.Flatten(), ("pool",)),
        rr.LayerNode("fc", rr.FullyConnected(10), ("flat",)),
    )
    return rr.NetworkGraph(nodes, rr.TensorShape(3, 8, 8), 10, "tiny")


def test_infer_shapes():
    g = rr.infer_shapes(tiny_graph())
    assert g.node("c1").out_shape == rr.TensorShape(4, 8, 8)
    assert g.node("pool").out_shape == rr.TensorShape(4, 1, 1)
    assert g.node("fc").out_shape == rr.TensorShape(10, 1, 1)
    # idempotent
    assert rr.infer_shapes(g) == g


def test_validate_passes_and_collects_violations():
    assert rr.validate(tiny_graph()).ok

    g = tiny_graph()
    bad = g.evolve(g.nodes[:2] + (rr.LayerNode("r1", rr.ReLU(), ("nope",)),) + g.nodes[3:])
    report = rr.validate(bad)
    assert not report
    assert any("dangling input" in v.message for v in report.violations)
    assert str(report).startswith("fail")


def test_validate_rejects_two_outputs():
    g = tiny_graph()
    extra = g.evolve(g.nodes + (rr.LayerNode("dead", rr.ReLU(), ("c1",)),))
    report = rr.validate(extra)
    assert any("output" in v.message for v in report.violations)


def test_add_shape_mismatch_is_a_graph_error():
    g = tiny_graph()
    nodes = g.nodes[:3] + (rr.LayerNode("add", rr.Add(), ("r1", "in")),) + g.nodes[3:]
    nodes = tuple(n if n.id != "pool" else rr.LayerNode("pool", n.kind, ("add",)) for n in nodes)
    with pytest.raises(rr.GraphError) as e:
        rr.infer_shapes(g.evolve(nodes))
    assert e.value.node_id == "add"


def test_json_round_trip_keeps_graph():
    g = rr.build_architecture(rr.ArchitectureSpec("ResNet18"))
    back = rr.NetworkGraph.from_json(g.to_json())
    assert back == g
    assert back.provenance == g.provenance
    assert json.loads(g.to_json())["family"] == "ResNet18"


def test_stage_view_of_builtin_families():
    view = rr.stage_view(rr.build_architecture(rr.ArchitectureSpec("ResNet18")))
    assert view.stage_ids == ["S1", "S2", "S3", "S4"]
    assert view.conv1_nodes
    assert view.classifier_nodes
    with pytest.raises(rr.GraphError):
        view.nodes_of("S9")

    view = rr.stage_view(rr.build_architecture(rr.ArchitectureSpec("ResNet56")))
    assert view.depth == 3


def test_stage_tags_derived_from_resolution():
    g = rr.build_architecture(rr.ArchitectureSpec("ResNet18"))
    untagged = g.evolve(rr.LayerNode(n.id, n.kind, n.inputs, n.out_shape, None, n.role) for n in g.nodes)
    assert rr.stage_view(untagged).stage_ids == rr.stage_view(g).stage_ids


def test_strip_residuals_removes_every_add():
    g = rr.build_architecture(rr.ArchitectureSpec("ResNet18"))
    assert g.of_kind(rr.Add)
    stripped = rr.strip_residuals(g)
    assert not stripped.of_kind(rr.Add)
    assert rr.validate(stripped).ok
    assert stripped.provenance[-1] == "strip_residuals"
    # projection shortcuts lose their consumer and go too
    assert not [n for n in stripped.of_kind(rr.Conv2d) if n.role == "shortcut"]
    assert rr.count_convs(stripped) == rr.count_convs(g)


def test_count_convs():
    g = rr.build_architecture(rr.ArchitectureSpec("ResNet18"))
    assert rr.count_convs(g) == 17
    assert rr.count_convs(g, include_shortcuts=True) == 20


def test_strip_residuals_keeps_surviving_shapes():
    g = rr.build_architecture(rr.ArchitectureSpec("ResNet18"))
    stripped = rr.infer_shapes(rr.strip_residuals(g))
    for n in stripped.nodes:
        assert n.out_shape == g.node(n.id).out_shape
