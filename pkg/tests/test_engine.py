# std library
import math
import struct

# 3rd party
import numpy as np
import pytest

# own
import relureduce as rr


def tiny_resnet(classes: int = 4) -> rr.NetworkGraph:
    spec = rr.ArchitectureSpec("ResNet6", rr.TensorShape(3, 8, 8), num_classes=classes, alpha="1/16")
    return rr.build_architecture(spec)


@pytest.fixture(scope="module")
def blobs():
    return rr.ingest_dataset(rr.DatasetDescriptor("synthetic-blobs", resolution=8, classes=4, train_size=128, test_size=64, noise=0.5))


def test_grad_check_relu_free_graph():
    nodes = (
        rr.LayerNode("in", rr.Input()),
        rr.LayerNode("c1", rr.Conv2d(4, 3, padding=1), ("in",)),
        rr.LayerNode("bn", rr.BatchNorm(), ("c1",)),
        rr.LayerNode("c2", rr.Conv2d(4, 3, stride=2, padding=1, bias=True), ("bn",)),
        rr.LayerNode("sc", rr.Conv2d(4, 1, stride=2), ("in",)),
        rr.LayerNode("add", rr.Add(), ("c2", "sc")),
        rr.LayerNode("pool", rr.AvgPool(1, 1, global_pool=True), ("add",)),
        rr.LayerNode("flat", rr.Flatten(), ("pool",)),
        rr.LayerNode("fc", rr.FullyConnected(3), ("flat",)),
    )
    g = rr.NetworkGraph(nodes, rr.TensorShape(3, 6, 6), 3, "linear")
    model = rr.init_model(g, seed=0)
    rng = np.random.default_rng(0)
    batch = rng.normal(size=(4, 3, 6, 6)), np.array([0, 1, 2, 0])
    assert rr.grad_check(model, batch) < 1e-5


def test_grad_check_resnet():
    model = rr.init_model(tiny_resnet(), seed=1)
    rng = np.random.default_rng(1)
    batch = rng.normal(size=(4, 3, 8, 8)), np.array([0, 1, 2, 3])
    assert rr.grad_check(model, batch, samples_per_param=2) < 1e-4


def test_kd_loss_on_uniform_logits():
    logits = np.zeros((5, 4))
    labels = np.arange(5) % 4
    loss = rr.kd_loss(logits, logits, labels, rr.KDConfig())
    assert loss.value == pytest.approx(0.9 * math.log(4))

    plain = rr.kd_loss(logits, logits, labels, rr.KDConfig(hard_weight=1.0))
    assert plain.value == pytest.approx(rr.cross_entropy(logits, labels).value)

    with pytest.raises(rr.TrainingError):
        rr.kd_loss(logits, np.zeros((5, 3)), labels, rr.KDConfig())


def test_kd_loss_gradient():
    rng = np.random.default_rng(2)
    s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    y = np.array([0, 2, 3])
    kd = rr.KDConfig(temperature=3.0, hard_weight=0.5)
    grad = rr.kd_loss(s, t, y, kd).grad
    eps = 1e-6
    for i in range(3):
        for j in range(4):
            up, down = s.copy(), s.copy()
            up[i, j] += eps
            down[i, j] -= eps
            numeric = (rr.kd_loss(up, t, y, kd).value - rr.kd_loss(down, t, y, kd).value) / (2 * eps)
            assert grad[i, j] == pytest.approx(numeric, abs=1e-7)


def test_step_schedule():
    cfg = rr.TrainConfig(lr0=0.1)
    assert [rr.learning_rate(cfg, e) for e in (0, 29, 30, 59, 60)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])
    cosine = rr.TrainConfig(lr0=0.1, epochs=10, schedule="cosine")
    assert rr.learning_rate(cosine, 0) == pytest.approx(0.1)
    assert rr.learning_rate(cosine, 5) == pytest.approx(0.05)


def test_config_validation():
    with pytest.raises(rr.ConfigError):
        rr.TrainConfig(schedule="linear")
    with pytest.raises(rr.ConfigError):
        rr.TrainConfig(batch_size=0)
    with pytest.raises(rr.ConfigError):
        rr.KDConfig(temperature=0)
    with pytest.raises(rr.ConfigError):
        rr.KDConfig(hard_weight=1.5)


def test_sgd_step():
    t = rr.Tensor(np.array([1.0, -2.0]), grad=np.array([0.5, 0.5]))
    opt = rr.SGD({"w": t}, momentum=0.9, weight_decay=0.1)
    opt.step(lr=1.0)
    np.testing.assert_allclose(t.data, [1.0 - 0.6, -2.0 - 0.3])
    # velocity carries over
    opt.step(lr=1.0)
    np.testing.assert_allclose(t.data, [0.4 - (0.9 * 0.6 + 0.5 + 0.04), -2.3 - (0.9 * 0.3 + 0.5 - 0.23)])


def test_train_reduces_loss(blobs):
    train_set, test_set = blobs
    model = rr.init_model(tiny_resnet(), seed=0)
    cfg = rr.TrainConfig(lr0=0.05, batch_size=32, epochs=4, seed=0)
    _, history = rr.train(model, train_set, cfg, val=test_set)
    assert list(history.columns) == ["epoch", "lr", "train_loss", "train_acc", "val_acc"]
    assert history["epoch"].tolist() == [0, 1, 2, 3, 4]
    assert history["train_loss"].iloc[-1] < history["train_loss"].iloc[0]
    assert 0 <= rr.evaluate(model, test_set) <= 1


def test_training_is_deterministic(blobs):
    train_set, _ = blobs
    cfg = rr.TrainConfig(lr0=0.05, batch_size=32, epochs=2, seed=3, augment=True)
    a, _ = rr.train(rr.init_model(tiny_resnet(), seed=3), train_set, cfg)
    b, _ = rr.train(rr.init_model(tiny_resnet(), seed=3), train_set, cfg)
    assert rr.checkpoint_to_bytes(a) == rr.checkpoint_to_bytes(b)


def test_train_with_distillation(blobs):
    train_set, test_set = blobs
    cfg = rr.TrainConfig(lr0=0.05, batch_size=32, epochs=1)
    teacher, _ = rr.train(rr.init_model(tiny_resnet(), seed=0), train_set, cfg)
    student = rr.init_model(rr.cull(tiny_resnet(), ["S1"]), seed=1)
    _, history = rr.train(student, train_set, cfg, rr.KDConfig(teacher=teacher))
    assert np.isfinite(history["train_loss"]).all()

    with pytest.raises(rr.ConfigError):
        rr.train(student, train_set, cfg, rr.KDConfig())


def test_train_on_empty_dataset():
    empty = rr.Dataset(np.zeros((0, 3, 8, 8), dtype=np.float32), np.zeros(0, dtype=np.int64), 4)
    with pytest.raises(rr.TrainingError):
        rr.train(rr.init_model(tiny_resnet()), empty, rr.TrainConfig(epochs=1))


def test_checkpoint_round_trip(blobs):
    _, test_set = blobs
    model = rr.init_model(tiny_resnet(), seed=5)
    data = rr.checkpoint_to_bytes(model)
    assert data.startswith(b"RRDK1")
    back = rr.checkpoint_from_bytes(data)
    assert back.graph == model.graph
    assert rr.checkpoint_to_bytes(back) == data
    np.testing.assert_array_equal(rr.predict(back, test_set), rr.predict(model, test_set))


def test_corrupted_checkpoints():
    data = rr.checkpoint_to_bytes(rr.init_model(tiny_resnet()))
    with pytest.raises(rr.ConfigError):
        rr.checkpoint_from_bytes(b"XXXXX" + data[5:])
    with pytest.raises(rr.ConfigError):
        rr.checkpoint_from_bytes(data[:-3])
    with pytest.raises(rr.ConfigError):
        rr.checkpoint_from_bytes(data + b"\x00")


def test_model_from_state_checks_tensors():
    model = rr.init_model(tiny_resnet())
    state = dict(model.state())
    state.pop(sorted(state)[0])
    with pytest.raises(rr.GraphError):
        rr.model_from_state(model.graph, state)


def test_corrupted_tensor_name():
    data = bytearray(rr.checkpoint_to_bytes(rr.init_model(tiny_resnet())))
    (meta_len,) = struct.unpack_from("<I", data, len(rr.engine.MAGIC))
    # first byte of the first tensor name, after the tensor count and the name length
    data[len(rr.engine.MAGIC) + 4 + meta_len + 8] = 0xFF
    with pytest.raises(rr.ConfigError, match="tensor name"):
        rr.checkpoint_from_bytes(bytes(data))


def test_malformed_checkpoint_metadata():
    meta = b'{"nodes": [{"id": "x"}]}'
    data = rr.engine.MAGIC + struct.pack("<I", len(meta)) + meta + struct.pack("<I", 0)
    with pytest.raises(rr.ConfigError, match="metadata"):
        rr.checkpoint_from_bytes(data)


def linear_graph(classes: int = 4) -> rr.NetworkGraph:
    nodes = (
        rr.LayerNode("in", rr.Input()),
        rr.LayerNode("flat", rr.Flatten(), ("in",)),
        rr.LayerNode("fc", rr.FullyConnected(classes), ("flat",)),
    )
    return rr.NetworkGraph(nodes, rr.TensorShape(3, 4, 4), classes, "linear")


def test_forward_trivial_weights():
    model = rr.init_model(linear_graph(), seed=0)
    for t in model.params.values():
        t.data[...] = 0
    x = np.random.default_rng(0).normal(size=(5, 3, 4, 4))
    np.testing.assert_array_equal(rr.forward(model, x), np.zeros((5, 4)))

    nodes = (rr.LayerNode("in", rr.Input()), rr.LayerNode("conv", rr.Conv2d(3, 1), ("in",)))
    identity = rr.init_model(rr.NetworkGraph(nodes, rr.TensorShape(3, 4, 4), 3, "identity"), dtype=np.float64)
    identity.params["conv.weight"].data[...] = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_allclose(rr.forward(identity, x), x, atol=1e-12)


def test_evaluate_constant_prediction():
    model = rr.init_model(linear_graph(), seed=0)
    for t in model.params.values():
        t.data[...] = 0
    model.params["fc.bias"].data[0] = 1.0
    x = np.random.default_rng(1).normal(size=(8, 3, 4, 4)).astype(np.float32)
    balanced = rr.Dataset(x, np.arange(8) % 4, 4)
    assert rr.evaluate(model, balanced) == pytest.approx(0.25)


def test_grad_check_linear_and_corrupted(monkeypatch):
    model = rr.init_model(linear_graph(), seed=2)
    rng = np.random.default_rng(2)
    batch = rng.normal(size=(6, 3, 4, 4)), np.array([0, 1, 2, 3, 0, 1])
    assert rr.grad_check(model, batch) < 1e-8

    linear_backward = rr.ops.linear_backward

    def doubled_weight_grad(out_grad, x, weight, bias=None):
        dx, dw, db = linear_backward(out_grad, x, weight, bias)
        return dx, 2 * dw, db

    monkeypatch.setattr(rr.ops, "linear_backward", doubled_weight_grad)
    assert rr.grad_check(model, batch) > 1e-2


def test_zero_learning_rate_keeps_weights(blobs):
    train_set, _ = blobs
    model = rr.init_model(tiny_resnet(), seed=4)
    before = {k: t.data.tobytes() for k, t in model.params.items()}
    rr.train(model, train_set, rr.TrainConfig(lr0=0.0, batch_size=32, epochs=3))
    assert {k: t.data.tobytes() for k, t in model.params.items()} == before


def test_twenty_epochs_halve_the_loss():
    train_set, _ = rr.ingest_dataset(rr.DatasetDescriptor(resolution=8, classes=2, train_size=200, test_size=10))
    model = rr.init_model(tiny_resnet(classes=2), seed=0)
    _, history = rr.train(model, train_set, rr.TrainConfig(lr0=0.05, batch_size=32, epochs=20))
    assert history["train_loss"].iloc[-1] < 0.5 * history["train_loss"].iloc[0]
