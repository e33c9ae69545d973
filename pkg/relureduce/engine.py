"""relureduce/engine.py

Desk-scale training engine over the graph IR: parameter store, taped forward and
backward, cross-entropy and distillation losses, SGD with momentum, learning-rate
schedules, training loop, evaluation, gradient checking and checkpoints.

A Model is mutated by exactly one training session at a time.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "SCHEDULES",
    "Tensor",
    "Model",
    "TrainConfig",
    "KDConfig",
    "LossValue",
    "SGD",
    "init_model",
    "forward",
    "backward",
    "cross_entropy",
    "kd_loss",
    "learning_rate",
    "train",
    "evaluate",
    "predict",
    "grad_check",
    "checkpoint_to_bytes",
    "checkpoint_from_bytes",
    "model_from_state",
]

# std library
import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

# 3rd party
import numpy as np
import pandas as pd
from scipy.special import log_softmax
from tqdm import tqdm

# own
from . import ops
from .data import Dataset, augment_batch
from .errors import ConfigError, GraphError, TrainingError
from .netir import (
    Add,
    AvgPool,
    BatchNorm,
    Conv2d,
    Flatten,
    FullyConnected,
    Input,
    MaxPool,
    NetworkGraph,
    ReLU,
    infer_shapes,
)

logger = logging.getLogger(__name__)

SCHEDULES = ("step", "cosine")
MAGIC = b"RRDK1"
HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "val_acc"]


@dataclass
class Tensor:
    """Dense array with an optional gradient of the same shape"""

    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ValueError(f"grad shape {self.grad.shape} does not match data shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None


@dataclass
class _Tape:
    values: dict[str, np.ndarray]
    stats: dict[str, tuple[np.ndarray, np.ndarray]]
    train: bool


@dataclass
class Model:
    """A graph with its trainable parameters and BN running buffers.
    Parameters are named `<node_id>.weight`, `.bias`, `.gamma`, `.beta`; buffers
    `<node_id>.running_mean` and `.running_var`.
    """

    graph: NetworkGraph
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    _tape: Optional[_Tape] = field(default=None, repr=False, compare=False)

    def __repr__(self) -> str:
        n = sum(t.data.size for t in self.params.values())
        return f"<Model({self.graph.name}, params={n:,})>"

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).data.dtype if self.params else np.dtype(np.float32)

    def astype(self, dtype) -> "Model":
        """Copy with every parameter and buffer cast to `dtype`"""
        return Model(
            self.graph,
            {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self) -> "Model":
        return Model(self.graph, copy.deepcopy(self.params), {k: v.copy() for k, v in self.buffers.items()})

    def state(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer array by name"""
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 4e-4
    epochs: int = 120
    schedule: str = "step"
    step_every: int = 30
    step_divide: float = 10.0
    seed: int = 0
    augment: bool = False

    def __post_init__(self) -> None:
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be non-negative, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.step_every < 1:
            raise ConfigError("epochs must be >= 0 and step_every >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")


@dataclass(frozen=True)
class KDConfig:
    """Distillation settings. `hard_weight` weights the cross-entropy on hard labels,
    the soft term gets the rest.
    """

    temperature: float = 4.0
    hard_weight: float = 0.9
    teacher: Optional[Model] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.hard_weight <= 1:
            raise ConfigError(f"hard_weight must lie in [0, 1], got {self.hard_weight}")


@dataclass(frozen=True)
class LossValue:
    """Scalar loss and its gradient with respect to the logits"""

    value: float
    grad: np.ndarray

    def __float__(self) -> float:
        return self.value


# parameters


def _param_specs(g: NetworkGraph) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter and buffer of `g`"""
    specs = []
    for n in g.nodes:
        kind = n.kind
        if isinstance(kind, Conv2d):
            in_c = g.node(n.inputs[0]).out_shape.channels  # type: ignore
            specs.append((f"{n.id}.weight", (kind.out_channels, in_c // kind.groups, kind.kernel, kind.kernel), "he"))
            if kind.bias:
                specs.append((f"{n.id}.bias", (kind.out_channels,), "zeros"))
        elif isinstance(kind, FullyConnected):
            in_f = g.node(n.inputs[0]).out_shape.numel  # type: ignore
            specs.append((f"{n.id}.weight", (kind.out_features, in_f), "he"))
            if kind.bias:
                specs.append((f"{n.id}.bias", (kind.out_features,), "zeros"))
        elif isinstance(kind, BatchNorm):
            c = n.out_shape.channels  # type: ignore
            specs += [
                (f"{n.id}.gamma", (c,), "ones"),
                (f"{n.id}.beta", (c,), "zeros"),
                (f"{n.id}.running_mean", (c,), "buffer-zeros"),
                (f"{n.id}.running_var", (c,), "buffer-ones"),
            ]
    return specs


def init_model(g: NetworkGraph, seed: int = 0, dtype=np.float32) -> Model:
    """Fresh model: He-normal weights, zero biases, identity BN"""
    if any(n.out_shape is None for n in g.nodes):
        g = infer_shapes(g)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, shape, init in _param_specs(g):
        if init == "he":
            fan_in = int(np.prod(shape[1:]))
            params[name] = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype))
        elif init.startswith("buffer"):
            buffers[name] = (np.ones if init.endswith("ones") else np.zeros)(shape, dtype=dtype)
        else:
            params[name] = Tensor((np.ones if init == "ones" else np.zeros)(shape, dtype=dtype))
    return Model(g, params, buffers)


def _get(model: Model, name: str) -> Optional[np.ndarray]:
    t = model.params.get(name)
    return None if t is None else t.data


# forward / backward


def forward(model: Model, batch: np.ndarray, train: bool = False) -> np.ndarray:
    """Logits of `batch` (N, C, H, W). In training mode BN uses batch statistics and
    updates its running buffers. Records the tape that `backward` consumes.
    """
    g = model.graph
    if tuple(batch.shape[1:]) != tuple(g.input_shape.as_list()):
        raise GraphError(f"batch of shape {batch.shape[1:]} does not match input {g.input_shape}")
    values: dict[str, np.ndarray] = {}
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    x_in = batch.astype(model.dtype, copy=False)

    for n in g.nodes:
        kind = n.kind
        ins = [values[i] for i in n.inputs]
        if isinstance(kind, Input):
            out = x_in
        elif isinstance(kind, Conv2d):
            out = ops.conv2d_forward(ins[0], _get(model, f"{n.id}.weight"), _get(model, f"{n.id}.bias"), kind.stride, kind.padding, kind.groups)  # type: ignore
        elif isinstance(kind, BatchNorm):
            if train:
                mean, var = ops.batch_statistics(ins[0])
                m = ins[0].size // ins[0].shape[1]
                rm, rv = model.buffers[f"{n.id}.running_mean"], model.buffers[f"{n.id}.running_var"]
                rm *= 1 - kind.momentum
                rm += kind.momentum * mean
                rv *= 1 - kind.momentum
                rv += kind.momentum * var * (m / max(m - 1, 1))
            else:
                mean, var = model.buffers[f"{n.id}.running_mean"], model.buffers[f"{n.id}.running_var"]
            stats[n.id] = (mean, var)
            out = ops.batchnorm_forward(ins[0], _get(model, f"{n.id}.gamma"), _get(model, f"{n.id}.beta"), mean, var, kind.eps)  # type: ignore
        elif isinstance(kind, ReLU):
            out = ops.relu_forward(ins[0])
        elif isinstance(kind, MaxPool):
            out = ops.maxpool_forward(ins[0], kind.kernel, kind.stride)
        elif isinstance(kind, AvgPool):
            out = ops.avgpool_forward(ins[0], kind.kernel, kind.stride, kind.global_pool)
        elif isinstance(kind, Flatten):
            out = ops.flatten_forward(ins[0])
        elif isinstance(kind, FullyConnected):
            x = ins[0] if ins[0].ndim == 2 else ops.flatten_forward(ins[0])
            out = ops.linear_forward(x, _get(model, f"{n.id}.weight"), _get(model, f"{n.id}.bias"))  # type: ignore
        elif isinstance(kind, Add):
            out = ops.add_forward(ins[0], ins[1])
        else:
            raise GraphError(f"no kernel for {type(kind).__name__}", n.id)
        values[n.id] = out

    model._tape = _Tape(values, stats, train)
    return values[g.output.id]


def _accumulate(grads: dict[str, np.ndarray], node_id: str, g: np.ndarray) -> None:
    if node_id in grads:
        grads[node_id] = grads[node_id] + g
    else:
        grads[node_id] = g


def _set_grad(model: Model, name: str, g: Optional[np.ndarray]) -> None:
    if g is not None and name in model.params:
        model.params[name].grad = g


def backward(model: Model, loss: LossValue) -> dict[str, np.ndarray]:
    """Back-propagate `loss` through the last recorded forward pass.
    Sets `.grad` on every parameter and returns the gradients by name.
    """
    tape = model._tape
    if tape is None:
        raise TrainingError("backward called before forward")
    g = model.graph
    for t in model.params.values():
        t.grad = np.zeros_like(t.data)

    grads: dict[str, np.ndarray] = {g.output.id: loss.grad.astype(model.dtype, copy=False)}
    for n in reversed(g.nodes):
        if n.id not in grads or isinstance(n.kind, Input):
            continue
        out_grad = grads.pop(n.id)
        kind = n.kind
        ins = [tape.values[i] for i in n.inputs]
        if isinstance(kind, Conv2d):
            dx, dw, db = ops.conv2d_backward(out_grad, ins[0], _get(model, f"{n.id}.weight"), _get(model, f"{n.id}.bias"), kind.stride, kind.padding, kind.groups)  # type: ignore
            _set_grad(model, f"{n.id}.weight", dw)
            _set_grad(model, f"{n.id}.bias", db)
            _accumulate(grads, n.inputs[0], dx)
        elif isinstance(kind, BatchNorm):
            mean, var = tape.stats[n.id]
            dx, dgamma, dbeta = ops.batchnorm_backward(out_grad, ins[0], _get(model, f"{n.id}.gamma"), mean, var, kind.eps, tape.train)  # type: ignore
            _set_grad(model, f"{n.id}.gamma", dgamma)
            _set_grad(model, f"{n.id}.beta", dbeta)
            _accumulate(grads, n.inputs[0], dx)
        elif isinstance(kind, ReLU):
            _accumulate(grads, n.inputs[0], ops.relu_backward(out_grad, ins[0]))
        elif isinstance(kind, MaxPool):
            _accumulate(grads, n.inputs[0], ops.maxpool_backward(out_grad, ins[0], kind.kernel, kind.stride))
        elif isinstance(kind, AvgPool):
            _accumulate(grads, n.inputs[0], ops.avgpool_backward(out_grad, ins[0], kind.kernel, kind.stride, kind.global_pool))
        elif isinstance(kind, Flatten):
            _accumulate(grads, n.inputs[0], ops.flatten_backward(out_grad, ins[0]))
        elif isinstance(kind, FullyConnected):
            x = ins[0] if ins[0].ndim == 2 else ops.flatten_forward(ins[0])
            dx, dw, db = ops.linear_backward(out_grad, x, _get(model, f"{n.id}.weight"), _get(model, f"{n.id}.bias"))  # type: ignore
            _set_grad(model, f"{n.id}.weight", dw)
            _set_grad(model, f"{n.id}.bias", db)
            _accumulate(grads, n.inputs[0], dx.reshape(ins[0].shape))
        elif isinstance(kind, Add):
            da, db_ = ops.add_backward(out_grad, ins[0], ins[1])
            _accumulate(grads, n.inputs[0], da)
            _accumulate(grads, n.inputs[1], db_)

    model._tape = None
    return {k: t.grad for k, t in model.params.items()}  # type: ignore


# losses


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes)[labels]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean cross-entropy over the batch"""
    logits = logits.astype(np.float64)
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    value = -logp[np.arange(n), labels].mean()
    grad = (np.exp(logp) - _one_hot(labels, logits.shape[1])) / n
    return LossValue(float(value), grad)


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, labels: np.ndarray, kd: KDConfig) -> LossValue:
    """hard_weight * CE(student, labels) + (1 - hard_weight) * T^2 * KL(p_teacher || p_student),
    softmaxes taken at temperature T
    """
    if student_logits.shape != teacher_logits.shape:
        raise TrainingError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    t = kd.temperature
    n = student_logits.shape[0]
    ce = cross_entropy(student_logits, labels)
    log_ps = log_softmax(student_logits.astype(np.float64) / t, axis=1)
    log_pt = log_softmax(teacher_logits.astype(np.float64) / t, axis=1)
    pt = np.exp(log_pt)
    kl = float((pt * (log_pt - log_ps)).sum(axis=1).mean())
    soft = 1.0 - kd.hard_weight
    value = kd.hard_weight * ce.value + soft * t * t * kl
    grad = kd.hard_weight * ce.grad + soft * t * (np.exp(log_ps) - pt) / n
    return LossValue(value, grad)


# optimization


class SGD:
    """SGD with momentum and L2 weight decay:
    g = grad + wd * w;  v = m * v + g;  w -= lr * v
    """

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0) -> None:
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def __repr__(self) -> str:
        return f"<SGD(momentum={self.momentum}, weight_decay={self.weight_decay})>"

    def step(self, lr: float) -> None:
        for name in sorted(self.params):
            t = self.params[name]
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            t.data -= (lr * v).astype(t.data.dtype, copy=False)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate of the (0-based) epoch"""
    if cfg.schedule == "cosine":
        return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / max(cfg.epochs, 1)))
    return cfg.lr0 * cfg.step_divide ** (-(epoch // cfg.step_every))


# training


def predict(model: Model, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits of the whole dataset, at the model's resolution"""
    data = dataset.resized(model.graph.input_shape)
    parts = [forward(model, xb) for xb, _ in data.batches(batch_size)]
    model._tape = None
    return np.concatenate(parts) if parts else np.zeros((0, model.graph.num_classes))


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy as a fraction"""
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    logits = predict(model, dataset, batch_size)
    return float((logits.argmax(axis=1) == dataset.y).mean())


def _objective(kd: Optional[KDConfig]) -> Callable[[np.ndarray, Optional[np.ndarray], np.ndarray], LossValue]:
    if kd is None:
        return lambda s, _t, y: cross_entropy(s, y)
    return lambda s, t, y: kd_loss(s, t, y, kd)


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    kd: Optional[KDConfig] = None,
    val: Optional[Dataset] = None,
    progress: bool = False,
    label: str = "",
) -> tuple[Model, pd.DataFrame]:
    """Train `model` in place. The history has one row per epoch plus an epoch-0 row
    holding the untrained model's loss and accuracies.
    """
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset", label)
    if kd is not None and kd.teacher is None:
        raise ConfigError("distillation requested without a teacher model")

    rng = np.random.default_rng(cfg.seed)
    data = dataset.resized(model.graph.input_shape)
    objective = _objective(kd)
    teacher_data = dataset.resized(kd.teacher.graph.input_shape) if kd is not None else None  # type: ignore
    teacher_logits = predict(kd.teacher, teacher_data) if kd is not None else None  # type: ignore

    def _check(value: float, epoch: int) -> None:
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} in epoch {epoch}", label)

    # epoch 0: the untrained model
    logits = predict(model, data)
    loss0 = objective(logits, teacher_logits, data.y).value
    _check(loss0, 0)
    rows = [(0, 0.0, loss0, float((logits.argmax(1) == data.y).mean()), evaluate(model, val) if val is not None and len(val) else math.nan)]

    opt = SGD(model.params, cfg.momentum, cfg.weight_decay)
    epochs = tqdm(range(1, cfg.epochs + 1), desc=label or model.graph.name, disable=not progress, leave=False)
    for epoch in epochs:
        lr = learning_rate(cfg, epoch - 1)
        order = rng.permutation(len(data))
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = data.x[idx], data.y[idx]
            tb = None
            if kd is not None:
                if not cfg.augment:
                    tb = teacher_logits[idx]  # type: ignore
                else:
                    # augmented crops are shared by student and teacher
                    seed = int(rng.integers(1 << 31))
                    xb = augment_batch(xb, np.random.default_rng(seed))
                    tb = forward(kd.teacher, augment_batch(teacher_data.x[idx], np.random.default_rng(seed)))  # type: ignore
                    kd.teacher._tape = None  # type: ignore
            elif cfg.augment:
                xb = augment_batch(xb, rng)
            out = forward(model, xb, train=True)
            loss = objective(out, tb, yb)
            _check(loss.value, epoch)
            backward(model, loss)
            opt.step(lr)
            total += loss.value * len(idx)
            correct += int((out.argmax(1) == yb).sum())
        val_acc = evaluate(model, val) if val is not None and len(val) else math.nan
        rows.append((epoch, lr, total / len(data), correct / len(data), val_acc))
        logger.info("%s epoch %d: lr=%.4g loss=%.4f acc=%.4f", label or model.graph.name, epoch, lr, rows[-1][2], rows[-1][3])

    return model, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


# gradient checking


def grad_check(
    model: Model,
    batch: tuple[np.ndarray, np.ndarray],
    eps: float = 1e-5,
    samples_per_param: int = 4,
    train_mode: bool = True,
    seed: int = 0,
) -> float:
    """Max relative error between `backward` and central differences of the mean
    cross-entropy, over sampled entries of every parameter, in float64
    """
    m = model.astype(np.float64)
    x, y = batch
    x = x.astype(np.float64)

    def loss_at() -> float:
        # BN running buffers are irrelevant to training-mode outputs, inference mode never writes them
        v = cross_entropy(forward(m, x, train=train_mode), y).value
        m._tape = None
        return v

    backward(m, cross_entropy(forward(m, x, train=train_mode), y))
    analytic = {k: t.grad.copy() for k, t in m.params.items()}  # type: ignore
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(m.params):
        data = m.params[name].data
        flat = data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at()
            flat[i] = orig - eps
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, err)
    logger.debug("grad_check on %s: max relative error %.3e", model.graph.name, worst)
    return worst


# checkpoints


def checkpoint_to_bytes(model: Model) -> bytes:
    """RRDK1 magic, uint32 length + JSON graph, uint32 tensor count, then per tensor:
    uint32 name length, name, uint32 ndim, uint32 dims, float32 values (all little-endian).
    Tensors are written in name order, so equal models give equal bytes.
    """
    meta = model.graph.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta)), meta]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ConfigError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def checkpoint_from_bytes(data: bytes) -> Model:
    if not data.startswith(MAGIC):
        raise ConfigError("not a relureduce checkpoint (bad magic bytes)")
    r = _Reader(data)
    r.take(len(MAGIC))
    (meta_len,) = r.u32()
    try:
        graph = NetworkGraph.from_json(r.take(meta_len).decode("utf-8"))
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        # GraphError, JSONDecodeError and UnicodeDecodeError are ValueErrors
        raise ConfigError(f"corrupted checkpoint metadata: {e}") from None
    (count,) = r.u32()
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.u32()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ConfigError(f"corrupted tensor name in checkpoint: {e}") from None
        (ndim,) = r.u32()
        dims = r.u32(ndim) if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise ConfigError(f"{len(data) - r.pos} trailing bytes after the tensor table")

    try:
        return model_from_state(graph, state)
    except GraphError as e:
        raise ConfigError(f"checkpoint tensors do not match its graph: {e}") from None


def model_from_state(graph: NetworkGraph, state: dict[str, np.ndarray]) -> Model:
    """Model from a name -> array mapping holding exactly the tensors `graph` needs"""
    expected = {name: shape for name, shape, _ in _param_specs(infer_shapes(graph))}
    if set(expected) != set(state):
        raise GraphError(f"missing {sorted(set(expected) - set(state))[:3]}, extra {sorted(set(state) - set(expected))[:3]}")
    for name, shape in expected.items():
        if tuple(state[name].shape) != shape:
            raise GraphError(f"{name} has shape {state[name].shape}, expected {shape}")
    buffers = {k: v for k, v in state.items() if k.endswith((".running_mean", ".running_var"))}
    params = {k: Tensor(v) for k, v in state.items() if k not in buffers}
    return Model(infer_shapes(graph), params, buffers)
