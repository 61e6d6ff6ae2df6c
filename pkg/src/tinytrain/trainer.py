"""Training on compiled graphs: QAS, int8 weight casting, accumulation, evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, to_float, to_int8
from .executor import FLOAT, INT8, NumericError, Program, grad_to_float
from .graph.ir import Graph, OpKind as K
from .qtensor import INT32_MAX, INT32_MIN, GradTensor, load_tensors, save_tensors

OPTIMIZERS = ("sgd", "adam", "lars")
SCHEDULES = ("constant", "cosine")


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    name: str = "sgd"
    lr_schedule: str = "constant"
    warmup_epochs: int = 0
    momentum: float = 0.0
    qas: bool = True
    grad_accumulation: int = 1
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    trust_coefficient: float = 0.02

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.grad_accumulation < 1:
            raise ValueError("grad_accumulation must be >= 1")
        if self.name not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}")
        self.betas = tuple(self.betas)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


def lr_at(cfg: OptimizerConfig, step: int, total_steps: int, steps_per_epoch: int) -> float:
    """Constant, or linear warm-up followed by cosine decay to zero."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    span = max(total_steps - warm, 1)
    return 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * min(step - warm, span) / span))


# ------------------------------------------------------------------ QAS

def qas_scale(grad, s_w, s_x=None, kind: str = "weight"):
    """Rescale a gradient taken w.r.t. a quantized tensor.

    weight: ``G * s_W**-2`` per output channel; bias: ``G * (s_W * s_x)**-2``.
    """
    if s_w is None or (kind == "bias" and s_x is None):
        raise ValueError(f"QAS for a {kind} gradient needs its scale context")
    g = np.asarray(grad, dtype=np.float64)
    s = np.asarray(s_w, dtype=np.float64)
    if kind == "bias":
        s = s * float(s_x)
    elif kind != "weight":
        raise ValueError(f"unknown parameter kind {kind!r}")
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    s = s.reshape((-1,) + (1,) * (g.ndim - 1)) if s.size > 1 else s.reshape(())
    return g / (s * s)


class ParamContext:
    """Static facts about one trainable parameter needed by the update rule."""

    def __init__(self, g: Graph, pid: int, kind: str, layer: int | None):
        t = g.tensors[pid]
        self.pid, self.kind, self.dtype, self.layer = pid, kind, t.dtype, layer
        self.name = t.name
        self.s_w = self.s_x = None
        if t.dtype in ("int8", "int32"):
            lay = g.layers[layer]
            wref = g.tensors[lay.weight]
            if lay.weight_slices and kind == "weight":
                wref = g.tensors[lay.weight_slices["trainable"]]
            self.s_w = wref.qparams.scales.astype(np.float64)
            self.s_x = float(g.tensors[lay.input].qparams.scale)

    def quantized_grad(self, grad) -> np.ndarray:
        """Gradient w.r.t. the stored integer tensor (chain rule through the scale)."""
        g = grad_to_float(grad)
        if self.dtype == "int8":
            return g * self.s_w.reshape((-1,) + (1,) * (g.ndim - 1))
        if self.dtype == "int32":
            return g * self.s_w * self.s_x
        return g


class Optimizer:
    """One update rule for int8 weights, int32 biases and fp32 tensors.

    In int8 mode the step for an integer tensor is computed in its own
    integer units, rounded half-to-even, subtracted and saturated.
    """

    def __init__(self, g: Graph, cfg: OptimizerConfig, mode: str = INT8):
        self.cfg = cfg
        self.mode = mode
        self.lr = cfg.learning_rate
        self.ctx: dict[int, ParamContext] = {}
        for n in g.nodes:
            if n.op == K.GRAD_DESCENT:
                pid = n.inputs[0]
                self.ctx[pid] = ParamContext(g, pid, n.attrs.get("param_kind", "weight"),
                                             n.attrs.get("layer"))
        self.state: dict[int, dict] = {}
        self.zero_delta = 0
        self.last_effective: dict[int, np.ndarray] = {}

    def effective_grad(self, pid: int, grad) -> np.ndarray:
        c = self.ctx[pid]
        if self.mode == FLOAT or c.dtype == "fp32":
            return grad_to_float(grad)
        gq = c.quantized_grad(grad)
        if self.cfg.qas:
            gq = qas_scale(gq, c.s_w, c.s_x, "weight" if c.dtype == "int8" else "bias")
        return gq

    def _direction(self, pid: int, value: np.ndarray, g: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        st = self.state.setdefault(pid, {})
        w = value.astype(np.float64)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * w
        if cfg.name == "adam":
            b1, b2 = cfg.betas
            t = st["t"] = st.get("t", 0) + 1
            m = st["m"] = b1 * st.get("m", 0.0) + (1 - b1) * g
            v = st["v"] = b2 * st.get("v", 0.0) + (1 - b2) * g * g
            return (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + cfg.eps)
        if cfg.name == "lars":
            wn, gn = float(np.linalg.norm(w)), float(np.linalg.norm(g))
            trust = cfg.trust_coefficient * wn / gn if wn > 0 and gn > 0 else 1.0
            g = g * trust
        if cfg.momentum:
            buf = st["buf"] = cfg.momentum * st.get("buf", 0.0) + g
            return buf
        return g

    def __call__(self, node, pid: int, value: np.ndarray, grad) -> np.ndarray:
        c = self.ctx[pid]
        g = self.effective_grad(pid, grad)
        self.last_effective[pid] = g
        delta = self.lr * self._direction(pid, value, g)
        if self.mode == FLOAT or c.dtype == "fp32":
            return (value - delta).astype(value.dtype)
        step = np.rint(delta)
        self.zero_delta += int(np.count_nonzero((step == 0) & (delta != 0)))
        new = value.astype(np.float64) - step
        if c.dtype == "int8":
            return np.clip(new, -127, 127).astype(np.int8)
        return np.clip(new, INT32_MIN, INT32_MAX).astype(np.int32)


# ------------------------------------------------------------------ state

@dataclass
class TrainState:
    graph: Graph
    params: dict[int, np.ndarray]
    opt_cfg: OptimizerConfig
    mode: str = INT8
    schedule: object = None
    seed: int = 0
    step: int = 0
    epoch: int = 0
    accum: dict[int, object] = field(default_factory=dict)
    accum_count: int = 0
    float_dtype: object = np.float32

    def __post_init__(self):
        self.program = Program(self.graph, self.schedule, self.mode, self.float_dtype)
        self.optimizer = Optimizer(self.graph, self.opt_cfg, self.mode)

    def encode(self, images) -> np.ndarray:
        if self.mode == INT8:
            return to_int8(images)
        return to_float(images, self.float_dtype)

    @property
    def trainable_ids(self) -> list[int]:
        return [n.inputs[0] for n in self.program.order if n.op == K.GRAD_DESCENT]


def compute_gradients(state: TrainState, images, labels):
    """Forward + backward without applying updates: (loss, {param id: grad})."""
    res = state.program.run(state.params, state.encode(images), np.asarray(labels))
    return res.loss, res.grads


def _accumulate(buf, grad):
    if buf is None:
        if isinstance(grad, GradTensor):
            return GradTensor(grad.values.astype(np.int64), grad.scale)
        return np.asarray(grad, dtype=np.float64).copy()
    if isinstance(grad, GradTensor):
        ratio = grad.scale / buf.scale
        vals = grad.values if ratio == 1.0 else np.rint(grad.values * ratio)
        acc = buf.values + vals.astype(np.int64)
        if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
            raise NumericError("int32 gradient accumulator overflow; reduce accumulation steps")
        return GradTensor(acc, buf.scale)
    return buf + grad


def _average(buf, n: int):
    if isinstance(buf, GradTensor):
        if n == 1:
            return GradTensor(buf.values.astype(np.int32), buf.scale)
        if np.all(buf.values % n == 0):
            return GradTensor((buf.values // n).astype(np.int32), buf.scale)
        return GradTensor(buf.values.astype(np.int32), buf.scale / n)
    return (buf / n).astype(np.float32)


def accumulate_gradients(state: TrainState, images, labels) -> float:
    """Add single-sample gradients of every microbatch into the accumulators."""
    losses = []
    for x, y in zip(images, labels):
        loss, grads = compute_gradients(state, x[None], np.asarray([y]))
        losses.append(loss)
        for pid, gr in grads.items():
            state.accum[pid] = _accumulate(state.accum.get(pid), gr)
        state.accum_count += 1
    return float(np.mean(losses)) if losses else float("nan")


def apply_accumulated(state: TrainState, lr: float | None = None):
    """Average the accumulators, run the optimizer in schedule order, zero buffers."""
    if state.accum_count == 0:
        return
    if lr is not None:
        state.optimizer.lr = lr
    n = state.accum_count
    for node in state.program.order:
        if node.op != K.GRAD_DESCENT:
            continue
        pid = node.inputs[0]
        state.params[pid] = state.optimizer(node, pid, state.params[pid],
                                            _average(state.accum[pid], n))
    state.accum.clear()
    state.accum_count = 0
    state.step += 1


def sgd_step(state: TrainState, grads: dict, lr: float) -> TrainState:
    """Apply one update from already computed gradients."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.optimizer.lr = lr
    for node in state.program.order:
        if node.op == K.GRAD_DESCENT:
            pid = node.inputs[0]
            state.params[pid] = state.optimizer(node, pid, state.params[pid], grads[pid])
    state.step += 1
    return state


def train_step(state: TrainState, images, labels, lr: float) -> float:
    """One fused step: GradDescent nodes update parameters as the schedule reaches them."""
    state.optimizer.lr = lr
    res = state.program.run(state.params, state.encode(images), np.asarray(labels),
                            optimizer=state.optimizer)
    state.step += 1
    return res.loss


def evaluate(state: TrainState, ds: Dataset, batch: int = 256) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for i in range(0, len(ds), batch):
        logits = state.program.forward(state.params, state.encode(ds.images[i:i + batch]))
        correct += int(np.sum(np.argmax(logits, axis=1) == ds.labels[i:i + batch]))
    return correct / len(ds)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float
    lr: float
    zero_delta: int

    def to_json(self) -> dict:
        return asdict(self)


def train(state: TrainState, ds: Dataset, epochs: int, eval_ds: Dataset | None = None,
          batch_size: int = 1, log=None) -> list[EpochLog]:
    """Single-sample (or ``batch_size``) steps; deterministic given ``state.seed``."""
    if len(ds) == 0:
        raise ValueError("training set is empty")
    n_cls = state.graph.tensors[state.graph.outputs["logits"]].shape[1]
    if ds.labels.max() >= n_cls:
        raise ValueError(f"label {int(ds.labels.max())} out of range for {n_cls} classes")
    cfg = state.opt_cfg
    acc_n = cfg.grad_accumulation
    steps_per_epoch = math.ceil(len(ds) / (batch_size * acc_n))
    total = steps_per_epoch * epochs
    history = []
    for _ in range(epochs):
        rng = np.random.default_rng([state.seed, state.epoch])
        order = rng.permutation(len(ds))
        losses, lr = [], cfg.learning_rate
        zd0 = state.optimizer.zero_delta
        for start in range(0, len(order), batch_size * acc_n):
            idx = order[start:start + batch_size * acc_n]
            lr = lr_at(cfg, state.step, total, steps_per_epoch)
            if acc_n == 1:
                loss = train_step(state, ds.images[idx], ds.labels[idx], lr)
            else:
                loss = accumulate_gradients(state, ds.images[idx], ds.labels[idx])
                apply_accumulated(state, lr)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at step {state.step}")
            losses.append(loss)
        state.epoch += 1
        acc = evaluate(state, eval_ds if eval_ds is not None else ds)
        entry = EpochLog(state.epoch, float(np.mean(losses)), acc, float(lr),
                         state.optimizer.zero_delta - zd0)
        history.append(entry)
        if log is not None:
            log.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
    return history


def mean_loss(state: TrainState, ds: Dataset, batch: int = 256) -> float:
    """Dataset-average loss without updates."""
    total = 0.0
    for i in range(0, len(ds), batch):
        res = state.program.run(state.params, state.encode(ds.images[i:i + batch]),
                                ds.labels[i:i + batch], forward_only=False)
        total += res.loss * len(ds.labels[i:i + batch])
    return total / len(ds)


# ------------------------------------------------------------------ diagnostics

RATIO_INF = float("inf")


def ratio_report(state: TrainState, grads: dict, shadow_grads: dict | None = None,
                 shadow_params: dict | None = None) -> list[dict]:
    """Per trainable tensor ``||W||/||G||`` before and after QAS (and of a float shadow)."""
    rows = []
    for pid in state.trainable_ids:
        c = state.optimizer.ctx[pid]
        w = state.params[pid].astype(np.float64)
        gq = c.quantized_grad(grads[pid])
        wn = float(np.linalg.norm(w))
        pre_n = float(np.linalg.norm(gq))
        row = {"tensor": c.name, "kind": c.kind, "dtype": c.dtype}
        if c.dtype == "fp32":
            row["pre_qas"] = row["post_qas"] = wn / pre_n if pre_n > 0 else RATIO_INF
        else:
            post = qas_scale(gq, c.s_w, c.s_x, "weight" if c.dtype == "int8" else "bias")
            post_n = float(np.linalg.norm(post))
            row["pre_qas"] = wn / pre_n if pre_n > 0 else RATIO_INF
            row["post_qas"] = wn / post_n if post_n > 0 else RATIO_INF
        if shadow_grads is not None:
            sw = float(np.linalg.norm(np.asarray(shadow_params[pid], np.float64)))
            sg = float(np.linalg.norm(grad_to_float(shadow_grads[pid])))
            row["shadow"] = sw / sg if sg > 0 else RATIO_INF
        rows.append(row)
    return rows


def finite_rows(rows: list[dict], key: str) -> list[float]:
    """Ratios with the +inf sentinel dropped, for aggregates."""
    return [r[key] for r in rows if math.isfinite(r[key])]


def lr_sweep(make_state, ds: Dataset, eval_ds: Dataset, lrs, epochs: int):
    """Train one fresh state per learning rate; returns ``[(lr, final accuracy)]``."""
    out = []
    for lr in sorted(lrs):
        st = make_state(lr)
        hist = train(st, ds, epochs, eval_ds)
        out.append((lr, hist[-1].accuracy if hist else float("nan")))
    return out


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(state: TrainState, named_params: dict, path):
    path = Path(path)
    save_tensors(path, named_params, {"step": state.step, "epoch": state.epoch,
                                      "seed": state.seed})
    opt = {"config": {**asdict(state.opt_cfg), "betas": list(state.opt_cfg.betas)},
           "zero_delta": state.optimizer.zero_delta, "step": state.step}
    path.with_suffix(".opt.json").write_text(json.dumps(opt, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict, dict]:
    tensors, meta = load_tensors(path)
    return tensors, meta


__all__ = ["EpochLog", "OptimizerConfig", "Optimizer", "ParamContext", "RATIO_INF",
           "TrainState", "accumulate_gradients", "apply_accumulated", "compute_gradients",
           "evaluate", "finite_rows", "load_checkpoint", "lr_at", "lr_sweep", "mean_loss",
           "qas_scale", "ratio_report", "save_checkpoint", "sgd_step", "train", "train_step"]
