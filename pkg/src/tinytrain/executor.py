"""Interpreter for compiled graphs.

Two numeric modes share one graph:

``int8``
    Real quantized execution. Activations are int8 arrays carrying the
    quant params of their TensorRef, biases int32, the classifier fp32.
    Gradients of integer tensors are :class:`GradTensor` (int32 values, one
    float scale) taken with respect to the real-valued tensor.
``float``
    Shadow execution of the same graph with real-valued parameters
    (typically the dequantized int8 ones) and no rounding anywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .graph.ir import BACKWARD, FORWARD, UPDATE, Graph, Node, OpKind as K
from .qtensor import (ACT_QMAX, ACT_QMIN, INT32_MAX, INT32_MIN, GradTensor, QuantParams,
                      requant_multiplier, requantize_grad)

INT8, FLOAT = "int8", "float"

Optimizer = Callable[[Node, int, np.ndarray, object], np.ndarray]


class NumericError(FloatingPointError):
    pass


def act_bounds(qp: QuantParams, act: str) -> tuple[int, int]:
    """Integer clamp range implementing a fused ReLU/ReLU6 on the output grid."""
    zp, s = qp.zero_point, qp.scale
    if act == "none":
        return ACT_QMIN, ACT_QMAX
    lo = max(ACT_QMIN, min(ACT_QMAX, zp))
    if act == "relu":
        return lo, ACT_QMAX
    if act == "relu6":
        return lo, int(min(ACT_QMAX, zp + np.rint(6.0 / s)))
    raise ValueError(f"unknown activation {act!r}")


def _float_act(y, act):
    if act == "relu":
        return np.maximum(y, 0)
    if act == "relu6":
        return np.clip(y, 0, 6)
    return y


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _channel_bcast(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _gather_weight(values, channels, shape0):
    """Reassemble a full weight from slices listed with their channel indices."""
    first = values[0]
    out = np.empty((shape0,) + first.shape[1:], dtype=first.dtype)
    for v, ch in zip(values, channels):
        out[np.asarray(ch, dtype=np.intp)] = v
    return out


@dataclass
class RunResult:
    loss: float | None = None
    logits: np.ndarray | None = None
    grads: dict[int, object] = field(default_factory=dict)
    values: dict[int, object] = field(default_factory=dict)


class Program:
    """A graph bound to an execution order and a numeric mode."""

    def __init__(self, graph: Graph, schedule=None, mode: str = INT8, float_dtype=np.float32):
        if mode not in (INT8, FLOAT):
            raise ValueError(f"unknown mode {mode!r}")
        self.g = graph
        self.mode = mode
        self.fdt = np.dtype(float_dtype)
        nodes = graph.node_map()
        order = list(schedule.order) if hasattr(schedule, "order") else (
            list(schedule) if schedule is not None else [n.id for n in graph.nodes])
        if sorted(order) != sorted(nodes):
            raise ValueError("schedule must list every node exactly once")
        self.order = [nodes[i] for i in order]
        self.fwd_order = [n for n in self.order
                          if n.phase == FORWARD and n.op not in (K.CLIP_MASK, K.SOFTMAX_CE)]
        self._last_use = self._compute_last_use(self.order)
        self._last_use_fwd = self._compute_last_use(self.fwd_order)

    def _compute_last_use(self, order):
        last = {}
        for i, n in enumerate(order):
            for t in n.inputs:
                last[t] = i
        return last

    # ------------------------------------------------------------- running
    def run(self, params: dict, image, label=None, optimizer: Optimizer | None = None,
            keep=(), forward_only: bool = False) -> RunResult:
        """Execute once. ``params`` (tensor id -> array) is updated in place by
        GradDescent nodes when an optimizer is given; gradients are always
        returned in ``RunResult.grads``."""
        g = self.g
        env: dict[int, object] = {}
        image_id = g.inputs[0]
        env[image_id] = np.asarray(image, dtype=np.int8 if self.mode == INT8 and
                                   g.tensors[image_id].dtype == "int8" else self.fdt)
        if len(g.inputs) > 1 and label is not None:
            env[g.inputs[1]] = np.asarray(label, dtype=np.int64)
        order = self.fwd_order if forward_only or label is None else self.order
        last = self._last_use_fwd if order is self.fwd_order else self._last_use
        keep = set(keep) | set(g.outputs.values())
        res = RunResult()
        pset = set(g.parameters)
        for i, node in enumerate(order):
            vals = [params[t] if t in pset else env[t] for t in node.inputs]
            if node.op == K.GRAD_DESCENT:
                pid = node.inputs[0]
                res.grads[pid] = vals[1]
                if optimizer is not None:
                    params[pid] = optimizer(node, pid, params[pid], vals[1])
            else:
                outs = self._exec(node, vals)
                for t, v in zip(node.outputs, outs):
                    env[t] = v
            for t in node.inputs:
                if last.get(t) == i and t not in keep and t not in pset:
                    env.pop(t, None)
        if g.loss in env:
            res.loss = float(env[g.loss])
            if not np.isfinite(res.loss):
                raise NumericError("loss is not finite")
        res.logits = env.get(g.outputs.get("logits"))
        res.values = {t: env[t] for t in keep if t in env}
        return res

    def forward(self, params, image):
        return self.run(params, image, None, forward_only=True).logits

    # ------------------------------------------------------------- kernels
    def _q(self, t) -> QuantParams:
        return self.g.tensors[t].qparams

    def _exec(self, n: Node, v: list):
        op = n.op
        f = getattr(self, "_op_" + op.name.lower(), None)
        if f is None:
            raise NotImplementedError(f"executor has no kernel for {op}")
        out = f(n, v)
        return out if isinstance(out, list) else [out]

    # forward
    def _op_qconv2d(self, n, v):
        x, w, b = v
        a = n.attrs
        ch = a.get("channels")
        stride, pad = tuple(a.get("stride", (1, 1))), tuple(a.get("padding", (0, 0)))
        depthwise = n.op == K.QDEPTHWISE
        if ch is not None:
            idx = np.asarray(ch, dtype=np.intp)
            b = b[idx]
            if depthwise:
                x = x[:, idx]
        groups = x.shape[1] if depthwise else a.get("groups", 1)
        act = a.get("act", "none")
        if self.mode == FLOAT:
            y = kernels.conv2d_float(x, w, b, stride, pad, groups)
            return _float_act(y, act).astype(self.fdt, copy=False)
        xq, wq, oq = self._q(n.inputs[0]), self._q(n.inputs[1]), self._q(n.outputs[0])
        lo, hi = act_bounds(oq, act)
        return kernels.conv2d_int8(np.ascontiguousarray(x), xq.zero_point,
                                   np.ascontiguousarray(w), np.ascontiguousarray(b, np.int32),
                                   requant_multiplier(wq, xq, oq), oq.zero_point, lo, hi,
                                   stride, pad, groups)

    _op_qdepthwise = _op_qconv2d

    def _op_qlinear(self, n, v):
        x, w, b = v
        x4, w4 = x.reshape(*x.shape, 1, 1), w.reshape(*w.shape, 1, 1)
        node = Node(n.id, K.QCONV2D, n.inputs, n.outputs, {**n.attrs, "groups": 1}, n.phase)
        y = self._op_qconv2d(node, [x4, w4, b])
        return y.reshape(x.shape[0], w.shape[0])

    def _op_float_linear(self, n, v):
        x, w, b = v
        return (x @ w.T + b).astype(self.fdt if self.mode == FLOAT else np.float32, copy=False)

    def _op_add(self, n, v):
        a, b = v
        if self.mode == FLOAT or a.dtype != np.int8:
            return a + b
        qa, qb, qo = self._q(n.inputs[0]), self._q(n.inputs[1]), self._q(n.outputs[0])
        real = (qa.scale * (a.astype(np.float64) - qa.zero_point)
                + qb.scale * (b.astype(np.float64) - qb.zero_point))
        return np.clip(np.rint(real / qo.scale) + qo.zero_point, ACT_QMIN, ACT_QMAX).astype(np.int8)

    def _op_sum(self, n, v):
        if isinstance(v[0], GradTensor):
            return self._grad_sum(v)
        out = v[0]
        for x in v[1:]:
            out = out + x
        return out

    def _op_relu(self, n, v):
        return self._standalone_act(n, v[0], "relu")

    def _op_relu6(self, n, v):
        return self._standalone_act(n, v[0], "relu6")

    def _standalone_act(self, n, x, act):
        if self.mode == FLOAT or x.dtype != np.int8:
            return _float_act(x, act)
        qx, qo = self._q(n.inputs[0]), self._q(n.outputs[0])
        real = _float_act(qx.scale * (x.astype(np.float64) - qx.zero_point), act)
        return np.clip(np.rint(real / qo.scale) + qo.zero_point, ACT_QMIN, ACT_QMAX).astype(np.int8)

    def _op_avgpool(self, n, v):
        x = v[0]
        hw = x.shape[2] * x.shape[3]
        if self.mode == FLOAT or x.dtype != np.int8:
            return x.mean(axis=(2, 3), keepdims=True)
        qx, qo = self._q(n.inputs[0]), self._q(n.outputs[0])
        acc = (x.astype(np.int64) - qx.zero_point).sum(axis=(2, 3), keepdims=True)
        m = float(qx.scale) / (hw * float(qo.scale))
        return np.clip(np.rint(acc * m) + qo.zero_point, ACT_QMIN, ACT_QMAX).astype(np.int8)

    def _op_flatten(self, n, v):
        return v[0].reshape(v[0].shape[0], -1)

    def _op_dequantize(self, n, v):
        x = v[0]
        if self.mode == FLOAT or x.dtype != np.int8:
            return x.astype(self.fdt if self.mode == FLOAT else np.float32, copy=False)
        q = self._q(n.inputs[0])
        return (q.scale * (x.astype(np.float64) - q.zero_point)).astype(np.float32)

    def _op_quantize(self, n, v):
        x = v[0]
        if self.mode == FLOAT:
            return x
        q = self._q(n.outputs[0])
        return np.clip(np.rint(np.asarray(x, np.float64) / q.scale) + q.zero_point,
                       ACT_QMIN, ACT_QMAX).astype(np.int8)

    def _op_softmax_ce(self, n, v):
        z, y = v
        lsm = _log_softmax(np.asarray(z, dtype=np.float64))
        return np.asarray(-lsm[np.arange(len(y)), y].mean(), dtype=np.float64)

    def _op_slice(self, n, v):
        idx = np.asarray(n.attrs["index"], dtype=np.intp)
        x = v[0]
        if isinstance(x, GradTensor):
            return GradTensor(np.take(x.values, idx, axis=n.attrs["axis"]), x.scale)
        return np.take(x, idx, axis=n.attrs["axis"])

    def _op_concat(self, n, v):
        axis = n.attrs.get("axis", 1)
        index = n.attrs.get("index")
        if not index:
            return np.concatenate(v, axis=axis)
        shape = list(v[0].shape)
        shape[axis] = sum(x.shape[axis] for x in v)
        out = np.empty(shape, dtype=v[0].dtype)
        for x, idx in zip(v, index):
            sl = [slice(None)] * len(shape)
            sl[axis] = np.asarray(idx, dtype=np.intp)
            out[tuple(sl)] = x
        return out

    def _op_transpose(self, n, v):
        x = v[0]
        perm = tuple(n.attrs["perm"])
        if isinstance(x, GradTensor):
            return GradTensor(np.transpose(x.values, perm), x.scale)
        return np.transpose(x, perm)

    def _op_clip_mask(self, n, v):
        y = v[0]
        act = n.attrs["act"]
        if self.mode == FLOAT or y.dtype != np.int8:
            m = y > 0
            return m & (y < 6) if act == "relu6" else m
        lo, hi = act_bounds(self._q(n.inputs[0]), act)
        m = y > lo
        return m & (y < hi) if act == "relu6" else m

    # backward
    def _op_softmax_ce_grad(self, n, v):
        z, y = v
        z = np.asarray(z, dtype=np.float64)
        p = np.exp(_log_softmax(z))
        p[np.arange(len(y)), y] -= 1.0
        return (p / len(y)).astype(self.fdt if self.mode == FLOAT else np.float32)

    def _op_mask_grad(self, n, v):
        gy, m = v
        if isinstance(gy, GradTensor):
            return GradTensor(np.where(m, gy.values, 0).astype(np.int32), gy.scale)
        return np.where(m, gy, 0).astype(gy.dtype, copy=False)

    def _weights(self, n, v):
        """Full weight (and per-channel scales in int8 mode) from one or more slices."""
        ws = v[1:]
        quantized = self.mode == INT8 and self.g.tensors[n.inputs[1]].qparams is not None
        if len(ws) == 1:
            w = ws[0]
            scales = self._q(n.inputs[1]).scales if quantized else None
            return w, scales
        chans = n.attrs["weight_channels"]
        total = sum(len(c) for c in chans)
        w = _gather_weight(ws, chans, total)
        scales = None
        if quantized:
            scales = _gather_weight([self._q(t).scales for t in n.inputs[1:]], chans, total)
        return w, scales

    def _op_conv_input_grad(self, n, v):
        gy = v[0]
        w, s_w = self._weights(n, v)
        a = n.attrs
        in_hw = tuple(a["in_shape"][2:])
        stride, pad, groups = tuple(a["stride"]), tuple(a["padding"]), a["groups"]
        if not isinstance(gy, GradTensor):
            return kernels.conv2d_input_grad_float(gy, w, in_hw, stride, pad, groups).astype(
                gy.dtype, copy=False)
        h = gy.to_float() * _channel_bcast(s_w.astype(np.float64), gy.values.ndim)
        hq, s_h = requantize_grad(h)
        out = kernels.conv2d_input_grad_int(np.ascontiguousarray(hq), np.ascontiguousarray(w),
                                            in_hw, stride, pad, groups)
        return GradTensor(out, s_h)

    def _op_conv_weight_grad(self, n, v):
        gy, x = v
        a = n.attrs
        stride, pad, groups = tuple(a["stride"]), tuple(a["padding"]), a["groups"]
        kernel, ch = tuple(a["kernel"]), a.get("channels")
        if not isinstance(gy, GradTensor):
            return kernels.conv2d_weight_grad_float(gy, x, kernel, stride, pad, groups,
                                                    ch).astype(gy.dtype, copy=False)
        gq, s_g = requantize_grad(gy.to_float())
        qx = self._q(n.inputs[1])
        out = kernels.conv2d_weight_grad_int(np.ascontiguousarray(gq), np.ascontiguousarray(x),
                                             qx.zero_point, kernel, stride, pad, groups,
                                             None if ch is None else np.asarray(ch, np.intp))
        return GradTensor(out, s_g * qx.scale)

    def _op_linear_input_grad(self, n, v):
        gy = v[0]
        w, s_w = self._weights(n, v)
        if not isinstance(gy, GradTensor):
            return (gy @ w).astype(gy.dtype, copy=False)
        h = gy.to_float() * s_w.astype(np.float64)[None, :]
        hq, s_h = requantize_grad(h)
        acc = hq.astype(np.int64) @ w.astype(np.int64)
        return GradTensor(acc.astype(np.int32), s_h)

    def _op_linear_weight_grad(self, n, v):
        gy, x = v
        ch = n.attrs.get("channels")
        if not isinstance(gy, GradTensor):
            out = gy.T @ x
            return (out if ch is None else out[np.asarray(ch, np.intp)]).astype(gy.dtype, copy=False)
        gq, s_g = requantize_grad(gy.to_float())
        qx = self._q(n.inputs[1])
        acc = gq.astype(np.int64).T @ (x.astype(np.int64) - qx.zero_point)
        if ch is not None:
            acc = acc[np.asarray(ch, np.intp)]
        return GradTensor(_to_int32(acc), s_g * qx.scale)

    def _op_bias_grad(self, n, v):
        gy = v[0]
        axes = (0,) + tuple(range(2, (gy.values if isinstance(gy, GradTensor) else gy).ndim))
        if isinstance(gy, GradTensor):
            return GradTensor(_to_int32(gy.values.astype(np.int64).sum(axis=axes)), gy.scale)
        return gy.sum(axis=axes)

    def _op_avgpool_grad(self, n, v):
        gy = v[0]
        shape = (gy.shape[0],) + tuple(n.attrs["in_shape"][1:])
        hw = shape[2] * shape[3]
        if isinstance(gy, GradTensor):
            return GradTensor(np.broadcast_to(gy.values, shape).copy(), gy.scale / hw)
        return (np.broadcast_to(gy, shape) / hw).astype(gy.dtype, copy=False)

    def _op_reshape(self, n, v):
        gy = v[0]
        shape = (gy.shape[0],) + tuple(n.attrs["shape"][1:])
        if isinstance(gy, GradTensor):
            return GradTensor(gy.values.reshape(shape), gy.scale)
        return gy.reshape(shape)

    def _op_dequantize_grad(self, n, v):
        gy = v[0]
        if self.mode == FLOAT:
            return gy
        q, s = requantize_grad(gy)
        return GradTensor(q.astype(np.int32), s)

    def _op_quantize_grad(self, n, v):
        gy = v[0]
        if isinstance(gy, GradTensor):
            return gy.to_float().astype(np.float32)
        return gy

    def _op_slice_grad(self, n, v):
        gy = v[0]
        a = n.attrs
        vals = gy.values if isinstance(gy, GradTensor) else gy
        shape = list(vals.shape)
        shape[a["axis"]] = a["size"]
        out = np.zeros(shape, dtype=vals.dtype)
        sl = [slice(None)] * len(shape)
        sl[a["axis"]] = np.asarray(a["index"], dtype=np.intp)
        out[tuple(sl)] = vals
        return GradTensor(out, gy.scale) if isinstance(gy, GradTensor) else out

    def _grad_sum(self, parts: list[GradTensor]) -> GradTensor:
        if all(p.scale == parts[0].scale for p in parts):
            acc = sum(p.values.astype(np.int64) for p in parts)
            if np.abs(acc).max(initial=0) <= 127:
                return GradTensor(acc.astype(np.int32), parts[0].scale)
        total = sum(p.to_float() for p in parts)
        q, s = requantize_grad(total)
        return GradTensor(q.astype(np.int32), s)


def _to_int32(acc: np.ndarray) -> np.ndarray:
    if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
        raise NumericError("int32 accumulator overflow in gradient kernel")
    return acc.astype(np.int32)


def grad_to_float(grad) -> np.ndarray:
    """Real-valued view of a gradient of either representation."""
    if isinstance(grad, GradTensor):
        return grad.to_float()
    return np.asarray(grad, dtype=np.float64)


__all__ = ["BACKWARD", "FLOAT", "FORWARD", "INT8", "NumericError", "Program", "RunResult",
           "UPDATE", "act_bounds", "grad_to_float"]
