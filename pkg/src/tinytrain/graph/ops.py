"""Arity and shape/dtype rules for every op kind.

``infer`` returns the expected ``(shape, dtype)`` of each output; it raises
:class:`ShapeError` naming the offending tensors when inputs do not conform.
"""
from __future__ import annotations

import math

from .ir import OpKind as K

# (min inputs, max inputs or None, number of outputs)
ARITY = {
    K.QCONV2D: (3, 3, 1), K.QDEPTHWISE: (3, 3, 1), K.QLINEAR: (3, 3, 1),
    K.FLOAT_LINEAR: (3, 3, 1), K.ADD: (2, 2, 1), K.RELU: (1, 1, 1), K.RELU6: (1, 1, 1),
    K.AVGPOOL: (1, 1, 1), K.FLATTEN: (1, 1, 1), K.QUANTIZE: (1, 1, 1),
    K.DEQUANTIZE: (1, 1, 1), K.SOFTMAX_CE: (2, 2, 1), K.SLICE: (1, 1, 1),
    K.CONCAT: (1, None, 1), K.TRANSPOSE: (1, 1, 1), K.SUM: (1, None, 1),
    K.CLIP_MASK: (1, 1, 1), K.MASK_GRAD: (2, 2, 1), K.CONV_INPUT_GRAD: (2, None, 1),
    K.CONV_WEIGHT_GRAD: (2, 2, 1), K.LINEAR_INPUT_GRAD: (2, None, 1),
    K.LINEAR_WEIGHT_GRAD: (2, 2, 1), K.BIAS_GRAD: (1, 1, 1), K.AVGPOOL_GRAD: (1, 1, 1),
    K.RESHAPE: (1, 1, 1), K.SOFTMAX_CE_GRAD: (2, 2, 1), K.DEQUANTIZE_GRAD: (1, 1, 1),
    K.QUANTIZE_GRAD: (1, 1, 1), K.SLICE_GRAD: (1, 1, 1), K.GRAD_DESCENT: (2, 2, 0),
}

ATTR_SCHEMA = {
    K.QCONV2D: {"stride", "padding", "groups", "act", "channels"},
    K.QDEPTHWISE: {"stride", "padding", "act", "channels"},
    K.QLINEAR: {"act", "channels"},
    K.FLOAT_LINEAR: set(),
    K.SLICE: {"axis", "index"},
    K.CONCAT: {"axis", "index"},
    K.TRANSPOSE: {"perm"},
    K.CLIP_MASK: {"act"},
    K.CONV_INPUT_GRAD: {"stride", "padding", "groups", "in_shape", "weight_channels", "depthwise"},
    K.CONV_WEIGHT_GRAD: {"stride", "padding", "groups", "kernel", "channels", "depthwise"},
    K.LINEAR_INPUT_GRAD: {"weight_channels"},
    K.LINEAR_WEIGHT_GRAD: {"channels"},
    K.AVGPOOL_GRAD: {"in_shape"},
    K.RESHAPE: {"shape"},
    K.SLICE_GRAD: {"axis", "index", "size"},
    K.GRAD_DESCENT: {"param_kind", "layer", "channels"},
}


class ShapeError(ValueError):
    def __init__(self, msg, tensors=()):
        super().__init__(msg)
        self.tensors = list(tensors)


def _grad_dtype(dtype):
    return "fp32" if dtype == "fp32" else "int32"


def conv_out_hw(h, w, kernel, stride, padding):
    kh, kw = kernel
    return ((h + 2 * padding[0] - kh) // stride[0] + 1,
            (w + 2 * padding[1] - kw) // stride[1] + 1)


def infer(graph, node) -> list[tuple[tuple, str]]:
    t = [graph.tensors[i] for i in node.inputs]
    a = node.attrs
    op = node.op
    lo, hi, _ = ARITY[op]
    if len(t) < lo or (hi is not None and len(t) > hi):
        raise ShapeError(f"{op} expects {lo}..{hi} inputs, got {len(t)}", node.inputs)

    if op in (K.QCONV2D, K.QDEPTHWISE):
        x, w, b = t
        if len(x.shape) != 4 or len(w.shape) != 4:
            raise ShapeError(f"{op}: expected 4-D input/weight", [x.id, w.id])
        n, c, h, wd = x.shape
        groups = c if op == K.QDEPTHWISE else a.get("groups", 1)
        channels = a.get("channels")
        c_in = c if channels is None or op != K.QDEPTHWISE else len(channels)
        g_eff = groups if channels is None or op != K.QDEPTHWISE else len(channels)
        if w.shape[1] * g_eff != c_in:
            raise ShapeError(f"{op}: input channels {c} incompatible with weight {w.shape}",
                             [x.id, w.id])
        if channels is None and b.shape != (w.shape[0],):
            raise ShapeError(f"{op}: bias {b.shape} vs weight {w.shape}", [w.id, b.id])
        if channels is not None and len(channels) != w.shape[0]:
            raise ShapeError(f"{op}: channel subset length != weight rows", [w.id])
        ho, wo = conv_out_hw(h, wd, w.shape[2:], a.get("stride", (1, 1)), a.get("padding", (0, 0)))
        if ho < 1 or wo < 1:
            raise ShapeError(f"{op}: empty output", [x.id])
        return [((n, w.shape[0], ho, wo), x.dtype)]
    if op in (K.QLINEAR, K.FLOAT_LINEAR):
        x, w, b = t
        if len(x.shape) != 2 or len(w.shape) != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"{op}: x {x.shape} incompatible with W {w.shape}", [x.id, w.id])
        if a.get("channels") is None and b.shape != (w.shape[0],):
            raise ShapeError(f"{op}: bias {b.shape} vs weight {w.shape}", [w.id, b.id])
        return [((x.shape[0], w.shape[0]), x.dtype)]
    if op in (K.ADD, K.SUM):
        shapes = {x.shape for x in t}
        if len(shapes) != 1:
            raise ShapeError(f"{op}: shape mismatch " + ", ".join(f"#{x.id}{x.shape}" for x in t),
                             [x.id for x in t])
        dtypes = {x.dtype for x in t}
        if len(dtypes) != 1:
            raise ShapeError(f"{op}: dtype mismatch", [x.id for x in t])
        return [(t[0].shape, t[0].dtype)]
    if op in (K.RELU, K.RELU6):
        return [(t[0].shape, t[0].dtype)]
    if op == K.AVGPOOL:
        if len(t[0].shape) != 4:
            raise ShapeError("AvgPool expects NCHW", [t[0].id])
        n, c = t[0].shape[:2]
        return [((n, c, 1, 1), t[0].dtype)]
    if op == K.FLATTEN:
        s = t[0].shape
        return [((s[0], math.prod(s[1:])), t[0].dtype)]
    if op == K.QUANTIZE:
        return [(t[0].shape, "int8")]
    if op == K.DEQUANTIZE:
        return [(t[0].shape, "fp32")]
    if op == K.SOFTMAX_CE:
        logits, label = t
        if len(logits.shape) != 2 or label.shape != (logits.shape[0],):
            raise ShapeError("SoftmaxCrossEntropy: logits (N,K) and labels (N,)",
                             [logits.id, label.id])
        return [((), "fp32")]
    if op == K.SLICE:
        s = list(t[0].shape)
        s[a["axis"]] = len(a["index"])
        return [(tuple(s), t[0].dtype)]
    if op == K.CONCAT:
        axis = a.get("axis", 1)
        base = list(t[0].shape)
        for x in t[1:]:
            other = list(x.shape)
            if len(other) != len(base) or any(
                    i != axis and p != q for i, (p, q) in enumerate(zip(base, other))):
                raise ShapeError("Concat: incompatible shapes", [y.id for y in t])
        base[axis] = sum(x.shape[axis] for x in t)
        return [(tuple(base), t[0].dtype)]
    if op == K.TRANSPOSE:
        return [(tuple(t[0].shape[p] for p in a["perm"]), t[0].dtype)]
    if op == K.CLIP_MASK:
        return [(t[0].shape, "bool")]
    if op == K.MASK_GRAD:
        g, m = t
        if g.shape != m.shape:
            raise ShapeError("MaskGrad: gradient/mask shape mismatch", [g.id, m.id])
        return [(g.shape, g.dtype)]
    if op == K.CONV_INPUT_GRAD:
        return [(tuple(a["in_shape"]), _grad_dtype(t[0].dtype))]
    if op == K.CONV_WEIGHT_GRAD:
        g, x = t
        co = g.shape[1] if a.get("channels") is None else len(a["channels"])
        groups = a.get("groups", 1)
        kh, kw = a["kernel"]
        return [((co, x.shape[1] // groups, kh, kw), _grad_dtype(g.dtype))]
    if op == K.LINEAR_INPUT_GRAD:
        return [((t[0].shape[0], t[1].shape[1]), _grad_dtype(t[0].dtype))]
    if op == K.LINEAR_WEIGHT_GRAD:
        g, x = t
        co = g.shape[1] if a.get("channels") is None else len(a["channels"])
        return [((co, x.shape[1]), _grad_dtype(g.dtype))]
    if op == K.BIAS_GRAD:
        return [((t[0].shape[1],), _grad_dtype(t[0].dtype))]
    if op == K.AVGPOOL_GRAD:
        return [(tuple(a["in_shape"]), t[0].dtype)]
    if op == K.RESHAPE:
        if math.prod(a["shape"]) != t[0].numel:
            raise ShapeError("Reshape: element count changes", [t[0].id])
        return [(tuple(a["shape"]), t[0].dtype)]
    if op == K.SOFTMAX_CE_GRAD:
        return [(t[0].shape, "fp32")]
    if op == K.DEQUANTIZE_GRAD:
        return [(t[0].shape, "int32")]
    if op == K.QUANTIZE_GRAD:
        return [(t[0].shape, "fp32")]
    if op == K.SLICE_GRAD:
        s = list(t[0].shape)
        s[a["axis"]] = a["size"]
        return [(tuple(s), t[0].dtype)]
    if op == K.GRAD_DESCENT:
        p, g = t
        expect = p.shape
        if g.shape != expect:
            raise ShapeError(f"GradDescent: gradient {g.shape} vs parameter {p.shape}",
                             [p.id, g.id])
        return []
    raise ShapeError(f"no shape rule for {op}", node.inputs)
