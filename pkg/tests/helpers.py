"""Shared builders and independent reference implementations for the tests."""
from __future__ import annotations

import numpy as np

from tinytrain.executor import FLOAT, Program
from tinytrain.graph.builder import build_backbone
from tinytrain.graph.builder import GraphBuilder
from tinytrain.graph.ir import Layer, OpKind as K
from tinytrain.model import init_float_params, quantize_model
from tinytrain.qtensor import PER_TENSOR, QuantParams

UNIT = QuantParams([1.0], [0], PER_TENSOR)


def micro_graph(seed: int, max_ops: int = 4):
    """Random float micro-graph: 1..max_ops body ops, then pool -> linear -> softmax-CE.

    Returns ``(graph, params)`` with every parameter trainable.
    """
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    g = b.g
    c0 = int(rng.integers(1, 4))
    hw = int(rng.integers(3, 6))
    x = b.input("x", (1, c0, hw, hw), "int8", UNIT)
    label = b.input("label", (1,), "int32")
    params = {}

    def conv(x, depthwise):
        cin = g.tensors[x].shape[1]
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2])) if g.tensors[x].shape[2] > 2 else 1
        cout = cin if depthwise else int(rng.integers(1, 5))
        wshape = (cin, 1, k, k) if depthwise else (cout, cin, k, k)
        i = len(g.layers)
        w = b.param(f"l{i}.weight", wshape, "int8", UNIT)
        bias = b.param(f"l{i}.bias", (cout,), "int32", UNIT)
        params[w] = rng.standard_normal(wshape)
        params[bias] = 0.1 * rng.standard_normal(cout)
        act = str(rng.choice(["none", "relu", "relu6"]))
        attrs = {"stride": (stride, stride), "padding": (k // 2, k // 2), "act": act}
        kind = K.QDEPTHWISE if depthwise else K.QCONV2D
        if not depthwise:
            attrs["groups"] = 1
        y = b.op1(kind, [x, w, bias], attrs, name=f"l{i}", qparams=UNIT)
        g.layers.append(Layer(i, f"l{i}", "dw" if depthwise else "conv", g.nodes[-1].id,
                              w, bias, x, y))
        return y

    for _ in range(int(rng.integers(1, max_ops + 1))):
        choice = rng.choice(["conv", "dw", "add", "relu"])
        if choice == "conv":
            x = conv(x, False)
        elif choice == "dw":
            x = conv(x, True)
        elif choice == "relu":
            x = b.op1(K.RELU, [x], qparams=UNIT)
        else:
            cin = g.tensors[x].shape[1]
            w = b.param(f"l{len(g.layers)}.weight", (cin, cin, 1, 1), "int8", UNIT)
            bias = b.param(f"l{len(g.layers)}.bias", (cin,), "int32", UNIT)
            params[w] = rng.standard_normal((cin, cin, 1, 1))
            params[bias] = 0.1 * rng.standard_normal(cin)
            i = len(g.layers)
            y = b.op1(K.QCONV2D, [x, w, bias], {"stride": (1, 1), "padding": (0, 0),
                                                  "groups": 1, "act": "none"}, qparams=UNIT)
            g.layers.append(Layer(i, f"l{i}", "conv", g.nodes[-1].id, w, bias, x, y))
            x = b.op1(K.ADD, [x, y], qparams=UNIT)
    pooled = b.op1(K.AVGPOOL, [x], qparams=UNIT)
    flat = b.op1(K.FLATTEN, [pooled], qparams=UNIT)
    feat = b.op1(K.DEQUANTIZE, [flat])
    n_cls = int(rng.integers(2, 5))
    cw = b.param("classifier.weight", (n_cls, g.tensors[feat].shape[1]), "fp32")
    cb = b.param("classifier.bias", (n_cls,), "fp32")
    params[cw] = rng.standard_normal((n_cls, g.tensors[feat].shape[1]))
    params[cb] = 0.1 * rng.standard_normal(n_cls)
    logits = b.op1(K.FLOAT_LINEAR, [feat, cw, cb])
    g.classifier = Layer(-1, "classifier", "classifier", g.nodes[-1].id, cw, cb, feat, logits)
    loss = b.op1(K.SOFTMAX_CE, [logits, label])
    g.outputs = {"logits": logits, "loss": loss}
    g.trainable = {p: None for p in g.parameters}
    inputs = (rng.standard_normal((1, c0, hw, hw)), np.asarray([int(rng.integers(0, n_cls))]))
    return g, params, inputs


def finite_difference_check(g_train, params, image, label, eps=1e-6):
    """Max relative error between derived and central-difference gradients (float64)."""
    prog = Program(g_train, mode=FLOAT, float_dtype=np.float64)
    res = prog.run({k: v.copy() for k, v in params.items()}, image, label)
    worst = 0.0
    for pid, grad in res.grads.items():
        grad = np.asarray(grad, dtype=np.float64)
        fd = np.zeros_like(params[pid], dtype=np.float64)
        for idx in np.ndindex(params[pid].shape):
            p = {k: v.copy() for k, v in params.items()}
            p[pid][idx] += eps
            up = prog.run(p, image, label).loss
            p[pid][idx] -= 2 * eps
            down = prog.run(p, image, label).loss
            fd[idx] = (up - down) / (2 * eps)
        denom = max(float(np.abs(fd).max()), float(np.abs(grad).max()), 1e-8)
        worst = max(worst, float(np.abs(grad - fd).max()) / denom)
    return worst


def quantized_toy(cfg, seed, calib_n=32):
    """Seeded random backbone (non-zero biases) quantized on random calibration images."""
    g = build_backbone(cfg)
    rng = np.random.default_rng(seed)
    calib = rng.integers(0, 256, (calib_n, cfg.in_channels, cfg.resolution, cfg.resolution),
                         dtype=np.uint8)
    fp = init_float_params(g, seed)
    for k, v in fp.items():
        if k.endswith(".bias"):
            fp[k] = (0.05 * rng.standard_normal(v.shape)).astype(np.float32)
    return quantize_model(g, fp, calib), calib



# ------------------------------------------------------------------ reference kernels

def naive_conv_int(x, w, stride, padding, groups, x_zp=0):
    """Loop-nest integer convolution (int64 accumulate), the reference for the fast kernels."""
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.int64)
    opg = cout // groups
    xi = x.astype(np.int64) - x_zp
    wi = w.astype(np.int64)
    for b_ in range(n):
        for o in range(cout):
            gidx = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0
                    for c in range(cpg):
                        ci = gidx * cpg + c
                        for u in range(kh):
                            for v in range(kw):
                                y_, x_ = i * sh - ph + u, j * sw - pw + v
                                if 0 <= y_ < h and 0 <= x_ < wd:
                                    acc += xi[b_, ci, y_, x_] * wi[o, c, u, v]
                    out[b_, o, i, j] = acc
    return out


def reference_qconv(x, x_zp, w, bias, multiplier, out_zp, qmin, qmax, stride, padding, groups):
    acc = naive_conv_int(x, w, stride, padding, groups, x_zp)
    if bias is not None:
        acc = acc + np.asarray(bias, np.int64)[None, :, None, None]
    m = np.asarray(multiplier, np.float64).reshape(1, -1, 1, 1)
    return np.clip(np.rint(acc * m) + out_zp, qmin, qmax).astype(np.int8)
