"""Quantized tensors, (de)quantization and int8 kernel entry points.

Weights are quantized symmetrically per output channel (zero point 0, range
[-127, 127]); activations use an asymmetric per-tensor affine mapping over
the full [-128, 127] range. All rounding is round-half-to-even.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import kernels

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-channel"

WEIGHT_QMIN, WEIGHT_QMAX = -127, 127
ACT_QMIN, ACT_QMAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


@dataclass(frozen=True)
class QuantParams:
    """Scales and zero points of a quantized tensor (channel axis 0)."""

    scales: np.ndarray
    zero_points: np.ndarray
    granularity: str = PER_TENSOR

    def __post_init__(self):
        scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float32))
        zps = np.atleast_1d(np.asarray(self.zero_points, dtype=np.int64))
        if zps.shape != scales.shape:
            raise ValueError("scales and zero_points must have the same length")
        if not np.all(scales > 0) or not np.all(np.isfinite(scales)):
            raise ValueError("quantization scales must be positive and finite")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_TENSOR and scales.size != 1:
            raise ValueError("per-tensor params carry exactly one scale")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zero_points", zps)

    @property
    def scale(self) -> float:
        if self.scales.size != 1:
            raise ValueError("per-channel params have no single scale")
        return float(self.scales[0])

    @property
    def zero_point(self) -> int:
        return int(self.zero_points[0])

    def take(self, channels) -> "QuantParams":
        """Params of a channel subset (identity for per-tensor params)."""
        if self.granularity == PER_TENSOR:
            return self
        idx = np.asarray(channels, dtype=np.intp)
        return QuantParams(self.scales[idx], self.zero_points[idx], PER_CHANNEL)

    def to_json(self) -> dict:
        return {
            "scales": [float(s) for s in self.scales],
            "zero_points": [int(z) for z in self.zero_points],
            "granularity": self.granularity,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "QuantParams":
        return cls(np.asarray(d["scales"], dtype=np.float32),
                   np.asarray(d["zero_points"], dtype=np.int64), d["granularity"])

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (self.granularity == other.granularity
                and np.array_equal(self.scales, other.scales)
                and np.array_equal(self.zero_points, other.zero_points))

    __hash__ = None


@dataclass
class QuantizedTensor:
    values: np.ndarray
    params: QuantParams
    bit_width: int = 8

    def __post_init__(self):
        dtype = np.int8 if self.bit_width == 8 else np.int32
        if self.bit_width not in (8, 32):
            raise ValueError("bit_width must be 8 or 32")
        self.values = np.asarray(self.values, dtype=dtype)
        if self.params.granularity == PER_CHANNEL and self.values.ndim:
            if self.params.scales.size != self.values.shape[0]:
                raise ValueError("per-channel scale count must match axis-0 length")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class GradTensor:
    """Gradient held as integer values times one float scale."""

    values: np.ndarray
    scale: float

    def to_float(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale

    @property
    def shape(self):
        return self.values.shape


def _channel_view(a: np.ndarray, ndim: int) -> np.ndarray:
    """Per-channel vector shaped to broadcast along axis 0 of an ``ndim`` tensor."""
    return a.reshape((-1,) + (1,) * max(ndim - 1, 0))


def _check_finite(t: np.ndarray):
    if not np.all(np.isfinite(t)):
        bad = int(np.size(t) - np.count_nonzero(np.isfinite(t)))
        raise ValueError(f"cannot quantize tensor with {bad} non-finite value(s)")


def symmetric_scales(t: np.ndarray, granularity: str = PER_CHANNEL) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if granularity == PER_CHANNEL and t.ndim >= 1:
        amax = np.abs(t.reshape(t.shape[0], -1)).max(axis=1)
    else:
        amax = np.atleast_1d(np.abs(t).max() if t.size else 0.0)
    scales = (amax / WEIGHT_QMAX).astype(np.float32)
    scales[scales == 0] = 1.0  # all-zero channel
    return scales


def quantize(t, granularity: str = PER_CHANNEL, symmetric: bool = True) -> QuantizedTensor:
    """Quantize a float tensor to int8.

    Symmetric mode maps the largest channel magnitude to 127. Asymmetric
    mode is per-tensor and covers ``[min(t, 0), max(t, 0)]`` with 256 levels.
    """
    t = np.asarray(t, dtype=np.float64)
    _check_finite(t)
    if symmetric:
        scales = symmetric_scales(t, granularity)
        params = QuantParams(scales, np.zeros_like(scales, dtype=np.int64), granularity)
        return QuantizedTensor(quantize_with(t, params, WEIGHT_QMIN, WEIGHT_QMAX), params)
    if granularity != PER_TENSOR:
        raise ValueError("asymmetric quantization is per-tensor only")
    params = affine_params(float(t.min()) if t.size else 0.0,
                           float(t.max()) if t.size else 0.0)
    return QuantizedTensor(quantize_with(t, params, ACT_QMIN, ACT_QMAX), params)


def affine_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric per-tensor params covering [lo, hi] (widened to include 0)."""
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = np.float32((hi - lo) / (ACT_QMAX - ACT_QMIN))
    if scale == 0:
        return QuantParams([1.0], [0], PER_TENSOR)
    zp = int(np.clip(np.rint(ACT_QMIN - lo / float(scale)), ACT_QMIN, ACT_QMAX))
    return QuantParams([scale], [zp], PER_TENSOR)


def quantize_with(t, params: QuantParams, qmin: int = ACT_QMIN, qmax: int = ACT_QMAX) -> np.ndarray:
    """Quantize onto an existing grid: ``clip(rint(t / s) + zp)``."""
    t = np.asarray(t, dtype=np.float64)
    _check_finite(t)
    if params.granularity == PER_CHANNEL:
        s = _channel_view(params.scales.astype(np.float64), t.ndim)
        z = _channel_view(params.zero_points.astype(np.float64), t.ndim)
    else:
        s, z = float(params.scales[0]), float(params.zero_points[0])
    q = np.rint(t / s) + z
    return np.clip(q, qmin, qmax).astype(np.int8)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """``scale[ch] * (value - zero_point[ch])`` as float32."""
    v = q.values.astype(np.float64)
    p = q.params
    if p.granularity == PER_CHANNEL and v.ndim:
        s = _channel_view(p.scales.astype(np.float64), v.ndim)
        z = _channel_view(p.zero_points.astype(np.float64), v.ndim)
    else:
        s, z = float(p.scales[0]), float(p.zero_points[0])
    return (s * (v - z)).astype(np.float32)


def cast2int8(v, qmin: int = WEIGHT_QMIN, qmax: int = WEIGHT_QMAX):
    """Round half to even, then saturate into ``[qmin, qmax]``."""
    r = np.clip(np.rint(np.asarray(v, dtype=np.float64)), qmin, qmax).astype(np.int8)
    return r if r.ndim else r[()]


def quantize_bias(b, w_params: QuantParams, x_params: QuantParams) -> QuantizedTensor:
    """int32 bias on the accumulator grid ``s_b = s_W * s_x``."""
    s = (w_params.scales.astype(np.float64) * float(x_params.scale)).astype(np.float32)
    params = QuantParams(s, np.zeros_like(s, dtype=np.int64), w_params.granularity)
    b = np.asarray(b, dtype=np.float64)
    _check_finite(b)
    vals = np.clip(np.rint(b / s.astype(np.float64)), INT32_MIN, INT32_MAX).astype(np.int32)
    return QuantizedTensor(vals, params, bit_width=32)


def requant_multiplier(w_params: QuantParams, x_params: QuantParams,
                       out_params: QuantParams) -> np.ndarray:
    return (w_params.scales.astype(np.float64) * float(x_params.scale)
            / float(out_params.scale))


def _check_bias(b: QuantizedTensor | None, w: QuantizedTensor, x: QuantizedTensor):
    if b is None:
        return
    if b.bit_width != 32:
        raise ValueError("bias must be stored as int32")
    if b.values.shape != (w.values.shape[0],):
        raise ValueError(f"bias shape {b.values.shape} does not match "
                         f"{w.values.shape[0]} output channels")
    expected = w.params.scales.astype(np.float64) * float(x.params.scale)
    got = np.broadcast_to(b.params.scales.astype(np.float64), expected.shape)
    if not np.allclose(got, expected, rtol=1e-6, atol=0):
        raise ValueError("bias scale must equal weight scale times input scale")


def qconv2d_forward(x: QuantizedTensor, w: QuantizedTensor, b: QuantizedTensor | None,
                    out_params: QuantParams, stride=(1, 1), padding=(0, 0), groups: int = 1,
                    qmin: int = ACT_QMIN, qmax: int = ACT_QMAX) -> QuantizedTensor:
    """int8 NCHW convolution: int32 accumulate, one float rescale, saturating cast."""
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ValueError("qconv2d expects NCHW input and OIHW weight")
    if x.values.shape[1] != w.values.shape[1] * groups:
        raise ValueError(f"input channels {x.values.shape[1]} do not match weight "
                         f"{w.values.shape} with groups={groups}")
    if x.params.granularity != PER_TENSOR:
        raise ValueError("activations must be per-tensor quantized")
    _check_bias(b, w, x)
    y = kernels.conv2d_int8(
        np.ascontiguousarray(x.values), x.params.zero_point, np.ascontiguousarray(w.values),
        None if b is None else b.values, requant_multiplier(w.params, x.params, out_params),
        out_params.zero_point, qmin, qmax, tuple(stride), tuple(padding), groups)
    return QuantizedTensor(y, out_params)


def qdepthwise_forward(x: QuantizedTensor, w: QuantizedTensor, b: QuantizedTensor | None,
                       out_params: QuantParams, stride=(1, 1), padding=(0, 0),
                       qmin: int = ACT_QMIN, qmax: int = ACT_QMAX) -> QuantizedTensor:
    return qconv2d_forward(x, w, b, out_params, stride, padding, x.values.shape[1], qmin, qmax)


def qlinear_forward(x: QuantizedTensor, w: QuantizedTensor, b: QuantizedTensor | None,
                    out_params: QuantParams, qmin: int = ACT_QMIN,
                    qmax: int = ACT_QMAX) -> QuantizedTensor:
    """``cast2int8(s * (W x + b))`` for x of shape (N, Cin) and W of (Cout, Cin)."""
    xv, wv = x.values, w.values
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ValueError(f"qlinear shape mismatch: x {xv.shape}, W {wv.shape}")
    x4 = QuantizedTensor(xv.reshape(*xv.shape, 1, 1), x.params)
    w4 = QuantizedTensor(wv.reshape(*wv.shape, 1, 1), w.params)
    y = qconv2d_forward(x4, w4, b, out_params, qmin=qmin, qmax=qmax)
    return QuantizedTensor(y.values.reshape(xv.shape[0], wv.shape[0]), out_params)


def requantize_grad(g: np.ndarray, qmax: int = WEIGHT_QMAX) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8 encoding of a float gradient: (values, scale)."""
    g = np.asarray(g, dtype=np.float64)
    amax = float(np.abs(g).max()) if g.size else 0.0
    if amax == 0.0 or not np.isfinite(amax):
        if not np.isfinite(amax):
            raise FloatingPointError("non-finite gradient")
        return np.zeros(g.shape, dtype=np.int8), 1.0
    scale = amax / qmax
    return np.clip(np.rint(g / scale), -qmax, qmax).astype(np.int8), scale


# ---------------------------------------------------------------- container

_MAGIC = b"TTQT"
_VERSION = 1


def save_tensors(path, tensors: Mapping[str, object], meta: Mapping | None = None):
    """Write named tensors to a little-endian container with a JSON header.

    Layout: magic ``TTQT``, u32 header length, UTF-8 JSON header, payload.
    Values may be ``QuantizedTensor`` or plain numpy arrays.
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        if isinstance(t, QuantizedTensor):
            arr, extra = t.values, {"bit_width": t.bit_width, "params": t.params.to_json()}
        else:
            arr, extra = np.asarray(t), {}
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
                        **extra})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": _VERSION, "meta": dict(meta or {}), "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def load_tensors(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_tensors`; returns ``(tensors, meta)``."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode())
    base = 8 + hlen
    out = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))
        arr = arr.reshape(e["shape"])
        if "params" in e:
            out[e["name"]] = QuantizedTensor(arr, QuantParams.from_json(e["params"]),
                                             e["bit_width"])
        else:
            out[e["name"]] = arr
    return out, header["meta"]


__all__ = [
    "PER_TENSOR", "PER_CHANNEL", "QuantParams", "QuantizedTensor", "GradTensor",
    "quantize", "quantize_with", "dequantize", "cast2int8", "quantize_bias",
    "affine_params", "qconv2d_forward", "qdepthwise_forward", "qlinear_forward",
    "requantize_grad", "save_tensors", "load_tensors",
]
