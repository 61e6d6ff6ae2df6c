"""Graph construction: a small builder plus inverted-residual backbones."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..qtensor import PER_CHANNEL, PER_TENSOR, QuantParams
from .ir import ACTIVATION, FLASH, FORWARD, Graph, Layer, Node, OpKind
from .ops import infer

INPUT_SCALE = 1.0 / 128.0  # image pixels p are fed as int8 (p - 128)


def _placeholder_act():
    return QuantParams([1.0], [0], PER_TENSOR)


class GraphBuilder:
    """Appends tensors and nodes to a graph, inferring output shapes eagerly."""

    def __init__(self, graph: Graph | None = None):
        self.g = graph if graph is not None else Graph()

    def input(self, name, shape, dtype, qparams=None) -> int:
        t = self.g.add_tensor(shape, dtype, ACTIVATION, name, qparams)
        self.g.inputs.append(t.id)
        return t.id

    def param(self, name, shape, dtype, qparams=None) -> int:
        t = self.g.add_tensor(shape, dtype, FLASH, name, qparams)
        self.g.parameters.append(t.id)
        return t.id

    def op(self, kind, inputs, attrs=None, name="", qparams=None, storage=ACTIVATION,
           phase=FORWARD) -> list[int]:
        node = Node(self.g.new_node_id(), OpKind(kind), list(inputs), [], dict(attrs or {}),
                    phase, name)
        outs = []
        for i, (shape, dtype) in enumerate(infer(self.g, node)):
            qp = qparams if dtype == "int8" else None
            t = self.g.add_tensor(shape, dtype, storage, f"{name}:{i}" if name else "", qp)
            outs.append(t.id)
        node.outputs = outs
        self.g.nodes.append(node)
        return outs

    def op1(self, *args, **kwargs) -> int:
        return self.op(*args, **kwargs)[0]


@dataclass
class BlockSpec:
    expand: int
    out: int
    stride: int = 1
    kernel: int = 3


@dataclass
class BackboneConfig:
    """Inverted-residual backbone with an fp32 classifier head."""

    resolution: int
    blocks: list[BlockSpec]
    num_classes: int = 10
    in_channels: int = 3
    stem: int | None = None
    head: int | None = None
    batch: int = 1
    weight_granularity: str = PER_CHANNEL
    name: str = "backbone"

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            base = PRESETS[preset](**d.pop("preset_args", {}))
            return cls(**{**asdict(base), **d, "blocks": base.blocks if "blocks" not in d
                          else [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in d["blocks"]]})
        blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in d.pop("blocks")]
        return cls(blocks=blocks, **d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if self.resolution < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ValueError("resolution, classes and input channels must be positive "
                             "(at least 2 classes)")
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        for i, b in enumerate(self.blocks):
            if b.expand < 1 or b.out < 1 or b.stride not in (1, 2) or b.kernel % 2 == 0:
                raise ValueError(f"invalid block spec #{i}: {b}")


def build_backbone(cfg: BackboneConfig | dict) -> Graph:
    """Forward graph: int8 inverted-residual backbone, avgpool, fp32 classifier, loss."""
    if isinstance(cfg, dict):
        cfg = BackboneConfig.from_dict(cfg)
    cfg.validate()
    b = GraphBuilder()
    g = b.g
    g.meta["config"] = cfg.to_dict()
    n, r = cfg.batch, cfg.resolution
    x = b.input("image", (n, cfg.in_channels, r, r), "int8",
                QuantParams([INPUT_SCALE], [0], PER_TENSOR))
    label = b.input("label", (n,), "int32")
    wq = cfg.weight_granularity

    def conv(name, kind, x, cout, k, stride, act, depthwise=False):
        cin = g.tensors[x].shape[1]
        wshape = (cin, 1, k, k) if depthwise else (cout, cin, k, k)
        cout = cin if depthwise else cout
        nch = wshape[0]
        w = b.param(f"{name}.weight", wshape, "int8",
                    QuantParams(np.ones(nch if wq == PER_CHANNEL else 1), np.zeros(
                        nch if wq == PER_CHANNEL else 1, dtype=np.int64), wq))
        bias = b.param(f"{name}.bias", (cout,), "int32",
                       QuantParams(np.ones(nch if wq == PER_CHANNEL else 1), np.zeros(
                           nch if wq == PER_CHANNEL else 1, dtype=np.int64), wq))
        pad = (k // 2, k // 2)
        if depthwise:
            y = b.op1(OpKind.QDEPTHWISE, [x, w, bias],
                      {"stride": (stride, stride), "padding": pad, "act": act},
                      name=name, qparams=_placeholder_act())
        else:
            y = b.op1(OpKind.QCONV2D, [x, w, bias],
                      {"stride": (stride, stride), "padding": pad, "groups": 1, "act": act},
                      name=name, qparams=_placeholder_act())
        g.layers.append(Layer(len(g.layers), name, kind, g.nodes[-1].id, w, bias, x, y))
        return y

    if cfg.stem:
        x = conv("stem", "stem", x, cfg.stem, 3, 2, "relu6")
    for i, blk in enumerate(cfg.blocks):
        cin = g.tensors[x].shape[1]
        h = x
        if blk.expand != 1:
            h = conv(f"blocks.{i}.pw1", "pw1", h, cin * blk.expand, 1, 1, "relu6")
        h = conv(f"blocks.{i}.dw", "dw", h, None, blk.kernel, blk.stride, "relu6", depthwise=True)
        h = conv(f"blocks.{i}.pw2", "pw2", h, blk.out, 1, 1, "none")
        if blk.stride == 1 and cin == blk.out:
            h = b.op1(OpKind.ADD, [x, h], name=f"blocks.{i}.add", qparams=_placeholder_act())
        x = h
    if cfg.head:
        x = conv("head", "conv", x, cfg.head, 1, 1, "relu6")
    pooled = b.op1(OpKind.AVGPOOL, [x], name="pool", qparams=_placeholder_act())
    flat = b.op1(OpKind.FLATTEN, [pooled], name="flatten", qparams=_placeholder_act())
    feat = b.op1(OpKind.DEQUANTIZE, [flat], name="dequantize")
    c = g.tensors[feat].shape[1]
    cw = b.param("classifier.weight", (cfg.num_classes, c), "fp32")
    cb = b.param("classifier.bias", (cfg.num_classes,), "fp32")
    logits = b.op1(OpKind.FLOAT_LINEAR, [feat, cw, cb], name="classifier")
    g.classifier = Layer(-1, "classifier", "classifier", g.nodes[-1].id, cw, cb, feat, logits)
    loss = b.op1(OpKind.SOFTMAX_CE, [logits, label], name="loss")
    g.outputs = {"logits": logits, "loss": loss}
    return g


def sync_flatten_params(g: Graph):
    """Flatten/AvgPool carry the quant params of their input."""
    prod = g.producers()
    for node in g.nodes:
        if node.op in (OpKind.AVGPOOL, OpKind.FLATTEN, OpKind.RELU, OpKind.RELU6):
            src = g.tensors[node.inputs[0]]
            if src.qparams is not None:
                g.tensors[node.outputs[0]].qparams = src.qparams
    return prod


def count_params(g: Graph, include_classifier: bool = False) -> int:
    skip = set()
    if not include_classifier and g.classifier is not None:
        skip = {g.classifier.weight, g.classifier.bias}
    return sum(g.tensors[p].numel for p in g.parameters if p not in skip)


def count_macs(g: Graph, include_classifier: bool = False) -> int:
    total = 0
    for layer in g.layers + ([g.classifier] if include_classifier and g.classifier else []):
        w = g.tensors[layer.weight]
        y = g.tensors[layer.output]
        per_out = int(np.prod(w.shape[1:]))
        total += per_out * int(np.prod(y.shape[1:]))
    return total // max(g.tensors[g.inputs[0]].shape[0], 1)


# ----------------------------------------------------------------- presets

def _make_divisible(v, divisor=8):
    new = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new < 0.9 * v:
        new += divisor
    return new


def mobilenetv2(width: float = 0.35, resolution: int = 128, num_classes: int = 10,
                head: bool = False) -> BackboneConfig:
    """MobileNetV2 stage layout; 17 inverted-residual blocks."""
    setting = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
               (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    blocks = []
    for t, c, reps, s in setting:
        out = _make_divisible(c * width)
        for i in range(reps):
            blocks.append(BlockSpec(t, out, s if i == 0 else 1, 3))
    return BackboneConfig(resolution=resolution, blocks=blocks, num_classes=num_classes,
                          stem=_make_divisible(32 * width), head=1280 if head else None,
                          name=f"mobilenetv2-w{width}")


def mcunet_5fps_like(resolution: int = 128, num_classes: int = 10) -> BackboneConfig:
    """An MCUNet-5FPS-shaped searched layout: 43 conv layers, mixed kernels/expansions."""
    spec = [  # expand, out, stride, kernel
        (1, 8, 1, 3),
        (4, 16, 2, 7), (3, 16, 1, 3),
        (6, 24, 2, 7), (4, 24, 1, 5), (4, 24, 1, 5),
        (5, 40, 2, 7), (5, 40, 1, 5),
        (5, 48, 1, 5), (4, 48, 1, 5),
        (5, 96, 2, 5), (4, 96, 1, 7), (4, 96, 1, 3),
        (6, 112, 1, 7),
    ]
    blocks = [BlockSpec(*s) for s in spec]
    return BackboneConfig(resolution=resolution, blocks=blocks, num_classes=num_classes,
                          stem=16, head=160, name="mcunet-5fps-like")


def toy(blocks: int = 4, width: int = 8, resolution: int = 16, num_classes: int = 10,
        expand: int = 2, stem: int | None = 8, batch: int = 1) -> BackboneConfig:
    """Small backbone for desk-scale training runs."""
    specs = []
    for i in range(blocks):
        stride = 2 if (i % 2 == 1 and i < 4) else 1
        out = width * (1 + (i + 1) // 2)
        specs.append(BlockSpec(expand, out, stride, 3))
    return BackboneConfig(resolution=resolution, blocks=specs, num_classes=num_classes,
                          stem=stem, batch=batch, name=f"toy-{blocks}x{width}")


PRESETS = {"mobilenetv2": mobilenetv2, "mcunet_5fps_like": mcunet_5fps_like, "toy": toy}
