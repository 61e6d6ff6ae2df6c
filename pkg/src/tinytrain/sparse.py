"""Sparse-update schemes and the backward-graph transforms that realize them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph.autodiff import derive_backward
from .graph.ir import ACTIVATION, FLASH, FORWARD, UPDATED, Graph, Node, OpKind as K
from .qtensor import QuantizedTensor, dequantize

RATIOS = (0.125, 0.25, 0.5, 1.0)
POLICIES = ("magnitude", "random", "inverse-magnitude")


class SchemeError(ValueError):
    pass


@dataclass
class UpdateScheme:
    """Bias depth ``k``, weight-updated layers with channel ratios, classifier flag."""

    bias_depth: int = 0
    weight_updates: dict[int, float] = field(default_factory=dict)
    classifier_trainable: bool = True
    masks: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.weight_updates, dict):
            wu = {}
            for i, r in self.weight_updates:
                if int(i) in wu:
                    raise SchemeError(f"duplicate weight-update layer {i}")
                wu[int(i)] = float(r)
            self.weight_updates = wu
        self.weight_updates = {int(i): float(r) for i, r in sorted(self.weight_updates.items())}
        self.masks = {int(i): sorted(int(c) for c in ch) for i, ch in self.masks.items()}

    # ------------------------------------------------------------ factory
    @classmethod
    def full(cls, num_layers: int) -> "UpdateScheme":
        return cls(num_layers, {i: 1.0 for i in range(num_layers)})

    @classmethod
    def bias_only(cls, num_layers: int, k: int | None = None) -> "UpdateScheme":
        return cls(num_layers if k is None else k, {})

    @classmethod
    def classifier_only(cls) -> "UpdateScheme":
        return cls(0, {})

    @classmethod
    def frozen(cls) -> "UpdateScheme":
        return cls(0, {}, classifier_trainable=False)

    # ------------------------------------------------------------ checks
    def validate(self, num_layers: int):
        k = self.bias_depth
        if not 0 <= k <= num_layers:
            raise SchemeError(f"bias depth {k} outside 0..{num_layers}")
        for i, r in self.weight_updates.items():
            if not 0 <= i < num_layers:
                raise SchemeError(f"weight-update layer {i} does not exist ({num_layers} layers)")
            if i < num_layers - k:
                raise SchemeError(f"layer {i} is outside the last {k} backpropagated layers")
            if r not in RATIOS:
                raise SchemeError(f"ratio {r} not in {RATIOS}")
        for i in self.masks:
            if i not in self.weight_updates:
                raise SchemeError(f"channel mask given for layer {i} without a weight update")

    def layers_backpropagated(self, num_layers: int) -> range:
        return range(num_layers - self.bias_depth, num_layers)

    def key(self) -> tuple:
        return (self.bias_depth, tuple(sorted(self.weight_updates.items())),
                self.classifier_trainable)

    # ------------------------------------------------------------ json
    def to_json(self) -> dict:
        return {"k": self.bias_depth,
                "weights": [[i, r] for i, r in self.weight_updates.items()],
                "classifier": self.classifier_trainable,
                "masks": {str(i): ch for i, ch in sorted(self.masks.items())}}

    @classmethod
    def from_json(cls, d: dict) -> "UpdateScheme":
        try:
            return cls(int(d["k"]), [(int(i), float(r)) for i, r in d.get("weights", [])],
                       bool(d.get("classifier", True)),
                       {int(i): ch for i, ch in d.get("masks", {}).items()})
        except (KeyError, TypeError) as e:
            raise SchemeError(f"malformed scheme: {e!r}") from e

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "UpdateScheme":
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class ChannelMask:
    layer_index: int
    selected_channels: tuple

    def __post_init__(self):
        ch = tuple(int(c) for c in self.selected_channels)
        if not ch:
            raise SchemeError("empty channel mask")
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise SchemeError("channel indices must be strictly increasing")
        object.__setattr__(self, "selected_channels", ch)


def n_selected(r: float, c: int) -> int:
    return int(round(r * c))  # round() is half-to-even, like np.rint


def channel_norms(w) -> np.ndarray:
    if isinstance(w, QuantizedTensor):
        w = dequantize(w)
    w = np.asarray(w, dtype=np.float64)
    return np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))


def select_channels(w, r: float, policy: str = "magnitude", seed: int = 0,
                    layer_index: int = -1) -> ChannelMask:
    """Pick ``round(r*C)`` output channels; magnitude ties go to the lower index."""
    if not 0 < r <= 1:
        raise SchemeError(f"ratio must be in (0, 1], got {r}")
    norms = channel_norms(w)
    c = norms.size
    n = n_selected(r, c)
    if n == 0:
        raise SchemeError(f"ratio {r} of {c} channels rounds to zero")
    idx = np.arange(c)
    if policy == "magnitude":
        order = np.lexsort((idx, -norms))
    elif policy == "inverse-magnitude":
        order = np.lexsort((idx, norms))
    elif policy == "random":
        order = np.random.default_rng(seed).permutation(c)
    else:
        raise SchemeError(f"unknown selection policy {policy!r}")
    return ChannelMask(layer_index, tuple(sorted(int(i) for i in order[:n])))


# ------------------------------------------------------------------ graph passes

def scheme_trainable(g: Graph, s: UpdateScheme) -> dict[int, list | None]:
    """Parameter ids (of an unsliced graph) trained under ``s``."""
    s.validate(g.num_layers)
    out: dict[int, list | None] = {}
    for i in s.layers_backpropagated(g.num_layers):
        out[g.layers[i].bias] = None
    for i, r in s.weight_updates.items():
        out[g.layers[i].weight] = s.masks.get(i) if r < 1.0 else None
    if s.classifier_trainable and g.classifier is not None:
        out[g.classifier.weight] = None
        out[g.classifier.bias] = None
    return dict(sorted(out.items()))


def dce(g: Graph) -> Graph:
    """Drop nodes that feed neither a graph output nor a GradDescent (to a fixpoint)."""
    g = g.copy()
    roots = set(g.outputs.values())
    live_tensors = set(roots)
    live_nodes = set()
    for node in reversed(g.nodes):
        if node.op == K.GRAD_DESCENT or any(t in live_tensors for t in node.outputs):
            live_nodes.add(node.id)
            live_tensors.update(node.inputs)
    g.nodes = [n for n in g.nodes if n.id in live_nodes]
    used = set(g.inputs) | set(g.parameters) | roots
    for n in g.nodes:
        used.update(n.inputs)
        used.update(n.outputs)
    layer_refs = {t for layer in g.all_layers() for t in (layer.weight, layer.bias, layer.input,
                                                          layer.output)}
    g.tensors = {i: t for i, t in g.tensors.items() if i in used or i in layer_refs}
    return g


def prune_backward(g: Graph, s: UpdateScheme) -> Graph:
    """Remove update and gradient work for parameters frozen by ``s``, then DCE."""
    if not any(n.op == K.GRAD_DESCENT for n in g.nodes) and g.trainable:
        raise SchemeError("prune_backward expects a derived forward+backward graph")
    keep = scheme_trainable(g, s)
    g = g.copy()
    g.nodes = [n for n in g.nodes
               if not (n.op == K.GRAD_DESCENT and n.inputs[0] not in keep)]
    for pid in g.parameters:
        if pid not in keep and g.tensors[pid].storage == UPDATED:
            g.tensors[pid].storage = FLASH
    g.trainable = {pid: ch for pid, ch in keep.items()
                   if any(n.op == K.GRAD_DESCENT and n.inputs[0] == pid for n in g.nodes)}
    for n in g.nodes:
        if n.op == K.GRAD_DESCENT:
            n.attrs["channels"] = g.trainable.get(n.inputs[0])
    g.meta["scheme"] = s.to_json()
    return dce(g)


def slice_suboperator(g: Graph, mask: ChannelMask) -> Graph:
    """Split a layer's weight into a trainable channel slice and a frozen remainder."""
    layer = g.layers[mask.layer_index]
    w_id = layer.weight
    w = g.tensors[w_id]
    c = w.shape[0]
    sel = list(mask.selected_channels)
    if sel[-1] >= c:
        raise SchemeError(f"channel {sel[-1]} out of range for layer {layer.index} ({c} channels)")
    if layer.weight_slices is not None:
        raise SchemeError(f"layer {layer.index} is already sliced")
    g = g.copy()
    if len(sel) == c:
        return g
    layer = g.layers[mask.layer_index]
    rest = [i for i in range(c) if i not in set(sel)]
    qp = w.qparams
    wt = g.add_tensor((len(sel),) + w.shape[1:], w.dtype, UPDATED, f"{w.name}#t",
                      None if qp is None else qp.take(sel))
    wf = g.add_tensor((len(rest),) + w.shape[1:], w.dtype, FLASH, f"{w.name}#f",
                      None if qp is None else qp.take(rest))
    pos = g.parameters.index(w_id)
    g.parameters[pos:pos + 1] = [wt.id, wf.id]
    g.tensors[w_id].storage = FLASH
    g.trainable.pop(w_id, None)
    g.trainable[wt.id] = sel

    fwd = g.node(layer.node)
    y = g.tensors[fwd.outputs[0]]
    parts = []
    new_nodes = []
    for tag, wid, chans in (("t", wt.id, sel), ("f", wf.id, rest)):
        out = g.add_tensor((y.shape[0], len(chans)) + y.shape[2:], y.dtype, ACTIVATION,
                           f"{fwd.name}#{tag}:0", y.qparams)
        nid = g.new_node_id() + len(new_nodes)
        new_nodes.append(Node(nid, fwd.op, [fwd.inputs[0], wid, fwd.inputs[2]], [out.id],
                              {**fwd.attrs, "channels": list(chans)}, FORWARD, f"{fwd.name}#{tag}"))
        parts.append(out.id)
    cat = Node(g.new_node_id() + len(new_nodes), K.CONCAT, parts, [y.id],
               {"axis": 1, "index": [list(sel), list(rest)]}, FORWARD, f"{fwd.name}.concat")
    new_nodes.append(cat)
    at = g.nodes.index(fwd)
    g.nodes[at:at + 1] = new_nodes
    layer.node = new_nodes[0].id
    layer.weight_slices = {"trainable": wt.id, "frozen": wf.id, "channels": list(sel),
                           "rest": list(rest)}

    for n in g.nodes:
        if n.op in (K.CONV_INPUT_GRAD, K.LINEAR_INPUT_GRAD) and w_id in n.inputs[1:]:
            n.inputs = [n.inputs[0], wt.id, wf.id]
            n.attrs["weight_channels"] = [list(sel), list(rest)]
        elif n.op == K.GRAD_DESCENT and n.inputs[0] == w_id:
            n.inputs[0] = wt.id
            n.attrs["channels"] = list(sel)
            grad_node = g.producers()[n.inputs[1]]
            if grad_node.op not in (K.CONV_WEIGHT_GRAD, K.LINEAR_WEIGHT_GRAD):
                raise SchemeError(f"unexpected weight-gradient producer {grad_node.op}")
            grad_node.attrs["channels"] = list(sel)
            gt = g.tensors[grad_node.outputs[0]]
            gt.shape = (len(sel),) + gt.shape[1:]
    return g


def compile_scheme(fwd: Graph, s: UpdateScheme, weights: dict[str, object] | None = None,
                   policy: str = "magnitude", seed: int = 0) -> Graph:
    """Forward graph -> derived, pruned and sliced training graph for scheme ``s``.

    Channel masks come from ``s.masks`` when present, otherwise they are
    selected from ``weights`` (name -> int8 values or QuantizedTensor).
    """
    s.validate(fwd.num_layers)
    full = fwd.copy()
    full.trainable = {pid: None for pid in full.parameters}
    g = prune_backward(derive_backward(full), s)
    masks = dict(s.masks)
    for i, r in s.weight_updates.items():
        if r >= 1.0 or i in masks:
            continue
        if weights is None:
            raise SchemeError(f"layer {i} needs a channel mask or weights to select from")
        wt = fwd.tensors[fwd.layers[i].weight]
        w = weights[wt.name]
        if not isinstance(w, QuantizedTensor) and wt.qparams is not None:
            w = QuantizedTensor(w, wt.qparams)
        masks[i] = list(select_channels(w, r, policy, seed + i, i).selected_channels)
    for i in sorted(masks):
        g = slice_suboperator(g, ChannelMask(i, tuple(masks[i])))
    g.meta["scheme"] = UpdateScheme(s.bias_depth, s.weight_updates, s.classifier_trainable,
                                    masks).to_json()
    return g


# ------------------------------------------------------------------ parameters

def bind_params(g: Graph, named: dict[str, np.ndarray]) -> dict[int, np.ndarray]:
    """Tensor-id keyed parameter values for ``g``, splitting sliced weights."""
    out = {}
    slices = {}
    for layer in g.all_layers():
        if layer.weight_slices:
            ws = layer.weight_slices
            slices[ws["trainable"]] = ws["channels"]
            slices[ws["frozen"]] = ws["rest"]
    for pid in g.parameters:
        name = g.tensors[pid].name
        if pid in slices:
            base = name.rsplit("#", 1)[0]
            out[pid] = np.array(named[base][np.asarray(slices[pid], dtype=np.intp)])
        else:
            out[pid] = np.array(named[name])
    return out


def unbind_params(g: Graph, by_id: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Inverse of :func:`bind_params`: merge slices back to full named tensors."""
    out = {}
    for layer in g.all_layers():
        ws = layer.weight_slices
        if ws:
            wt, wf = by_id[ws["trainable"]], by_id[ws["frozen"]]
            full = np.empty((len(ws["channels"]) + len(ws["rest"]),) + wt.shape[1:], wt.dtype)
            full[np.asarray(ws["channels"], np.intp)] = wt
            full[np.asarray(ws["rest"], np.intp)] = wf
            out[g.tensors[layer.weight].name] = full
    for pid in g.parameters:
        name = g.tensors[pid].name
        if "#" not in name:
            out[name] = by_id[pid]
    return out


def num_grad_descent(g: Graph) -> int:
    return sum(1 for n in g.nodes if n.op == K.GRAD_DESCENT)


__all__ = ["ChannelMask", "POLICIES", "RATIOS", "SchemeError", "UpdateScheme", "bind_params",
           "channel_norms", "compile_scheme", "dce", "n_selected", "num_grad_descent",
           "prune_backward", "scheme_trainable", "select_channels", "slice_suboperator",
           "unbind_params"]
