"""JSON (de)serialization of graphs with stable id ordering."""
from __future__ import annotations

import json

from ..qtensor import QuantParams
from .ir import Graph, Layer, Node, TensorRef

SCHEMA_VERSION = 1
_TUPLE_ATTRS = {"stride", "padding", "kernel", "in_shape", "shape", "perm"}


def _attrs_out(attrs: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(attrs.items())}


def _attrs_in(attrs: dict) -> dict:
    return {k: (tuple(v) if k in _TUPLE_ATTRS and v is not None else v)
            for k, v in attrs.items()}


def _layer_out(layer: Layer | None):
    if layer is None:
        return None
    return {"index": layer.index, "name": layer.name, "kind": layer.kind, "node": layer.node,
            "weight": layer.weight, "bias": layer.bias, "input": layer.input,
            "output": layer.output, "weight_slices": layer.weight_slices}


def _layer_in(d):
    return None if d is None else Layer(**d)


def graph_to_dict(g: Graph) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tensors": [
            {"id": t.id, "shape": list(t.shape), "dtype": t.dtype, "storage": t.storage,
             "name": t.name, "qparams": None if t.qparams is None else t.qparams.to_json()}
            for t in sorted(g.tensors.values(), key=lambda t: t.id)
        ],
        "nodes": [
            {"id": n.id, "op": n.op.value, "inputs": list(n.inputs), "outputs": list(n.outputs),
             "attrs": _attrs_out(n.attrs), "phase": n.phase, "name": n.name}
            for n in g.nodes
        ],
        "inputs": list(g.inputs),
        "parameters": list(g.parameters),
        "trainable": [[pid, ch] for pid, ch in sorted(g.trainable.items())],
        "outputs": dict(sorted(g.outputs.items())),
        "layers": [_layer_out(layer) for layer in g.layers],
        "classifier": _layer_out(g.classifier),
        "meta": g.meta,
    }


def graph_from_dict(d: dict) -> Graph:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported graph schema version {version!r}")
    tensors = {}
    for t in d["tensors"]:
        qp = None if t["qparams"] is None else QuantParams.from_json(t["qparams"])
        tensors[t["id"]] = TensorRef(t["id"], tuple(t["shape"]), t["dtype"], t["storage"],
                                     t["name"], qp)
    nodes = [Node(n["id"], n["op"], list(n["inputs"]), list(n["outputs"]), _attrs_in(n["attrs"]),
                  n["phase"], n["name"]) for n in d["nodes"]]
    return Graph(tensors=tensors, nodes=nodes, inputs=list(d["inputs"]),
                 parameters=list(d["parameters"]),
                 trainable={int(pid): ch for pid, ch in d["trainable"]},
                 outputs=dict(d["outputs"]), layers=[_layer_in(x) for x in d["layers"]],
                 classifier=_layer_in(d["classifier"]), meta=d.get("meta", {}))


def dumps(g: Graph, **extra) -> str:
    return json.dumps({**graph_to_dict(g), **extra}, indent=1, sort_keys=False)


def loads(text: str) -> Graph:
    return graph_from_dict(json.loads(text))


def save_graph(g: Graph, path, **extra):
    with open(path, "w") as f:
        f.write(dumps(g, **extra))


def load_graph(path) -> Graph:
    with open(path) as f:
        return loads(f.read())
