"""Model lifecycle: float init, float pretraining, post-training quantization, transfer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, to_float
from .executor import FLOAT, Program
from .graph.builder import BackboneConfig, build_backbone
from .graph.ir import FORWARD, Graph, OpKind as K
from .qtensor import QuantizedTensor, affine_params, dequantize, quantize, quantize_bias
from .sparse import UpdateScheme, bind_params, compile_scheme, unbind_params


@dataclass
class Model:
    """A quantized forward graph plus named parameters (int8 / int32 / fp32)."""

    graph: Graph
    params: dict[str, np.ndarray]

    @property
    def config(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.graph.meta["config"])

    def param_ref(self, name):
        for pid in self.graph.parameters:
            if self.graph.tensors[pid].name == name:
                return self.graph.tensors[pid]
        raise KeyError(name)

    def float_params(self) -> dict[str, np.ndarray]:
        """Real-valued view of every parameter (the float shadow model)."""
        out = {}
        g = self.graph
        for layer in g.layers:
            w = g.tensors[layer.weight]
            x = g.tensors[layer.input]
            out[w.name] = dequantize(QuantizedTensor(self.params[w.name], w.qparams))
            s_b = w.qparams.scales.astype(np.float64) * float(x.qparams.scale)
            out[g.tensors[layer.bias].name] = (self.params[g.tensors[layer.bias].name]
                                               * s_b).astype(np.float32)
        c = g.classifier
        for pid in (c.weight, c.bias):
            name = g.tensors[pid].name
            out[name] = self.params[name].astype(np.float32)
        return out

    def compile(self, scheme: UpdateScheme, policy: str = "magnitude", seed: int = 0) -> Graph:
        return compile_scheme(self.graph, scheme, self.params, policy, seed)

    def bind(self, g: Graph, float_shadow: bool = False) -> dict[int, np.ndarray]:
        return bind_params(g, self.float_params() if float_shadow else self.params)

    def absorb(self, g: Graph, by_id: dict[int, np.ndarray]) -> "Model":
        """New model whose parameters are the trained values of a compiled graph."""
        named = dict(self.params)
        named.update(unbind_params(g, by_id))
        return Model(self.graph, named)


def init_float_params(g: Graph, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal convolutions, small linear-bottleneck projections, zero biases."""
    rng = np.random.default_rng(seed)
    out = {}
    for layer in g.layers:
        w = g.tensors[layer.weight]
        fan_in = int(np.prod(w.shape[1:]))
        gain = 0.5 if layer.kind == "pw2" else 1.0
        out[w.name] = (rng.standard_normal(w.shape) * gain * np.sqrt(2.0 / fan_in)).astype(
            np.float32)
        out[g.tensors[layer.bias].name] = np.zeros(g.tensors[layer.bias].shape, np.float32)
    c = g.classifier
    wc = g.tensors[c.weight]
    out[wc.name] = (rng.standard_normal(wc.shape) * np.sqrt(1.0 / wc.shape[1])).astype(np.float32)
    out[g.tensors[c.bias].name] = np.zeros(g.tensors[c.bias].shape, np.float32)
    return out


def pretrain_float(g: Graph, params: dict[str, np.ndarray], ds: Dataset, epochs: int = 20,
                   lr: float = 3e-3, batch_size: int = 16, seed: int = 0) -> dict[str, np.ndarray]:
    """Full float training of every parameter (Adam), used to create a source model."""
    from .trainer import OptimizerConfig, TrainState, train

    compiled = compile_scheme(g, UpdateScheme.full(g.num_layers))
    state = TrainState(compiled, bind_params(compiled, params),
                       OptimizerConfig(lr, name="adam", lr_schedule="cosine"), FLOAT, seed=seed)
    train(state, ds, epochs, batch_size=batch_size)
    return unbind_params(compiled, state.params)


def activation_ranges(g: Graph, params: dict[str, np.ndarray], images) -> dict[int, tuple]:
    """Float (min, max) of every int8 forward activation over calibration images."""
    prog = Program(g, mode=FLOAT, float_dtype=np.float64)
    acts = [t for n in g.nodes if n.phase == FORWARD for t in n.outputs
            if g.tensors[t].dtype == "int8"]
    by_id = bind_params(g, params)
    ranges: dict[int, list] = {}
    for i in range(0, len(images), 64):
        res = prog.run(by_id, to_float(images[i:i + 64], np.float64), keep=acts,
                       forward_only=True)
        for t in acts:
            v = res.values[t]
            lo, hi = float(v.min()), float(v.max())
            if t in ranges:
                ranges[t] = [min(ranges[t][0], lo), max(ranges[t][1], hi)]
            else:
                ranges[t] = [lo, hi]
    return {t: tuple(r) for t, r in ranges.items()}


def quantize_model(g: Graph, float_params: dict[str, np.ndarray], calib: np.ndarray) -> Model:
    """Post-training quantization: calibrate activation params, quantize weights/biases."""
    g = g.copy()
    ranges = activation_ranges(g, float_params, calib)
    for n in g.nodes:
        for t in n.outputs:
            if t in ranges:
                g.tensors[t].qparams = affine_params(*ranges[t])
    for n in g.nodes:  # reshapes share their input grid
        if n.op == K.FLATTEN:
            g.tensors[n.outputs[0]].qparams = g.tensors[n.inputs[0]].qparams
    params = {}
    for layer in g.layers:
        w = g.tensors[layer.weight]
        q = quantize(float_params[w.name], w.qparams.granularity, symmetric=True)
        w.qparams = q.params
        params[w.name] = q.values
        bref = g.tensors[layer.bias]
        qb = quantize_bias(float_params[bref.name], q.params, g.tensors[layer.input].qparams)
        bref.qparams = qb.params
        params[bref.name] = qb.values
    c = g.classifier
    for pid in (c.weight, c.bias):
        name = g.tensors[pid].name
        params[name] = np.asarray(float_params[name], dtype=np.float32)
    return Model(g, params)


def with_new_classifier(model: Model, num_classes: int, seed: int = 0) -> Model:
    """Same backbone (graph qparams and values), fresh fp32 classifier for a new task."""
    cfg = model.config
    cfg.num_classes = num_classes
    g = build_backbone(cfg)
    old = {t.name: t for t in model.graph.tensors.values() if t.name}
    for t in g.tensors.values():
        if t.name in old and old[t.name].qparams is not None and t.dtype != "fp32":
            t.qparams = old[t.name].qparams
    rng = np.random.default_rng(seed)
    params = {k: v for k, v in model.params.items() if not k.startswith("classifier.")}
    wc = g.tensors[g.classifier.weight]
    params[wc.name] = (rng.standard_normal(wc.shape) * np.sqrt(1.0 / wc.shape[1])).astype(
        np.float32)
    params[g.tensors[g.classifier.bias].name] = np.zeros(num_classes, np.float32)
    return Model(g, params)


def make_pretrained(cfg: BackboneConfig, source: Dataset, epochs: int = 20, seed: int = 0,
                    lr: float = 3e-3) -> Model:
    """Build, initialize, float-pretrain and quantize a backbone on ``source``."""
    g = build_backbone(cfg)
    fp = pretrain_float(g, init_float_params(g, seed), source, epochs, lr, seed=seed)
    return quantize_model(g, fp, source.images[:256])


@dataclass
class FinetuneResult:
    accuracy: float
    final_loss: float
    model: Model
    logs: list


def finetune(model: Model, scheme: UpdateScheme, train_ds: Dataset, val_ds: Dataset,
             opt_cfg=None, epochs: int = 4, seed: int = 0, mode: str = "int8",
             batch_size: int = 1, policy: str = "magnitude", schedule=None) -> FinetuneResult:
    """Compile ``scheme``, train on ``train_ds`` and report top-1 on ``val_ds``."""
    from .trainer import OptimizerConfig, TrainState, evaluate, train

    g = model.compile(scheme, policy, seed)
    sched = schedule(g) if callable(schedule) else schedule
    state = TrainState(g, model.bind(g, float_shadow=(mode == FLOAT)),
                       opt_cfg or OptimizerConfig(), mode, sched, seed=seed,
                       float_dtype=np.float64 if mode == FLOAT else np.float32)
    logs = train(state, train_ds, epochs, batch_size=batch_size) if epochs > 0 else []
    acc = evaluate(state, val_ds)
    trained = model.absorb(g, state.params) if mode != FLOAT else model
    return FinetuneResult(acc, logs[-1].loss if logs else float("nan"), trained, logs)


def save_model(model: Model, path):
    """Quantized graph (with qparams) plus named parameters in one tensor container."""
    from .graph.serialize import graph_to_dict
    from .qtensor import save_tensors

    save_tensors(path, model.params, {"kind": "model", "graph": graph_to_dict(model.graph)})


def load_model(path) -> Model:
    from .graph.serialize import graph_from_dict
    from .qtensor import load_tensors

    tensors, meta = load_tensors(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: not a model checkpoint")
    return Model(graph_from_dict(meta["graph"]), tensors)


__all__ = ["FinetuneResult", "Model", "activation_ranges", "finetune", "init_float_params",
           "load_model", "make_pretrained", "pretrain_float", "quantize_model", "save_model",
           "with_new_classifier"]
