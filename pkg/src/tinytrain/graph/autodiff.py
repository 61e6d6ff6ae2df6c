"""Compile-time differentiation: forward graph -> one static forward+backward graph.

Every derivative is a graph rewrite registered in ``_RULES``; nothing is
recorded at run time. Gradients of int8 tensors are int32 values plus one
float scale (see the executor); fp32 tensors get fp32 gradients.
"""
from __future__ import annotations

from .builder import GraphBuilder
from .ir import (BACKWARD, FORWARD, GRADIENT, MASK, UPDATE, UPDATED, Graph, Node, OpKind as K)


class DifferentiationError(ValueError):
    pass


def requires_grad(g: Graph, trainable) -> set[int]:
    """Tensors that depend on a trainable parameter."""
    need = set(trainable)
    for node in g.nodes:
        if any(t in need for t in node.inputs):
            need.update(node.outputs)
    return need


class _Ctx:
    def __init__(self, g: Graph, need: set[int]):
        self.g = g
        self.b = GraphBuilder(g)
        self.need = need
        self.grads: dict[int, list[int]] = {}
        self.param_grads: dict[int, int] = {}
        self.trainable = set(g.trainable)

    def emit(self, kind, inputs, attrs=None, name="", storage=GRADIENT) -> int:
        return self.b.op1(kind, inputs, attrs, name=name, storage=storage, phase=BACKWARD)

    def push(self, tensor: int, grad: int):
        if tensor in self.need:
            self.grads.setdefault(tensor, []).append(grad)

    def grad_of(self, tensor: int, name: str) -> int | None:
        parts = self.grads.get(tensor)
        if not parts:
            return None
        if len(parts) == 1:
            return parts[0]
        return self.emit(K.SUM, parts, name=f"{name}.gsum")


def _mask(ctx: _Ctx, node: Node, act: str) -> int:
    """Forward-time clip mask of ``node``'s output, placed right after it."""
    g = ctx.g
    y = node.outputs[0]
    mask_node = Node(g.new_node_id(), K.CLIP_MASK, [y], [], {"act": act}, FORWARD,
                     f"{node.name}.mask")
    t = g.add_tensor(g.tensors[y].shape, "bool", MASK, f"{node.name}.mask:0")
    mask_node.outputs = [t.id]
    g.nodes.insert(g.nodes.index(node) + 1, mask_node)
    return t.id


def _param_kind(g: Graph, pid: int) -> str:
    layer = g.layer_of_param(pid)
    if layer is None:
        return "weight" if len(g.tensors[pid].shape) > 1 else "bias"
    return "bias" if pid == layer.bias else "weight"


def _conv_rule(ctx: _Ctx, node: Node, gy: int):
    x, w, b = node.inputs
    a = node.attrs
    act = a.get("act", "none")
    if act != "none":
        gy = ctx.emit(K.MASK_GRAD, [gy, _mask(ctx, node, act)], name=f"{node.name}.maskgrad")
    dw = node.op == K.QDEPTHWISE
    groups = ctx.g.tensors[x].shape[1] if dw else a.get("groups", 1)
    common = {"stride": tuple(a.get("stride", (1, 1))), "padding": tuple(a.get("padding", (0, 0))),
              "groups": groups, "depthwise": dw}
    if x in ctx.need:
        ctx.push(x, ctx.emit(K.CONV_INPUT_GRAD, [gy, w],
                             {**common, "in_shape": ctx.g.tensors[x].shape},
                             name=f"{node.name}.dgrad"))
    if w in ctx.trainable:
        ctx.param_grads[w] = ctx.emit(
            K.CONV_WEIGHT_GRAD, [gy, x],
            {**common, "kernel": tuple(ctx.g.tensors[w].shape[2:]), "channels": None},
            name=f"{node.name}.wgrad")
    if b in ctx.trainable:
        ctx.param_grads[b] = ctx.emit(K.BIAS_GRAD, [gy], name=f"{node.name}.bgrad")


def _linear_rule(ctx: _Ctx, node: Node, gy: int):
    x, w, b = node.inputs
    act = node.attrs.get("act", "none")
    if act != "none":
        gy = ctx.emit(K.MASK_GRAD, [gy, _mask(ctx, node, act)], name=f"{node.name}.maskgrad")
    if x in ctx.need:
        ctx.push(x, ctx.emit(K.LINEAR_INPUT_GRAD, [gy, w], name=f"{node.name}.dgrad"))
    if w in ctx.trainable:
        ctx.param_grads[w] = ctx.emit(K.LINEAR_WEIGHT_GRAD, [gy, x], {"channels": None},
                                      name=f"{node.name}.wgrad")
    if b in ctx.trainable:
        ctx.param_grads[b] = ctx.emit(K.BIAS_GRAD, [gy], name=f"{node.name}.bgrad")


def _act_rule(ctx: _Ctx, node: Node, gy: int):
    act = "relu" if node.op == K.RELU else "relu6"
    ctx.push(node.inputs[0], ctx.emit(K.MASK_GRAD, [gy, _mask(ctx, node, act)],
                                      name=f"{node.name}.maskgrad"))


def _passthrough(ctx: _Ctx, node: Node, gy: int):
    for t in node.inputs:
        ctx.push(t, gy)


def _avgpool_rule(ctx: _Ctx, node: Node, gy: int):
    x = node.inputs[0]
    ctx.push(x, ctx.emit(K.AVGPOOL_GRAD, [gy], {"in_shape": ctx.g.tensors[x].shape},
                         name=f"{node.name}.grad"))


def _flatten_rule(ctx: _Ctx, node: Node, gy: int):
    x = node.inputs[0]
    ctx.push(x, ctx.emit(K.RESHAPE, [gy], {"shape": ctx.g.tensors[x].shape},
                         name=f"{node.name}.grad"))


def _dequantize_rule(ctx: _Ctx, node: Node, gy: int):
    ctx.push(node.inputs[0], ctx.emit(K.DEQUANTIZE_GRAD, [gy], name=f"{node.name}.grad"))


def _quantize_rule(ctx: _Ctx, node: Node, gy: int):
    ctx.push(node.inputs[0], ctx.emit(K.QUANTIZE_GRAD, [gy], name=f"{node.name}.grad"))


def _slice_rule(ctx: _Ctx, node: Node, gy: int):
    x = node.inputs[0]
    a = node.attrs
    ctx.push(x, ctx.emit(K.SLICE_GRAD, [gy], {"axis": a["axis"], "index": list(a["index"]),
                                              "size": ctx.g.tensors[x].shape[a["axis"]]},
                         name=f"{node.name}.grad"))


def _concat_rule(ctx: _Ctx, node: Node, gy: int):
    axis = node.attrs.get("axis", 1)
    index = node.attrs.get("index")
    start = 0
    for i, t in enumerate(node.inputs):
        size = ctx.g.tensors[t].shape[axis]
        idx = list(index[i]) if index else list(range(start, start + size))
        start += size
        if t in ctx.need:
            ctx.push(t, ctx.emit(K.SLICE, [gy], {"axis": axis, "index": idx},
                                 name=f"{node.name}.grad{i}"))


def _transpose_rule(ctx: _Ctx, node: Node, gy: int):
    perm = node.attrs["perm"]
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    ctx.push(node.inputs[0], ctx.emit(K.TRANSPOSE, [gy], {"perm": tuple(inv)},
                                      name=f"{node.name}.grad"))


_RULES = {
    K.QCONV2D: _conv_rule, K.QDEPTHWISE: _conv_rule,
    K.QLINEAR: _linear_rule, K.FLOAT_LINEAR: _linear_rule,
    K.RELU: _act_rule, K.RELU6: _act_rule,
    K.ADD: _passthrough, K.SUM: _passthrough,
    K.AVGPOOL: _avgpool_rule, K.FLATTEN: _flatten_rule,
    K.DEQUANTIZE: _dequantize_rule, K.QUANTIZE: _quantize_rule,
    K.SLICE: _slice_rule, K.CONCAT: _concat_rule, K.TRANSPOSE: _transpose_rule,
}


def derive_backward(fwd: Graph) -> Graph:
    """Static backward graph with one GradDescent node per trainable parameter.

    ``fwd.trainable`` selects the parameters; trainable parameters move to the
    ``sram-updated-weight`` storage class. The input graph is not modified.
    """
    g = fwd.copy()
    loss = g.loss
    if loss is None:
        raise DifferentiationError("graph has no loss output")
    if g.tensors[loss].shape != ():
        raise DifferentiationError(f"loss must be scalar, got shape {g.tensors[loss].shape}")
    unknown = set(g.trainable) - set(g.parameters)
    if unknown:
        raise DifferentiationError(f"trainable ids are not parameters: {sorted(unknown)}")
    if any(n.phase != FORWARD for n in g.nodes):
        raise DifferentiationError("graph already contains backward nodes")
    if not g.trainable:
        return g

    need = requires_grad(g, g.trainable)
    ctx = _Ctx(g, need)
    prod = g.producers()
    loss_node = prod[loss]
    if loss_node.op != K.SOFTMAX_CE:
        raise DifferentiationError(f"no loss derivative for {loss_node.op}")
    logits, label = loss_node.inputs
    if logits in need:
        ctx.push(logits, ctx.emit(K.SOFTMAX_CE_GRAD, [logits, label], name="loss.grad"))

    forward = [n for n in g.nodes if n is not loss_node]
    for node in reversed(forward):
        if not any(t in need for t in node.inputs) or not any(t in need for t in node.outputs):
            continue
        gy = ctx.grad_of(node.outputs[0], node.name or str(node.id))
        if gy is None:
            continue
        rule = _RULES.get(node.op)
        if rule is None:
            raise DifferentiationError(f"no registered derivative for {node.op}")
        rule(ctx, node, gy)

    for pid in sorted(g.trainable, key=g.parameters.index):
        grad = ctx.param_grads.get(pid)
        if grad is None:
            continue  # parameter does not reach the loss
        layer = g.layer_of_param(pid)
        g.tensors[pid].storage = UPDATED
        ctx.b.op(K.GRAD_DESCENT, [pid, grad],
                 {"param_kind": _param_kind(g, pid),
                  "layer": None if layer is None else layer.index,
                  "channels": g.trainable[pid]},
                 name=f"{g.tensors[pid].name}.update", phase=UPDATE)
    return g


def saved_activations(g: Graph) -> set[int]:
    """Forward activations read by backward-phase nodes (masks excluded)."""
    fwd_out = {t for n in g.nodes if n.phase == FORWARD for t in n.outputs} | set(g.inputs)
    params = set(g.parameters)
    saved = set()
    for n in g.nodes:
        if n.phase == FORWARD:
            continue
        for t in n.inputs:
            if t in fwd_out and t not in params and g.tensors[t].dtype != "bool":
                saved.add(t)
    return saved


def saved_input_activations(g: Graph) -> set[int]:
    """Backbone layer inputs kept alive for backward (the classifier input is not counted)."""
    inputs = {layer.input for layer in g.layers}
    return saved_activations(g) & inputs
