"""Lifetime analysis, schedules, peak-memory simulation and the analytic memory model."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .graph.autodiff import saved_input_activations
from .graph.ir import (ELEMENTWISE_KINDS, FLASH, FORWARD, GRADIENT, MASK, UPDATED, Graph,
                       OpKind as K)
from .sparse import UpdateScheme, n_selected

SAVED, GRADS, WEIGHTS, WORKSPACE = "saved-activations", "gradients", "updated-weights", "workspace"
CATEGORIES = (SAVED, GRADS, WEIGHTS, WORKSPACE)

# backward kernels that requantize their upstream gradient into an int8 scratch buffer
_REQUANT_KINDS = (K.CONV_INPUT_GRAD, K.CONV_WEIGHT_GRAD, K.LINEAR_INPUT_GRAD,
                  K.LINEAR_WEIGHT_GRAD)


class ScheduleError(ValueError):
    pass


@dataclass
class Schedule:
    order: list[int]
    inplace: dict[int, int] = field(default_factory=dict)  # GradDescent node -> param tensor
    fusion_groups: list[list[int]] = field(default_factory=list)
    name: str = ""

    def fused_tensors(self, g: Graph) -> set[int]:
        """Intermediates that never materialize because producer and consumer are fused."""
        out = set()
        nodes = g.node_map()
        for group in self.fusion_groups:
            for a, b in zip(group, group[1:]):
                out.update(set(nodes[a].outputs) & set(nodes[b].inputs))
        return out

    def to_json(self) -> dict:
        return {"name": self.name, "order": self.order,
                "inplace": [[n, t] for n, t in sorted(self.inplace.items())],
                "fusion_groups": self.fusion_groups}


@dataclass
class TensorLifetime:
    tensor: int
    first_def: int
    last_use: int
    bytes: int
    category: str
    name: str = ""


@dataclass
class MemoryProfile:
    peak_bytes: int
    curve: list[tuple[int, int]]
    breakdown: list[dict[str, int]]
    arena_bytes: int
    lifetimes: list[TensorLifetime]
    schedule: str = ""

    @property
    def peak_step(self) -> int:
        return max(self.curve, key=lambda sc: (sc[1], -sc[0]))[0] if self.curve else 0

    def summary(self) -> dict:
        at = self.breakdown[self.peak_step] if self.breakdown else {}
        return {"schedule": self.schedule, "peak_bytes": self.peak_bytes,
                "arena_bytes": self.arena_bytes, "peak_step": self.peak_step,
                "breakdown_at_peak": at}


# ------------------------------------------------------------------ schedules

def _param_readers(g: Graph) -> dict[int, list[int]]:
    readers: dict[int, list[int]] = {}
    for n in g.nodes:
        if n.op == K.GRAD_DESCENT:
            continue
        for t in n.inputs:
            if t in g.tensors and g.tensors[t].storage == UPDATED:
                readers.setdefault(t, []).append(n.id)
    return readers


def _inplace(g: Graph) -> dict[int, int]:
    return {n.id: n.inputs[0] for n in g.nodes if n.op == K.GRAD_DESCENT}


def _fusion_groups(g: Graph, order: list[int]) -> list[list[int]]:
    """Adjacent producer/consumer pairs with a single-consumer intermediate where both
    ops are element-wise, or an element-wise producer feeds a GradDescent."""
    nodes = g.node_map()
    cons = g.consumers()
    groups: list[list[int]] = []
    for a, b in zip(order, order[1:]):
        pa, pb = nodes[a], nodes[b]
        if pa.phase == FORWARD or pb.phase == FORWARD:
            continue
        shared = set(pa.outputs) & set(pb.inputs)
        if not shared or any(len(cons.get(t, [])) != 1 for t in shared):
            continue
        if pa.op in ELEMENTWISE_KINDS and (pb.op in ELEMENTWISE_KINDS or pb.op == K.GRAD_DESCENT):
            if groups and groups[-1][-1] == a:
                groups[-1].append(b)
            else:
                groups.append([a, b])
    return groups


def naive_schedule(g: Graph) -> Schedule:
    """Graph order with every GradDescent deferred to the end (all gradients, then updates)."""
    rest = [n.id for n in g.nodes if n.op != K.GRAD_DESCENT]
    gd = [n.id for n in g.nodes if n.op == K.GRAD_DESCENT]
    return Schedule(rest + gd, _inplace(g), [], "naive")


def reorder(g: Graph, fuse: bool = True) -> Schedule:
    """Place each GradDescent right after its gradient is produced (and after every
    other reader of its parameter), so gradient buffers die immediately."""
    prod = g.producers()
    readers = _param_readers(g)
    pending = [n for n in g.nodes if n.op == K.GRAD_DESCENT]
    order: list[int] = []
    done: set[int] = set()

    def flush():
        progressed = True
        while progressed:
            progressed = False
            for n in list(pending):
                grad_ready = prod[n.inputs[1]].id in done
                readers_done = all(r in done for r in readers.get(n.inputs[0], []))
                if grad_ready and readers_done:
                    order.append(n.id)
                    done.add(n.id)
                    pending.remove(n)
                    progressed = True

    for n in g.nodes:
        if n.op == K.GRAD_DESCENT:
            continue
        order.append(n.id)
        done.add(n.id)
        flush()
    if pending:
        raise ScheduleError("GradDescent nodes could not be placed")
    groups = _fusion_groups(g, order) if fuse else []
    return Schedule(order, _inplace(g), groups, "reordered")


def check_schedule(g: Graph, sched: Schedule):
    nodes = g.node_map()
    if sorted(sched.order) != sorted(nodes):
        raise ScheduleError("schedule must contain every node exactly once")
    pos = {nid: i for i, nid in enumerate(sched.order)}
    prod = g.producers()
    readers = _param_readers(g)
    for nid in sched.order:
        n = nodes[nid]
        for t in n.inputs:
            p = prod.get(t)
            if p is not None and pos[p.id] >= pos[nid]:
                raise ScheduleError(f"node {nid} runs before producer {p.id} of tensor {t}")
        if n.op == K.GRAD_DESCENT:
            for r in readers.get(n.inputs[0], []):
                if pos[r] > pos[nid]:
                    raise ScheduleError(f"GradDescent {nid} overwrites tensor {n.inputs[0]} "
                                        f"before reader {r}")


# ------------------------------------------------------------------ lifetimes

def _category(g: Graph, t: int, saved: set[int]) -> str:
    ref = g.tensors[t]
    if ref.storage == UPDATED:
        return WEIGHTS
    if ref.storage == GRADIENT:
        return GRADS
    if ref.storage == MASK or t in saved:
        return SAVED
    return WORKSPACE


def _saved_for_backward(g: Graph) -> set[int]:
    fwd_out = {t for n in g.nodes if n.phase == FORWARD for t in n.outputs} | set(g.inputs)
    out = set()
    for n in g.nodes:
        if n.phase != FORWARD:
            out.update(t for t in n.inputs if t in fwd_out and t not in g.parameters)
    return out


def analyze_lifetimes(g: Graph, sched: Schedule) -> list[TensorLifetime]:
    """[first_def, last_use] per SRAM tensor; flash weights and fused intermediates excluded.

    Graph inputs are defined at step 0, graph outputs and updated weights stay
    live to the last step.
    """
    check_schedule(g, sched)
    nodes = g.node_map()
    end = len(sched.order) - 1
    first: dict[int, int] = {t: 0 for t in g.inputs}
    last: dict[int, int] = {}
    for i, nid in enumerate(sched.order):
        n = nodes[nid]
        for t in n.outputs:
            first.setdefault(t, i)
        for t in n.inputs:
            last[t] = i
    fused = sched.fused_tensors(g)
    saved = _saved_for_backward(g)
    outputs = set(g.outputs.values())
    out = []
    for t in sorted(set(first) | set(last)):
        ref = g.tensors[t]
        if ref.storage == FLASH or t in fused:
            continue
        if ref.storage == UPDATED:
            f, l = 0, end
        else:
            f = first.get(t, 0)
            l = end if t in outputs else max(last.get(t, f), f)
        out.append(TensorLifetime(t, f, l, ref.nbytes, _category(g, t, saved), ref.name))
    return out


def _workspace(g: Graph, sched: Schedule) -> list[int]:
    """int8 scratch for the requantized upstream gradient of each backward kernel."""
    nodes = g.node_map()
    ws = []
    for nid in sched.order:
        n = nodes[nid]
        ref = g.tensors[n.inputs[0]]
        ws.append(ref.numel if n.op in _REQUANT_KINDS and ref.dtype == "int32" else 0)
    return ws


def first_fit(lifetimes: list[TensorLifetime]) -> tuple[int, dict[int, int]]:
    """Greedy first-fit offsets on a linear address space; returns (arena size, offsets)."""
    live: list[tuple[int, int, int]] = []  # (offset, size, last_use)
    offsets: dict[int, int] = {}
    arena = 0
    for lt in sorted(lifetimes, key=lambda x: (x.first_def, -x.bytes, x.tensor)):
        live = [b for b in live if b[2] >= lt.first_def]
        live.sort()
        cursor = 0
        for off, size, _ in live:
            if off - cursor >= lt.bytes:
                break
            cursor = max(cursor, off + size)
        offsets[lt.tensor] = cursor
        live.append((cursor, lt.bytes, lt.last_use))
        arena = max(arena, cursor + lt.bytes)
    return arena, offsets


def simulate_peak(g: Graph, sched: Schedule) -> MemoryProfile:
    lts = analyze_lifetimes(g, sched)
    steps = len(sched.order)
    breakdown = [{c: 0 for c in CATEGORIES} for _ in range(steps)]
    for lt in lts:
        for i in range(lt.first_def, lt.last_use + 1):
            breakdown[i][lt.category] += lt.bytes
    ws = _workspace(g, sched)
    for i, b in enumerate(ws):
        breakdown[i][WORKSPACE] += b
    curve = [(i, sum(b.values())) for i, b in enumerate(breakdown)]
    scratch = [TensorLifetime(-1 - i, i, i, b, WORKSPACE) for i, b in enumerate(ws) if b]
    arena, _ = first_fit(lts + scratch)
    peak = max((c for _, c in curve), default=0)
    return MemoryProfile(peak, curve, breakdown, arena, lts, sched.name)


def live_lower_bound(lifetimes: list[TensorLifetime]) -> int:
    """Largest total size of tensors simultaneously live at one step."""
    if not lifetimes:
        return 0
    end = max(lt.last_use for lt in lifetimes)
    per = [0] * (end + 1)
    for lt in lifetimes:
        for i in range(lt.first_def, lt.last_use + 1):
            per[i] += lt.bytes
    return max(per)


# ------------------------------------------------------------------ analytic model

def analytic_breakdown(g: Graph, s: UpdateScheme) -> dict[str, int]:
    """Extra bytes needed beyond inference for scheme ``s`` on forward graph ``g``.

    Saved input activations of weight-updated layers, int8 copies of updated
    weight channels, int32 copies of backpropagated biases, and fp32 copies of
    the classifier when it is trained. The classifier input is not counted.
    """
    s.validate(g.num_layers)
    acts = {g.layers[i].input for i in s.weight_updates}
    act_bytes = sum(g.tensors[t].nbytes for t in acts)
    w_bytes = 0
    for i, r in s.weight_updates.items():
        w = g.tensors[g.layers[i].weight]
        per_channel = w.numel // w.shape[0]
        w_bytes += n_selected(r, w.shape[0]) * per_channel * 1
    b_bytes = sum(g.tensors[g.layers[i].bias].numel * 4
                  for i in s.layers_backpropagated(g.num_layers))
    cls_bytes = 0
    if s.classifier_trainable and g.classifier is not None:
        cls_bytes = 4 * (g.tensors[g.classifier.weight].numel + g.tensors[g.classifier.bias].numel)
    return {"activations": act_bytes, "weights": w_bytes, "biases": b_bytes,
            "classifier": cls_bytes, "total": act_bytes + w_bytes + b_bytes + cls_bytes}


def analytic_extra_memory(g: Graph, s: UpdateScheme) -> int:
    return analytic_breakdown(g, s)["total"]


def extra_memory_from_graph(compiled: Graph) -> int:
    """Per-tensor recount on a compiled training graph: saved backbone layer inputs
    plus every sram-updated-weight tensor (weight slices, bias copies, classifier)."""
    saved = saved_input_activations(compiled)
    total = sum(compiled.tensors[t].nbytes for t in saved)
    total += sum(compiled.tensors[p].nbytes for p in compiled.parameters
                 if compiled.tensors[p].storage == UPDATED)
    return total


def accumulation_buffer_bytes(compiled: Graph) -> int:
    """Extra gradient-accumulator bytes (one 4-byte buffer per trainable element)."""
    return sum(4 * compiled.tensors[n.inputs[0]].numel for n in compiled.nodes
               if n.op == K.GRAD_DESCENT)


# ------------------------------------------------------------------ export

def profile_csv(p: MemoryProfile, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "bytes", "category"])
    for i, b in enumerate(p.breakdown):
        for c in CATEGORIES:
            w.writerow([i, b[c], c])
    return buf.getvalue()


def lifetimes_csv(p: MemoryProfile, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tensor", "name", "first_def", "last_use", "bytes", "category"])
    for lt in p.lifetimes:
        w.writerow([lt.tensor, lt.name, lt.first_def, lt.last_use, lt.bytes, lt.category])
    return buf.getvalue()


def profile_json(p: MemoryProfile, **extra) -> str:
    return json.dumps({**p.summary(), **extra}, indent=1, sort_keys=True)


__all__ = ["CATEGORIES", "MemoryProfile", "Schedule", "ScheduleError", "TensorLifetime",
           "accumulation_buffer_bytes", "analytic_breakdown", "analytic_extra_memory",
           "analyze_lifetimes", "check_schedule", "extra_memory_from_graph", "first_fit",
           "lifetimes_csv", "live_lower_bound", "naive_schedule", "profile_csv",
           "profile_json", "reorder", "simulate_peak"]
