"""Structural checks on a graph. Violations are returned as data, never raised."""
from __future__ import annotations

from dataclasses import dataclass, field

from .ir import FLASH, Graph, OpKind
from .ops import ShapeError, infer

CYCLE, ORDER, SHAPE, DTYPE, PRODUCER, FLASH_WRITE, DANGLING = (
    "cycle", "order", "shape", "dtype", "producer", "flash-write", "dangling")


@dataclass
class Violation:
    kind: str
    message: str
    tensors: list[int] = field(default_factory=list)
    nodes: list[int] = field(default_factory=list)

    def __str__(self):
        return f"[{self.kind}] {self.message}"


def _cycles(g: Graph) -> list[list[int]]:
    """Strongly connected components of the node dependency graph that form cycles."""
    prod = {}
    for n in g.nodes:
        for t in n.outputs:
            prod.setdefault(t, n.id)
    succ: dict[int, set[int]] = {n.id: set() for n in g.nodes}
    for n in g.nodes:
        for t in n.inputs:
            if t in prod:
                succ[prod[t]].add(n.id)

    index, low, on_stack, stack, out = {}, {}, set(), [], []
    counter = [0]

    def strongconnect(v):  # iterative Tarjan
        work = [(v, iter(sorted(succ[v])))]
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        while work:
            node, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter[0]
                    counter[0] += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(succ[w]))))
                    advanced = True
                    break
                if w in on_stack:
                    low[node] = min(low[node], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                if len(comp) > 1 or node in succ[node]:
                    out.append(sorted(comp))

    for n in g.nodes:
        if n.id not in index:
            strongconnect(n.id)
    return out


def validate(g: Graph) -> list[Violation]:
    report: list[Violation] = []
    known = set(g.tensors)
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        report.append(Violation(PRODUCER, "duplicate node ids", nodes=ids))

    for n in g.nodes:
        missing = [t for t in n.inputs + n.outputs if t not in known]
        if missing:
            report.append(Violation(DANGLING, f"node {n.id} ({n.op}) references unknown "
                                    f"tensors {missing}", missing, [n.id]))
    if report:
        return report

    producers: dict[int, list[int]] = {}
    for n in g.nodes:
        for t in n.outputs:
            producers.setdefault(t, []).append(n.id)
    for t, ps in sorted(producers.items()):
        if len(ps) > 1:
            report.append(Violation(PRODUCER, f"tensor {t} has {len(ps)} producers", [t], ps))
        if g.tensors[t].storage == FLASH:
            report.append(Violation(FLASH_WRITE, f"flash tensor {t} is written by node {ps[0]}",
                                    [t], ps))
    for n in g.nodes_of(OpKind.GRAD_DESCENT):
        p = n.inputs[0]
        if g.tensors[p].storage == FLASH:
            report.append(Violation(FLASH_WRITE, f"GradDescent {n.id} updates flash tensor {p}",
                                    [p], [n.id]))
    sources = set(g.parameters) | set(g.inputs)
    for n in g.nodes:
        for t in n.inputs:
            if t not in sources and t not in producers:
                report.append(Violation(PRODUCER, f"tensor {t} read by node {n.id} has no producer",
                                        [t], [n.id]))

    cycles = _cycles(g)
    for comp in cycles:
        report.append(Violation(CYCLE, f"cycle through nodes {comp}", nodes=comp))
    if not cycles:
        pos = {}
        for i, n in enumerate(g.nodes):
            for t in n.outputs:
                pos.setdefault(t, i)
        for i, n in enumerate(g.nodes):
            late = [t for t in n.inputs if pos.get(t, -1) >= i]
            if late:
                report.append(Violation(ORDER, f"node {n.id} reads {late} before they are produced",
                                        late, [n.id]))

    for n in g.nodes:
        try:
            expected = infer(g, n)
        except ShapeError as e:
            report.append(Violation(SHAPE, f"node {n.id} ({n.op}): {e}", list(e.tensors), [n.id]))
            continue
        except (KeyError, TypeError, IndexError) as e:
            report.append(Violation(SHAPE, f"node {n.id} ({n.op}): bad attributes ({e!r})",
                                    list(n.inputs), [n.id]))
            continue
        if len(expected) != len(n.outputs):
            report.append(Violation(SHAPE, f"node {n.id} ({n.op}) has {len(n.outputs)} outputs, "
                                    f"expected {len(expected)}", list(n.outputs), [n.id]))
            continue
        for t, (shape, dtype) in zip(n.outputs, expected):
            ref = g.tensors[t]
            if ref.shape != tuple(shape):
                report.append(Violation(SHAPE, f"tensor {t} shape {ref.shape}, expected {shape}",
                                        [t], [n.id]))
            if ref.dtype != dtype:
                report.append(Violation(DTYPE, f"tensor {t} dtype {ref.dtype}, expected {dtype}",
                                        [t], [n.id]))
    return report
