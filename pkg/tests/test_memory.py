import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import UNIT, micro_graph
from tinytrain.executor import FLOAT, Program
from tinytrain.graph.autodiff import derive_backward
from tinytrain.graph.builder import GraphBuilder, build_backbone, toy
from tinytrain.graph.ir import Layer, OpKind as K
from tinytrain.memory import (CATEGORIES, Schedule, ScheduleError, TensorLifetime,
                              analytic_breakdown, analytic_extra_memory, analyze_lifetimes,
                              check_schedule, extra_memory_from_graph, first_fit, lifetimes_csv,
                              live_lower_bound, naive_schedule, profile_csv, reorder,
                              simulate_peak)
from tinytrain.sparse import RATIOS, UpdateScheme, compile_scheme, n_selected
from tinytrain.trainer import Optimizer, OptimizerConfig


def _lt(t, a, b, n):
    return TensorLifetime(t, a, b, n, "workspace")


def test_first_fit_trivial_cases():
    assert first_fit([_lt(0, 0, 1, 100), _lt(1, 2, 3, 100)])[0] == 100
    assert first_fit([_lt(0, 0, 3, 100), _lt(1, 0, 3, 100)])[0] == 200
    assert first_fit([])[0] == 0


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 8), st.integers(1, 64)),
                min_size=1, max_size=30))
def test_first_fit_bounds_and_no_overlap(spec):
    lts = [_lt(i, a, a + d, n) for i, (a, d, n) in enumerate(spec)]
    arena, off = first_fit(lts)
    assert live_lower_bound(lts) <= arena <= sum(lt.bytes for lt in lts)
    for x in lts:
        for y in lts:
            if x.tensor < y.tensor and x.first_def <= y.last_use and y.first_def <= x.last_use:
                assert off[x.tensor] + x.bytes <= off[y.tensor] or \
                    off[y.tensor] + y.bytes <= off[x.tensor]


def _chain(n, c=8, hw=4):
    """n equal 1x1 conv layers, only the weights trainable: every weight gradient is G bytes."""
    b = GraphBuilder()
    g = b.g
    x = b.input("x", (1, c, hw, hw), "int8", UNIT)
    label = b.input("label", (1,), "int32")
    for i in range(n):
        w = b.param(f"l{i}.weight", (c, c, 1, 1), "int8", UNIT)
        bias = b.param(f"l{i}.bias", (c,), "int32", UNIT)
        y = b.op1(K.QCONV2D, [x, w, bias], {"stride": (1, 1), "padding": (0, 0), "groups": 1,
                                             "act": "none"}, name=f"l{i}", qparams=UNIT)
        g.layers.append(Layer(i, f"l{i}", "conv", g.nodes[-1].id, w, bias, x, y))
        x = y
    flat = b.op1(K.FLATTEN, [b.op1(K.AVGPOOL, [x], qparams=UNIT)], qparams=UNIT)
    feat = b.op1(K.DEQUANTIZE, [flat])
    cw = b.param("classifier.weight", (2, c), "fp32")
    cb = b.param("classifier.bias", (2,), "fp32")
    logits = b.op1(K.FLOAT_LINEAR, [feat, cw, cb])
    g.classifier = Layer(-1, "classifier", "classifier", g.nodes[-1].id, cw, cb, feat, logits)
    g.outputs = {"logits": logits, "loss": b.op1(K.SOFTMAX_CE, [logits, label])}
    g.trainable = {layer.weight: None for layer in g.layers}
    return derive_backward(g)


def _max_live_weight_grads(g, sched):
    wgrads = {n.outputs[0] for n in g.nodes_of(K.CONV_WEIGHT_GRAD)}
    lts = [lt for lt in analyze_lifetimes(g, sched) if lt.tensor in wgrads]
    return live_lower_bound(lts), lts[0].bytes


@pytest.mark.parametrize("n", [2, 3, 5])
def test_equal_gradients_naive_n_reordered_one(n):
    g = _chain(n)
    naive, G = _max_live_weight_grads(g, naive_schedule(g))
    reord, _ = _max_live_weight_grads(g, reorder(g))
    assert naive == n * G
    assert reord == G


def test_single_trainable_layer_equal_peaks():
    g = _chain(1)
    assert simulate_peak(g, naive_schedule(g)).peak_bytes == \
        simulate_peak(g, reorder(g, fuse=False)).peak_bytes


def test_lifetimes_cover_producer_and_consumers():
    g = _chain(2)
    sched = naive_schedule(g)
    pos = {nid: i for i, nid in enumerate(sched.order)}
    nodes = g.node_map()
    lts = {lt.tensor: lt for lt in analyze_lifetimes(g, sched)}
    for nid in sched.order:
        for t in nodes[nid].inputs + nodes[nid].outputs:
            if t in lts:
                assert lts[t].first_def <= pos[nid] <= lts[t].last_use
    # brute-force scan: the saved input of layer 1 lives until its weight-gradient node
    wg = [n for n in g.nodes_of(K.CONV_WEIGHT_GRAD) if g.layers[1].input in n.inputs][0]
    assert lts[g.layers[1].input].last_use == max(
        pos[n.id] for n in g.nodes if g.layers[1].input in n.inputs) == pos[wg.id]
    assert all(lt.first_def <= lt.last_use and lt.bytes > 0 for lt in lts.values())


def test_check_schedule_rejects_bad_orders():
    g = _chain(2)
    order = naive_schedule(g).order
    with pytest.raises(ScheduleError, match="exactly once"):
        check_schedule(g, Schedule(order[:-1]))
    with pytest.raises(ScheduleError, match="before producer"):
        check_schedule(g, Schedule([order[1], order[0]] + order[2:]))
    # the input-gradient of layer 1 reads its weight; run it after that weight's update
    w1 = g.layers[1].weight
    dgrad = next(n.id for n in g.nodes_of(K.CONV_INPUT_GRAD) if w1 in n.inputs)
    gd = next(n.id for n in g.nodes_of(K.GRAD_DESCENT) if n.inputs[0] == w1)
    wgrad = g.producers()[g.node(gd).inputs[1]].id
    bad = [i for i in order if i not in (dgrad, gd)]
    at = bad.index(wgrad) + 1
    bad[at:at] = [gd, dgrad]
    with pytest.raises(ScheduleError, match="overwrites"):
        check_schedule(g, Schedule(bad))


@settings(max_examples=30)
@given(st.integers(0, 100_000))
def test_reorder_never_worse_and_curve_conserves(seed):
    g = derive_backward(micro_graph(seed)[0])
    naive = simulate_peak(g, naive_schedule(g))
    re = reorder(g)
    check_schedule(g, re)
    prof = simulate_peak(g, re)
    assert prof.peak_bytes <= naive.peak_bytes
    for p in (naive, prof):
        assert p.peak_bytes == max(c for _, c in p.curve)
        for (_, total), b in zip(p.curve, p.breakdown):
            assert total == sum(b.values())
        assert p.arena_bytes >= live_lower_bound(p.lifetimes)


@pytest.mark.parametrize("seed", range(4))
def test_schedule_does_not_change_results(seed):
    g, params, (x, label) = micro_graph(seed)
    d = derive_backward(g)
    finals = []
    for sched in (naive_schedule(d), reorder(d)):
        p = {k: v.astype(np.float64) for k, v in params.items()}
        prog = Program(d, sched, FLOAT, np.float64)
        opt = Optimizer(d, OptimizerConfig(0.1), FLOAT)
        for _ in range(2):
            prog.run(p, x, label, optimizer=opt)
        finals.append(p)
    for k in params:
        np.testing.assert_array_equal(finals[0][k], finals[1][k])


def test_analytic_hand_counts():
    g = build_backbone(toy(blocks=2))
    L = g.num_layers
    cls = 4 * (g.tensors[g.classifier.weight].numel + g.tensors[g.classifier.bias].numel)
    assert analytic_extra_memory(g, UpdateScheme.classifier_only()) == cls
    assert analytic_extra_memory(g, UpdateScheme.frozen()) == 0
    k = 3
    biases = sum(4 * g.tensors[g.layers[i].bias].numel for i in range(L - k, L))
    bd = analytic_breakdown(g, UpdateScheme(k, {}, False))
    assert bd["activations"] == 0 and bd["total"] == biases
    i = L - 1
    w = g.tensors[g.layers[i].weight]
    x = g.tensors[g.layers[i].input]
    expected = x.numel + (w.shape[0] // 2) * (w.numel // w.shape[0]) + 4 * w.shape[0]
    assert analytic_extra_memory(g, UpdateScheme(1, {i: 0.5}, False)) == expected


@st.composite
def toy_schemes(draw):
    L = 7
    k = draw(st.integers(0, L))
    layers = draw(st.sets(st.integers(L - k, L - 1))) if k else set()
    return UpdateScheme(k, {i: draw(st.sampled_from(RATIOS)) for i in layers}, draw(st.booleans()))


_TOY = build_backbone(toy(blocks=2))
_W = {t.name: np.arange(t.numel).reshape(t.shape) % 7 for t in _TOY.tensors.values()
      if t.id in _TOY.parameters}


@settings(max_examples=40)
@given(toy_schemes())
def test_analytic_matches_graph_recount(s):
    assert analytic_extra_memory(_TOY, s) == extra_memory_from_graph(compile_scheme(_TOY, s, _W))


@given(toy_schemes(), st.data())
def test_analytic_monotone_in_ratio_and_depth(s, data):
    base = analytic_extra_memory(_TOY, s)
    if s.bias_depth < _TOY.num_layers:
        deeper = UpdateScheme(s.bias_depth + 1, s.weight_updates, s.classifier_trainable)
        assert analytic_extra_memory(_TOY, deeper) > base
    if s.weight_updates:
        i = data.draw(st.sampled_from(sorted(s.weight_updates)))
        r = s.weight_updates[i]
        if r < 1.0:
            up = dict(s.weight_updates, **{})
            up[i] = RATIOS[RATIOS.index(r) + 1]
            c = _TOY.tensors[_TOY.layers[i].weight].shape[0]
            bigger = analytic_extra_memory(_TOY, UpdateScheme(s.bias_depth, up,
                                                              s.classifier_trainable))
            assert bigger >= base
            assert (bigger > base) == (n_selected(up[i], c) > n_selected(r, c))


def test_csv_exports_sum_to_curve():
    g = _chain(3)
    p = simulate_peak(g, reorder(g))
    rows = list(csv.DictReader(io.StringIO(profile_csv(p))))
    assert len(rows) == len(p.curve) * len(CATEGORIES)
    per_step: dict[int, int] = {}
    for r in rows:
        per_step[int(r["step"])] = per_step.get(int(r["step"]), 0) + int(r["bytes"])
    assert [per_step[i] for i in range(len(p.curve))] == [c for _, c in p.curve]
    text = profile_csv(p, "schema_version=1")
    assert text.startswith("# schema_version=1\nstep,bytes,category\n")
    lrows = list(csv.DictReader(io.StringIO(lifetimes_csv(p))))
    assert len(lrows) == len(p.lifetimes)
