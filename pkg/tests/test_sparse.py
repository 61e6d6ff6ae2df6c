import numpy as np
import pytest
from hypothesis import given, strategies as st

from tinytrain.graph.autodiff import saved_input_activations
from tinytrain.graph.builder import build_backbone, mcunet_5fps_like, toy
from tinytrain.graph.ir import FLASH, UPDATED, OpKind as K
from tinytrain.graph.validate import validate
from tinytrain.sparse import (RATIOS, ChannelMask, SchemeError, UpdateScheme, bind_params,
                              compile_scheme, n_selected, num_grad_descent, select_channels,
                              slice_suboperator, unbind_params)


@st.composite
def schemes(draw, num_layers=7):
    k = draw(st.integers(0, num_layers))
    layers = draw(st.sets(st.integers(num_layers - k, num_layers - 1)) if k else st.just(set()))
    return UpdateScheme(k, {i: draw(st.sampled_from(RATIOS)) for i in sorted(layers)},
                        draw(st.booleans()))


@given(schemes())
def test_scheme_json_roundtrip(s):
    back = UpdateScheme.loads(s.dumps())
    assert back == s and back.key() == s.key()


def test_scheme_validation():
    UpdateScheme(3, {6: 0.5}).validate(7)
    for bad in (UpdateScheme(8), UpdateScheme(2, {3: 1.0}), UpdateScheme(3, {6: 0.3}),
                UpdateScheme(3, {7: 1.0}), UpdateScheme(3, {}, masks={6: [0]})):
        with pytest.raises(SchemeError):
            bad.validate(7)
    with pytest.raises(SchemeError, match="duplicate"):
        UpdateScheme(3, [(6, 1.0), (6, 0.5)])
    with pytest.raises(SchemeError, match="malformed"):
        UpdateScheme.from_json({"weights": []})


@pytest.mark.parametrize("r,c,n", [(0.125, 8, 1), (0.125, 12, 2), (0.25, 10, 2),
                                   (0.5, 5, 2), (0.5, 7, 4), (1.0, 3, 3)])
def test_n_selected_rounds_half_even(r, c, n):
    assert n_selected(r, c) == n


def test_magnitude_selection_and_tie_break():
    w = np.zeros((6, 1, 1, 1))
    w[:, 0, 0, 0] = [1, 3, 3, 2, 3, 0]
    assert select_channels(w, 0.5).selected_channels == (1, 2, 4)
    assert select_channels(w, 0.25).selected_channels == (1, 2)  # rint(1.5) = 2
    assert select_channels(w, 0.5, "inverse-magnitude").selected_channels == (0, 3, 5)
    r1 = select_channels(w, 0.5, "random", seed=3)
    assert r1 == select_channels(w, 0.5, "random", seed=3)
    with pytest.raises(SchemeError, match="rounds to zero"):
        select_channels(np.ones((3, 1)), 0.125)
    with pytest.raises(SchemeError, match="policy"):
        select_channels(w, 0.5, "largest")


def test_channel_mask_validation():
    with pytest.raises(SchemeError):
        ChannelMask(0, ())
    with pytest.raises(SchemeError):
        ChannelMask(0, (2, 1))


def _toy_model(seed=0):
    g = build_backbone(toy(blocks=2))
    rng = np.random.default_rng(seed)
    named = {}
    for pid in g.parameters:
        t = g.tensors[pid]
        named[t.name] = (rng.integers(-127, 128, t.shape).astype(np.int8) if t.dtype == "int8"
                         else rng.standard_normal(t.shape).astype(np.float32) if t.dtype == "fp32"
                         else rng.integers(-100, 100, t.shape).astype(np.int32))
    return g, named


@given(schemes())
def test_compiled_scheme_structure(s):
    g, named = _toy_model()
    c = compile_scheme(g, s, named)
    assert validate(c) == []
    n_cls = 2 if s.classifier_trainable else 0
    assert num_grad_descent(c) == s.bias_depth + len(s.weight_updates) + n_cls
    assert saved_input_activations(c) == {g.layers[i].input for i in s.weight_updates}
    for i, r in s.weight_updates.items():
        layer = c.layers[i]
        if n_selected(r, g.tensors[g.layers[i].weight].shape[0]) < g.tensors[layer.weight].shape[0]:
            ws = layer.weight_slices
            assert c.tensors[ws["trainable"]].storage == UPDATED
            assert c.tensors[ws["frozen"]].storage == FLASH
    frozen = [layer.bias for layer in g.layers[:g.num_layers - s.bias_depth]]
    assert all(c.tensors[p].storage == FLASH for p in frozen)


def test_no_gradient_into_frozen_prefix():
    g, named = _toy_model()
    c = compile_scheme(g, UpdateScheme(2, {}), named)
    first = g.num_layers - 2
    dgrad_layers = {c.layer_of_param(n.inputs[1]).index for n in c.nodes_of(K.CONV_INPUT_GRAD)}
    assert dgrad_layers and min(dgrad_layers) > first  # nothing flows into layer `first`'s input
    assert not c.nodes_of(K.CONV_WEIGHT_GRAD)
    assert len(c.nodes_of(K.BIAS_GRAD)) == 2 + 1  # plus the classifier bias


def test_slice_and_bind_roundtrip():
    g, named = _toy_model(1)
    c = compile_scheme(g, UpdateScheme(3, {g.num_layers - 1: 0.5}), named)
    by_id = bind_params(c, named)
    back = unbind_params(c, by_id)
    assert set(back) == set(named)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])


def test_full_mask_leaves_layer_unsliced_and_double_slice_fails():
    g, named = _toy_model()
    from tinytrain.graph.autodiff import derive_backward
    full = g.copy()
    full.trainable = {p: None for p in full.parameters}
    d = derive_backward(full)
    c = d.tensors[g.layers[-1].weight].shape[0]
    same = slice_suboperator(d, ChannelMask(g.num_layers - 1, tuple(range(c))))
    assert same.layers[-1].weight_slices is None
    once = slice_suboperator(d, ChannelMask(g.num_layers - 1, (0,)))
    with pytest.raises(SchemeError, match="already sliced"):
        slice_suboperator(once, ChannelMask(g.num_layers - 1, (1,)))
    with pytest.raises(SchemeError, match="out of range"):
        slice_suboperator(d, ChannelMask(g.num_layers - 1, (c,)))


def test_partial_scheme_without_weights_needs_masks():
    g = build_backbone(toy(blocks=2))
    with pytest.raises(SchemeError, match="channel mask"):
        compile_scheme(g, UpdateScheme(1, {g.num_layers - 1: 0.5}))
    c = compile_scheme(g, UpdateScheme(1, {g.num_layers - 1: 0.5}, masks={g.num_layers - 1: [0, 2]}))
    assert c.meta["scheme"]["masks"] == {str(g.num_layers - 1): [0, 2]}


def test_mcunet_two_partial_pw1_layers_compile():
    g = build_backbone(mcunet_5fps_like())
    pw1 = [la.index for la in g.layers if la.kind == "pw1"][-2:]
    s = UpdateScheme(g.num_layers - pw1[0], {pw1[0]: 0.125, pw1[1]: 0.25})
    c = compile_scheme(g, s, {g.tensors[p].name: np.ones(g.tensors[p].shape, np.int8)
                              for p in g.parameters})
    assert validate(c) == []
    assert all(c.layers[i].weight_slices is not None for i in pw1)
