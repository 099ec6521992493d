import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fed2sim.architecture import (LayerDesc, ModelSpec, SpecError, adapt, analytic_param_count, assign_classes,
                                  channel_boundaries, instantiate, vgg_like)
from fed2sim.nn.model import backward_logits, forward

from helpers import adapted_cnn, tiny_cnn


def vgg9_toy(C=10) -> ModelSpec:
    """Six convs in three stages plus two fully connected layers."""
    layers = []
    for w in (16, 16, 24):
        layers += [LayerDesc("conv", w, norm="gn"), LayerDesc("conv", w, norm="gn"), LayerDesc("pool")]
    layers += [LayerDesc("flatten"), LayerDesc("dense", 20), LayerDesc("dense", C, activation=None)]
    return ModelSpec((1, 8, 8), tuple(layers), C)


# assign_classes

def test_assign_identity_when_one_class_per_group():
    a = assign_classes(10, 10)
    assert a.mapping == tuple(range(10))


def test_assign_ten_classes_to_three_groups():
    a = assign_classes(10, 3)
    assert [a.classes_of(g) for g in range(3)] == [(0, 1, 2, 3), (4, 5, 6), (7, 8, 9)]


@pytest.mark.parametrize("C,G,size", [(100, 10, 10), (100, 100, 1)])
def test_assign_equal_groups(C, G, size):
    a = assign_classes(C, G)
    assert all(len(a.classes_of(g)) == size for g in range(G))


@settings(max_examples=60, deadline=None)
@given(C=st.integers(1, 40), data=st.data())
def test_assign_balanced_and_contiguous(C, data):
    G = data.draw(st.integers(1, C))
    a = assign_classes(C, G)
    sizes = [len(a.classes_of(g)) for g in range(G)]
    assert sum(sizes) == C
    assert set(sizes) <= {C // G, -(-C // G)}
    assert list(a.mapping) == sorted(a.mapping)
    assert assign_classes(C, G) == a


def test_channel_remainder_goes_to_last_group():
    assert channel_boundaries(10, 3) == [(0, 3), (3, 6), (6, 10)]


# adapt

def test_vgg9_toy_decouples_last_six_layers_into_ten_groups():
    spec = adapt(vgg9_toy(), 2, 10)
    m = instantiate(spec, 0)
    weighted = [p for p in m.layer_params() if p.kind.endswith(("conv", "dense"))]
    assert len(weighted) == 8
    assert all(not p.grouped for p in weighted[:2])
    assert all(len(p.group_boundaries) == 10 for p in weighted[2:])


def test_full_share_depth_returns_undecoupled_spec(caplog):
    base = vgg9_toy()
    with caplog.at_level(logging.WARNING):
        spec = adapt(base, base.total_weighted, 10)
    assert "nothing is decoupled" in caplog.text
    assert not spec.decoupled
    assert spec.layers == base.layers
    assert instantiate(spec, 0).assignment is None


def test_adapt_errors():
    base = tiny_cnn(C=4)
    with pytest.raises(SpecError, match="G=5"):
        adapt(base, 1, 5)             # G > C
    with pytest.raises(SpecError, match="fewer than G"):
        adapt(tiny_cnn(C=10, widths=(4, 8), fc=16), 1, 10)    # 8 channels < 10 groups
    with pytest.raises(SpecError):
        adapt(base, 9, 2)


def test_adapt_idempotent():
    base = vgg9_toy()
    once = adapt(base, 3, 5)
    assert adapt(once, 3, 5) == once


def test_spec_round_trips_through_dict():
    spec = adapted_cnn(1, 2, split=True)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


# instantiate

def test_instantiate_deterministic():
    a, b = instantiate(adapted_cnn(), 5), instantiate(adapted_cnn(), 5)
    assert all(np.array_equal(x, b.state()[k]) for k, x in a.state().items())


def test_single_group_is_dense_everywhere():
    base = tiny_cnn()
    m = instantiate(adapt(base, 1, 1), 0)
    for p in m.layer_params():
        assert p.num_blocks == 1
    assert m.param_count() == analytic_param_count(base)


def test_norm_defaults():
    m = instantiate(tiny_cnn(), 0)
    norms = [p for p in m.layer_params() if p.kind == "group_norm"]
    assert norms and all(np.all(p.weights[0] == 1) and np.all(p.bias[0] == 0) for p in norms)


def test_decoupled_norm_uses_one_group_per_structure_group():
    m = instantiate(adapted_cnn(0, 4), 0)
    gn = [mod for mod in m.modules if mod.kind == "group_norm"]
    assert all(mod.norm_bounds == mod.params.group_boundaries for mod in gn)


def _random_spec(draw):
    C = draw(st.integers(2, 6))
    n_conv = draw(st.integers(0, 2))
    layers = []
    for _ in range(n_conv):
        layers.append(LayerDesc("conv", draw(st.sampled_from([6, 8])), kernel=draw(st.sampled_from([1, 3])),
                                norm=draw(st.sampled_from([None, "gn", "bn"]))))
    layers.append(LayerDesc("flatten"))
    for _ in range(draw(st.integers(0, 2))):
        layers.append(LayerDesc("dense", draw(st.integers(C, 9))))
    layers.append(LayerDesc("dense", C, activation=None))
    base = ModelSpec((2, 2, 2), tuple(layers), C, norm_groups=2,
                     split_transition=draw(st.booleans()))
    D = draw(st.integers(0, base.total_weighted))
    return adapt(base, D, draw(st.integers(1, 2)))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_parameter_count_matches_closed_form(data):
    spec = _random_spec(data.draw)
    assert instantiate(spec, 0).param_count() == analytic_param_count(spec)


# gradient redirection

def _grouped_weight_layers(model):
    return [p for p in model.layer_params() if p.grouped and p.kind.startswith("group_") and
            p.kind in ("group_conv", "group_dense")]


def test_grouped_layers_read_only_their_own_group():
    """Structural reachability: a group's block only reads the same group's block upstream."""
    for spec in (adapted_cnn(0, 4), adapted_cnn(1, 2), adapt(vgg9_toy(), 2, 10)):
        m = instantiate(spec, 0)
        layers = _grouped_weight_layers(m)
        for prev, cur in zip(layers, layers[1:]):
            hw = cur.in_boundaries[-1][1] // prev.group_boundaries[-1][1]
            assert cur.in_boundaries == [(a * hw, e * hw) for a, e in prev.group_boundaries]


@pytest.mark.parametrize("split", [False, True])
def test_class_logit_gradient_stays_in_its_group(split):
    spec = adapted_cnn(1, 2, split=split)
    m = instantiate(spec, 3)
    x = np.random.default_rng(3).normal(size=(4,) + spec.input_shape)
    logits, cache = forward(m, x)
    groups = m.groups()
    for c in range(spec.class_count):
        seed = np.zeros_like(logits)
        seed[:, c] = -1.0   # objective -Z_c
        g = backward_logits(m, cache, seed)
        gc = m.assignment.group_of(c)
        for k, grp in groups.items():
            if grp is not None and grp != gc:
                assert not np.any(g[k]), k
