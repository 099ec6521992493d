import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fed2sim.architecture import instantiate
from fed2sim.data import make_probe, synth_gaussian
from fed2sim.features import encode, preference_matrices
from fed2sim.nn.model import forward
from fed2sim.permutation import (ConflictReport, PermutationError, PermutationMatrix, conflict_report,
                                 permutable_layers, permute_layer, repermute_pair, scramble,
                                 scramble_clients)

from helpers import adapted_cnn, mlp, random_model, tiny_cnn


def probe_for(spec, seed=0):
    return make_probe(synth_gaussian(spec.class_count, 10, spec.input_shape, 1.0, seed), 2, 4, seed)


def max_dev(a, b, x):
    return float(np.max(np.abs(forward(a, x)[0] - forward(b, x)[0])))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 30), seed=st.integers(0, 2 ** 32 - 1))
def test_compose_with_transpose_is_identity(n, seed):
    p = PermutationMatrix.random(n, seed)
    assert p.compose(p.transpose()) == PermutationMatrix.identity(n)
    assert p.transpose().compose(p) == PermutationMatrix.identity(n)
    M = p.matrix()
    assert np.array_equal(M @ M.T, np.eye(n))


def test_non_bijection_rejected():
    with pytest.raises(PermutationError):
        PermutationMatrix((0, 0, 1))


def test_identity_repermute_is_bitwise_noop():
    m = random_model(mlp(), 0)
    a, b = m.layer_params()[0], m.layer_params()[1]
    nxt, this = repermute_pair(b, a, PermutationMatrix.identity(a.weights[0].shape[0]))
    assert np.array_equal(nxt.weights[0], b.weights[0]) and np.array_equal(this.weights[0], a.weights[0])
    assert np.array_equal(this.bias[0], a.bias[0])


def test_random_pair_permutation_preserves_function():
    spec = mlp((6, 12, 9), C=4)
    m = random_model(spec, 3)
    x = np.random.default_rng(3).normal(size=(100, 6))
    for layer in (0, 1):
        p = permute_layer(m, layer, PermutationMatrix.random(m.neuron_layers()[layer].size, 3))
        assert max_dev(m, p, x) < 1e-10


def test_repermute_then_inverse_restores_bitwise():
    m = random_model(tiny_cnn(), 0)
    p = PermutationMatrix.random(4, 1, blocks=[(0, 2), (2, 4)])
    back = permute_layer(permute_layer(m, 0, p), 0, p.transpose())
    assert all(np.array_equal(a, back.state()[k]) for k, a in m.state().items())


def test_repermute_dimension_mismatch():
    m = random_model(mlp(), 0)
    a, b = m.layer_params()[0], m.layer_params()[1]
    with pytest.raises(PermutationError, match="output channels"):
        repermute_pair(b, a, PermutationMatrix.identity(3))


def test_conv_permutation_with_norm_and_flatten_preserves_function():
    for norm in ("gn", "bn"):
        m = random_model(tiny_cnn(norm), 2)
        x = np.random.default_rng(2).normal(size=(8, 2, 4, 4))
        s = scramble(m, 5)
        assert max_dev(m, s, x) < 1e-10
        assert not all(np.array_equal(a, s.state()[k]) for k, a in m.state().items())


def test_permutation_mixing_norm_groups_rejected():
    m = random_model(tiny_cnn("gn"), 0)   # 4 channels, norm groups {0,1}, {2,3}
    with pytest.raises(PermutationError, match="normalisation groups"):
        permute_layer(m, 0, PermutationMatrix((0, 2, 1, 3)))


def test_grouped_layers_are_not_permutable():
    m = instantiate(adapted_cnn(1, 2), 0)
    assert permutable_layers(m) == []
    assert permutable_layers(instantiate(tiny_cnn(), 0)) == [0, 1, 2]


def test_scramble_identity_is_noop():
    m = random_model(tiny_cnn(), 1)
    s = scramble_clients([m, m], 0, identity=True)
    for c in s:
        assert all(np.array_equal(a, c.state()[k]) for k, a in m.state().items())


def test_scrambled_clients_keep_their_function():
    m = random_model(tiny_cnn(), 4)
    x = np.random.default_rng(4).normal(size=(16, 2, 4, 4))
    for c in scramble_clients([m, m.copy(), m.copy()], 9):
        assert max_dev(m, c, x) < 1e-10


# conflict reports

def test_identical_clients_have_no_conflict():
    m = random_model(tiny_cnn(), 0)
    rep = conflict_report([m, m.copy()], probe_for(tiny_cnn()))
    assert rep.overall == 0.0 and all(v == 0.0 for v in rep.layer_mean)


def test_derangement_conflict_matches_brute_force():
    spec = tiny_cnn()
    m = random_model(spec, 6)
    probe = probe_for(spec, 6)
    n = m.neuron_layers()[2].size
    idx = np.roll(np.arange(n), 1)      # derangement: every neuron moves
    other = permute_layer(m, 2, PermutationMatrix(tuple(idx)))
    rep = conflict_report([m, other], probe)
    enc = encode(preference_matrices(m, probe)[2])
    moved = sum(enc[i] != enc[idx[i]] for i in range(n)) / n
    assert rep.layer_mean[2] == pytest.approx(moved, abs=0)


def test_conflict_bounded_and_order_symmetric(tmp_path):
    spec = tiny_cnn()
    clients = [random_model(spec, s) for s in range(3)]
    probe = probe_for(spec)
    a = conflict_report(clients, probe)
    b = conflict_report(clients[::-1], probe)
    for da, db in zip(a.disagreement, b.disagreement):
        assert np.all((da >= 0) & (da <= 1))
        assert np.array_equal(da, db)
    a.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "layer,neuron,disagreement,layer_mean"
    assert len(lines) == 1 + sum(len(d) for d in a.disagreement)


def test_empty_report_overall_is_zero():
    assert ConflictReport([]).overall == 0.0
