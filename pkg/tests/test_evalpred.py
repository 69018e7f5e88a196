import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdm.evalpred import (PredictionEnvelope, coverage, envelope_width, knn_predict, predict_k, r_squared, smooth,
                          smooth_posterior, state_accuracy, state_usage, write_envelope_csv, write_metrics_csv,
                          write_states_csv)
from gdm.inference import PosteriorParams
from gdm.model import GdmParams, Transition, simulate

from conftest import make_gdm


def onehot(labels, K):
    return np.eye(K)[labels]


def floor(Z, eps=1e-6):
    return eps + (1 - Z.shape[1] * eps) * Z


# -- R^2 -----------------------------------------------------------------------


def test_r_squared_degenerate_cases_exact():
    y = np.random.default_rng(0).standard_normal((50, 3))
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full_like(y, y.mean())) == 0.0


def test_r_squared_is_pooled():
    y = np.array([[0.0, 10.0], [2.0, 14.0]])
    yhat = np.array([[1.0, 10.0], [1.0, 14.0]])
    sst = np.sum((y - y.mean()) ** 2)
    assert r_squared(y, yhat) == pytest.approx(1 - 2.0 / sst)


def test_r_squared_errors():
    with pytest.raises(ValueError):
        r_squared(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        r_squared(np.ones((3, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        r_squared(np.ones((3, 2)), np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(4)))
def test_r_squared_coordinate_permutation_invariant(seed, perm):
    r = np.random.default_rng(seed)
    y, yhat = r.standard_normal((20, 4)), r.standard_normal((20, 4))
    assert r_squared(y[:, perm], yhat[:, perm]) == pytest.approx(r_squared(y, yhat), abs=1e-12)


def noiseless_single_state(seed=0, N=4, D=2):
    r = np.random.default_rng(seed)
    F = np.linalg.qr(r.standard_normal((N, D)))[0].T
    S = np.linalg.pinv(F)[None] @ (0.95 * np.linalg.qr(r.standard_normal((D, D)))[0])
    tr = Transition("linear", W=np.zeros((1, D)), r=np.zeros(1))
    return GdmParams(np.zeros(1), r.standard_normal((1, N)) @ (np.linalg.pinv(F) @ F), F, S,
                     0.1 * r.standard_normal((1, N)) @ (np.linalg.pinv(F) @ F), np.full(N, 1e-300), tr, 0.5)


def test_noiseless_single_state_reconstruction_is_exact():
    g = noiseless_single_state()
    Z, Y = simulate(g, np.random.default_rng(1), 40)
    yhat, r2 = smooth(g, Z, Y)
    assert abs(r2 - 1.0) < 1e-9


def test_smooth_first_row_and_errors():
    g = make_gdm("linear")
    Z, Y = simulate(g, np.random.default_rng(0), 5)
    yhat, _ = smooth(g, Z, Y)
    assert np.allclose(yhat[0], Z[0] @ g.mu)
    with pytest.raises(ValueError):
        smooth(g, Z[:0], Y[:0])
    with pytest.raises(ValueError):
        smooth(g, Z[:3], Y)


def test_smooth_posterior_averages_samples():
    g = make_gdm("linear", seed=1)
    post = PosteriorParams.init("linear", 3, 4, np.random.default_rng(0))
    Z, Y = simulate(g, np.random.default_rng(0), 8)
    yhat, r2, Zs = smooth_posterior(g, post, Y, np.random.default_rng(3), samples=4)
    assert Zs.shape == (4, 8, 3)
    assert np.allclose(yhat, np.mean([smooth(g, z, Y)[0] for z in Zs], axis=0))


# -- prediction envelopes ---------------------------------------------------------


def test_deterministic_limit_collapses_envelope():
    g = noiseless_single_state()
    g.sigma = np.full(g.N, 1e-12)
    _, Y = simulate(g, np.random.default_rng(1), 30)
    post = PosteriorParams.init("linear", 1, g.N, np.random.default_rng(0))
    env = predict_k(g, post, Y, 3, np.random.default_rng(0), M=8)
    assert np.max(env.std) < 1e-9
    assert np.allclose(env.mean[0][:-1], Y[1:], atol=1e-9)


def test_prediction_shapes_targets_and_errors():
    g = make_gdm("recurrent", seed=2)
    post = PosteriorParams.init("birecurrent", 3, 4, np.random.default_rng(0), hidden=3, width=4)
    _, Y = simulate(g, np.random.default_rng(0), 12)
    env = predict_k(g, post, Y, 2, np.random.default_rng(0), M=5)
    assert env.mean.shape == (2, 12, 4) and env.std.shape == (2, 12, 4) and env.draws == 5
    assert np.all(env.std >= 0)
    tgt = env.target(Y, 1)
    assert np.array_equal(tgt[:10], Y[2:]) and np.all(np.isnan(tgt[10:]))
    with pytest.raises(ValueError):
        predict_k(g, post, Y, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        predict_k(g, post, Y, 1, np.random.default_rng(0), M=1)


def test_prediction_is_reproducible_with_seed():
    g = make_gdm("sticky-linear", seed=3)
    post = PosteriorParams.init("sticky-linear", 3, 4, np.random.default_rng(0))
    _, Y = simulate(g, np.random.default_rng(0), 10)
    a = predict_k(g, post, Y, 2, np.random.default_rng(5), M=4)
    b = predict_k(g, post, Y, 2, np.random.default_rng(5), M=4)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)


def test_envelope_std_accumulates_with_horizon():
    g = make_gdm("sticky-linear", seed=4)
    post = PosteriorParams.init("sticky-linear", 3, 4, np.random.default_rng(0))
    _, Y = simulate(g, np.random.default_rng(0), 40)
    per_h = np.mean([predict_k(g, post, Y, 4, np.random.default_rng(s), M=64).std.mean(axis=(1, 2))
                     for s in range(5)], axis=0)
    assert np.all(np.diff(per_h) >= -1e-9)


def test_coverage_and_width_counting():
    mean = np.zeros((1, 4, 1))
    std = np.ones((1, 4, 1))
    env = PredictionEnvelope(1, mean, std, 2)
    Y = np.array([[9.0], [0.5], [3.5], [-2.9]])  # targets are rows 1..3
    assert coverage(env, Y, 0, 3.0) == pytest.approx(2 / 3)
    assert envelope_width(env) == 1.0


# -- state metrics -----------------------------------------------------------------


def test_aligned_one_hot_states_are_perfectly_classified():
    lab = np.random.default_rng(0).integers(1, 5, 300)
    Z = floor(onehot(lab - 1, 4))
    rep = state_accuracy(Z, lab, Z, lab, k=5)
    assert rep.accuracy == 1.0
    assert np.array_equal(np.diag(rep.confusion), np.bincount(lab)[1:])
    assert rep.accuracy == np.trace(rep.confusion) / rep.confusion.sum()


def test_permuted_labels_give_chance_accuracy():
    r = np.random.default_rng(1)
    lab = r.integers(1, 5, 4000)
    Z = r.dirichlet(np.ones(4), 4000)
    acc = state_accuracy(Z[:2000], r.permutation(lab[:2000]), Z[2000:], lab[2000:], k=5).accuracy
    assert abs(acc - 0.25) <= 0.03


def test_accuracy_invariant_to_relabelling_inferred_states():
    r = np.random.default_rng(2)
    lab = r.integers(1, 4, 200)
    Z = r.dirichlet(np.ones(3) * 0.5, 200)
    perm = [2, 0, 1]
    a = state_accuracy(Z[:100], lab[:100], Z[100:], lab[100:]).accuracy
    b = state_accuracy(Z[:100, perm], lab[:100], Z[100:, perm], lab[100:]).accuracy
    assert a == b


def test_knn_against_brute_force_and_tie_rule():
    r = np.random.default_rng(3)
    Ztr, Zte = r.dirichlet(np.ones(3), 60), r.dirichlet(np.ones(3), 25)
    ytr = r.integers(0, 3, 60)
    got = knn_predict(Ztr, ytr, Zte, k=4, chunk=7)
    for z, g in zip(Zte, got):
        nn = np.argsort(np.linalg.norm(Ztr - z, axis=1), kind="stable")[:4]
        counts = np.bincount(ytr[nn], minlength=3)
        assert g == np.flatnonzero(counts == counts.max())[0]
    tie = knn_predict(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([7, 3]), np.array([[0.5, 0.5]]), k=2)
    assert tie[0] == 3


def test_accuracy_input_checks():
    Z = floor(onehot(np.array([0, 1, 0]), 2))
    lab = np.array([1, 2, 1])
    with pytest.raises(ValueError, match="exceeds"):
        state_accuracy(Z, lab, Z, lab, k=4)
    with pytest.raises(ValueError):
        state_accuracy(Z, lab, Z, lab, k=0)
    with pytest.raises(ValueError, match="simplex"):
        state_accuracy(Z * 2, lab, Z, lab, k=1)


def test_state_usage_cases():
    lab = np.repeat([1, 2, 3], 10)
    assert state_usage(floor(onehot(lab - 1, 3)), lab) == {1: [(0, 1.0)], 2: [(1, 1.0)], 3: [(2, 1.0)]}
    uni = state_usage(np.full((30, 5), 0.2), lab)
    assert all(v == [(s, 1.0) for s in range(5)] for v in uni.values())
    Z = np.zeros((10, 3))
    Z[:, 0], Z[:6, 2], Z[6:, 1] = 0.4, 0.6, 0.6
    assert state_usage(Z, np.ones(10, dtype=int)) == {1: [(0, 1.0), (2, 0.6), (1, 0.4)]}
    mix = np.tile([0.4, 0.6], (10, 1))
    assert [s for s, _ in state_usage(mix, np.ones(10, dtype=int))[1]] == [0, 1]
    with pytest.raises(ValueError):
        state_usage(mix, np.ones(10), presence=0.0)


def test_state_usage_orders_by_presence_ratio():
    Z = np.array([[0.6, 0.4, 0.0]] * 6 + [[0.995, 0.0, 0.005]] * 4)
    assert state_usage(Z, np.ones(10, dtype=int)) == {1: [(0, 1.0), (1, 0.6)]}


# -- exports ---------------------------------------------------------------------


def test_writers_emit_headers_and_round_trip_values(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", [("test_r2", 0.125), ("n", 3)])
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows == [["metric", "value"], ["test_r2", "0.125"], ["n", "3"]]
    env = PredictionEnvelope(2, np.arange(12.0).reshape(2, 3, 2) / 7, np.ones((2, 3, 2)), 4)
    write_envelope_csv(tmp_path / "e.csv", env)
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["horizon", "start", "dim", "mean", "std"] and len(rows) == 13
    assert float(rows[4][3]) == env.mean[0, 1, 1]
    write_states_csv(tmp_path / "z.csv", np.array([[0.25, 0.75]]))
    assert open(tmp_path / "z.csv").read() == "t,z_0,z_1\n0,0.25,0.75\n"
