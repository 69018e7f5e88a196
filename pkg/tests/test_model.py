import numpy as np
import pytest
from scipy import stats

from gdm import diffmath as dm
from gdm.gumbel import relax, sample_gumbel
from gdm.model import (GdmParams, Transition, init_params, log_joint, observation_mean, observation_means,
                       simulate, transition_logits, transition_step)

from conftest import check_grads, make_gdm, relaxed_logpdf_oracle

VARIANTS = ["linear", "sticky-linear", "recurrent"]


def loop_log_joint(p: GdmParams, Z, Y):
    """Step-by-step reference using scipy densities and the numpy transition."""
    total = relaxed_logpdf_oracle(Z[0], p.prior_logits, p.tau)
    total += stats.norm.logpdf(Y[0], Z[0] @ p.mu, p.sigma).sum()
    h = None
    for t in range(1, len(Y)):
        logits, h = transition_logits(p, Z[t - 1], Y[t - 1], h)
        total += relaxed_logpdf_oracle(Z[t], logits, p.tau)
        mean = sum(Z[t, k] * (p.S[k] @ (p.F @ Y[t - 1]) + p.b[k]) for k in range(p.K))
        total += stats.norm.logpdf(Y[t], mean, p.sigma).sum()
    return total


@pytest.mark.parametrize("variant", VARIANTS)
def test_log_joint_matches_loop_reference(variant):
    p = make_gdm(variant)
    Z, Y = simulate(p, np.random.default_rng(1), 6)
    assert float(log_joint(p, Z, Y)) == pytest.approx(loop_log_joint(p, Z, Y), rel=1e-10)


@pytest.mark.parametrize("variant", VARIANTS)
def test_log_joint_grads(variant):
    p = make_gdm(variant, K=3, D=2, N=4, seed=2)
    Z, Y = simulate(p, np.random.default_rng(3), 5)

    def f(a):
        return log_joint(p.with_arrays(a), Z, Y)

    check_grads(f, p.arrays())


def test_observation_means_agree_with_single_step():
    p = make_gdm("linear")
    Z, Y = simulate(p, np.random.default_rng(4), 7)
    M = observation_means(p, Z, Y)
    assert np.allclose(M[0], observation_mean(p, Z[0]))
    assert np.allclose(M[1:], observation_mean(p, Z[1:], Y[:-1]), atol=1e-13)


def test_single_observation_series():
    p = make_gdm("sticky-linear")
    Z, Y = simulate(p, np.random.default_rng(0), 1)
    assert float(log_joint(p, Z, Y)) == pytest.approx(loop_log_joint(p, Z, Y), rel=1e-10)


def test_simulate_consumes_stream_k_then_n_per_step():
    p = make_gdm("linear", K=3, N=4)
    Z, Y = simulate(p, np.random.default_rng(9), 3)
    rng = np.random.default_rng(9)
    z0 = relax(p.prior_logits + sample_gumbel(rng, 3), p.tau)
    y0 = z0 @ p.mu + p.sigma * rng.standard_normal(4)
    z1 = relax(transition_logits(p, z0, y0)[0] + sample_gumbel(rng, 3), p.tau)
    assert np.allclose(Z[:2], [z0, z1]) and np.allclose(Y[0], y0)


def test_sticky_transition_mixes_previous_state():
    tr = Transition("sticky-linear", W=np.ones((2, 1)), r=np.array([0.0, 1.0]), gamma=0.25)
    logits, _ = transition_step(tr, np.array([0.9, 0.1]), np.array([2.0]))
    assert np.allclose(logits, 0.75 * np.array([2.0, 3.0]) + 0.25 * np.array([0.9, 0.1]))


def test_arrays_round_trip_and_gamma_logit():
    p = make_gdm("sticky-linear")
    arr = p.arrays()
    assert arr["transition.gamma_logit"] == pytest.approx(np.log(0.4 / 0.6))
    q = p.with_arrays(arr)
    assert float(dm.value(q.transition.gamma)) == pytest.approx(0.4)
    assert np.allclose(dm.value(q.sigma), p.sigma)
    back = GdmParams.from_natural(p.natural(), "sticky-linear", p.tau)
    assert np.array_equal(back.S, p.S)


@pytest.mark.parametrize("variant", VARIANTS)
def test_init_params_shapes(variant):
    Y = np.random.default_rng(0).standard_normal((50, 5))
    p = init_params([Y, Y[:20]], 3, 2, variant, rng=np.random.default_rng(1))
    assert (p.K, p.D, p.N) == (3, 2, 5)
    assert np.allclose(p.F @ p.F.T, np.eye(2), atol=1e-12)


def test_init_rejects_latent_larger_than_observations():
    with pytest.raises(ValueError, match="exceeds"):
        init_params([np.zeros((5, 2))], 2, 3)


def test_validation_errors():
    p = make_gdm("linear")
    with pytest.raises(dm.ShapeError, match="mu"):
        GdmParams(p.prior_logits, p.mu[:, :2], p.F, p.S, p.b, p.sigma, p.transition).validate()
    with pytest.raises(ValueError, match="sigma"):
        GdmParams(p.prior_logits, p.mu, p.F, p.S, p.b, -p.sigma, p.transition).validate()
    with pytest.raises(ValueError, match="variant"):
        Transition.init("bogus", 2, 2, np.random.default_rng(0))
    bad = Transition("sticky-linear", W=np.zeros((3, 2)), r=np.zeros(3), gamma=1.5)
    with pytest.raises(ValueError, match="gamma"):
        bad.validate(3, 2)


def test_log_joint_checks_inputs():
    p = make_gdm("linear")
    Z, Y = simulate(p, np.random.default_rng(0), 4)
    with pytest.raises(ValueError, match="simplex|positive"):
        log_joint(p, np.abs(Z) * 2, Y)
    with pytest.raises(dm.ShapeError):
        log_joint(p, Z[:3], Y)
    with pytest.raises(dm.ShapeError):
        observation_mean(p, Z[0], Y[0, :2])
