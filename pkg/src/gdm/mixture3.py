"""Three-level mixture form of the model and its structured Gaussian posterior.

The three-level system keeps an explicit latent trajectory ``x_t`` in R^D::

    z_1 ~ GS(prior_logits, tau),        x_1 = z_1 @ mu_x
    z_t ~ GS(f(z_{t-1}, x_{t-1}), tau), x_t = sum_k z_tk (A_k x_{t-1} + c_k)
    y_t ~ N(C x_t, diag(Q))

Optional diagonal ``latent_noise`` turns the latent step into a Gaussian,
which is what the variational objective :func:`elbo3` needs.  The two-level
model is recovered by eliminating ``x`` through ``F = pinv(C)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from . import diffmath as dm
from .gumbel import gs_log_density, relax, sample_gumbel
from .model import (GdmParams, Transition, _state_density_args, check_simplex, transition_logits_seq,
                    transition_step)

_RANK_TOL = 1e-10


def _shape(x):
    if isinstance(x, (list, tuple)):
        return (len(x),) + (_shape(x[0]) if x else ())
    return np.shape(dm.value(x))


@dataclass
class Mixture3Params:
    """Parameters of the three-level system.

    Shapes: ``prior_logits`` (K,), ``mu_x`` (K, D), ``A`` (K, D, D),
    ``c`` (K, D), ``C`` (N, D), ``Q`` (N,) emission variances,
    ``latent_noise`` (D,) latent-step variances (zero means deterministic).
    """

    prior_logits: Any
    mu_x: Any
    A: Any
    c: Any
    C: Any
    Q: Any
    transition: Transition
    tau: float = 0.99
    latent_noise: Any = None

    def __post_init__(self):
        if self.latent_noise is None:
            self.latent_noise = np.zeros(_shape(self.A)[1])

    @property
    def K(self):
        return _shape(self.A)[0]

    @property
    def D(self):
        return _shape(self.A)[1]

    @property
    def N(self):
        return _shape(self.C)[0]

    def validate(self, allow_zero_noise=True):
        K, D, N = self.K, self.D, self.N
        expect = {"prior_logits": (K,), "mu_x": (K, D), "A": (K, D, D), "c": (K, D), "C": (N, D),
                  "Q": (N,), "latent_noise": (D,)}
        for name, shp in expect.items():
            if _shape(getattr(self, name)) != shp:
                raise dm.ShapeError(f"{name} has shape {_shape(getattr(self, name))}, expected {shp}")
        for name in ("Q", "latent_noise"):
            v = np.asarray(dm.value(getattr(self, name)))
            if np.any(v < 0) or (not allow_zero_noise and np.any(v <= 0)):
                raise ValueError(f"{name} variances must be {'non-negative' if allow_zero_noise else 'positive'}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        self.transition.validate(K, D)
        return self

    def natural(self):
        out = {k: np.asarray(dm.value(getattr(self, k)), dtype=np.float64)
               for k in ("prior_logits", "mu_x", "A", "c", "C", "Q", "latent_noise")}
        out.update(self.transition.natural())
        return out

    @classmethod
    def from_natural(cls, arrays, variant, tau):
        kw = {k: np.asarray(arrays[k], dtype=np.float64)
              for k in ("prior_logits", "mu_x", "A", "c", "C", "Q", "latent_noise")}
        return cls(transition=Transition.from_natural(variant, arrays), tau=float(tau), **kw)


def _rank_check(M, what):
    s = np.linalg.svd(np.asarray(M, dtype=np.float64), compute_uv=False)
    cond = math.inf if s[-1] <= _RANK_TOL * max(s[0], 1.0) else s[0] / s[-1]
    if not math.isfinite(cond):
        raise np.linalg.LinAlgError(
            f"{what} is rank deficient (singular values {np.array2string(s, precision=3)}, condition number inf)"
        )
    return cond


def condition_number(M):
    s = np.linalg.svd(np.asarray(M, dtype=np.float64), compute_uv=False)
    return math.inf if s[-1] == 0 else float(s[0] / s[-1])


def _transition_input_map(tr: Transition, M_inv):
    """Transition family rewritten for inputs ``u' = M u`` (weights act on ``M_inv u'``)."""
    if tr.variant == "recurrent":
        return dataclasses.replace(tr, Wx=np.asarray(tr.Wx) @ M_inv)
    return dataclasses.replace(tr, W=np.asarray(tr.W) @ M_inv)


def to_mixture3(gdm: GdmParams) -> Mixture3Params:
    """Lift a two-level model to three levels with ``x = F y``.

    ``A_k = F S_k``, ``c_k = F b_k``, ``C = pinv(F)``, ``mu_x = mu F^T``.
    The emission variances are ``sigma^2`` and the latent-step variances the
    projection of the observation noise, ``diag(F diag(sigma^2) F^T)``.
    """
    F = np.asarray(dm.value(gdm.F), dtype=np.float64)
    _rank_check(F, f"projection F ({F.shape[0]}x{F.shape[1]})")
    S = np.asarray(dm.value(gdm.S))
    b = np.asarray(dm.value(gdm.b))
    var = np.asarray(dm.value(gdm.sigma)) ** 2
    return Mixture3Params(
        prior_logits=np.array(dm.value(gdm.prior_logits), dtype=np.float64),
        mu_x=np.asarray(dm.value(gdm.mu)) @ F.T,
        A=np.einsum("dn,kne->kde", F, S),
        c=b @ F.T,
        C=np.linalg.pinv(F),
        Q=var.copy(),
        transition=gdm.transition,
        tau=gdm.tau,
        latent_noise=np.einsum("dn,n,dn->d", F, var, F),
    )


def to_gdm(m3: Mixture3Params) -> GdmParams:
    """Eliminate ``x`` through ``F = pinv(C)``.

    ``S_k = C A_k``, ``b_k = C c_k``, ``mu = mu_x C^T``.  The exact
    observation covariance, ``Q + C L C^T + sum_k z_k C A_k F Q F^T A_k^T C^T``
    (``L`` the latent-step covariance), is dense and state dependent; the
    returned ``sigma^2`` keeps its diagonal with ``z`` uniform over states.
    """
    C = np.asarray(dm.value(m3.C), dtype=np.float64)
    _rank_check(C, f"emission C ({C.shape[0]}x{C.shape[1]})")
    F = np.linalg.pinv(C)
    A = np.asarray(dm.value(m3.A))
    Qv = np.asarray(dm.value(m3.Q))
    Lv = np.asarray(dm.value(m3.latent_noise))
    CA = np.einsum("nd,kde->kne", C, A)
    G = np.einsum("kne,em->knm", CA, F)  # C A_k F
    corr = np.einsum("knm,m,knm->n", G, Qv, G) / m3.K
    var = Qv + np.einsum("nd,d,nd->n", C, Lv, C) + corr
    return GdmParams(
        prior_logits=np.array(dm.value(m3.prior_logits), dtype=np.float64),
        mu=np.asarray(dm.value(m3.mu_x)) @ C.T,
        F=F,
        S=CA,
        b=np.asarray(dm.value(m3.c)) @ C.T,
        sigma=np.sqrt(var),
        transition=m3.transition,
        tau=m3.tau,
    )


def reparameterize(m3: Mixture3Params, M) -> Mixture3Params:
    """Same observable system expressed in the coordinates ``x' = M x``.

    Latent-step variances map to ``diag(M L M^T)``, which is exact when
    ``M`` is diagonal (or a signed permutation) or the noise is zero.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (m3.D, m3.D):
        raise dm.ShapeError(f"reparameterisation must be {m3.D}x{m3.D}, got {M.shape}")
    _rank_check(M, "reparameterisation M")
    Mi = np.linalg.inv(M)
    return dataclasses.replace(
        m3,
        mu_x=np.asarray(m3.mu_x) @ M.T,
        A=np.einsum("de,kef,fg->kdg", M, np.asarray(m3.A), Mi),
        c=np.asarray(m3.c) @ M.T,
        C=np.asarray(m3.C) @ Mi,
        latent_noise=np.einsum("de,e,de->d", M, np.asarray(m3.latent_noise), M),
        transition=_transition_input_map(m3.transition, Mi),
    )


def latent_step(m3: Mixture3Params, z_t, x_prev=None):
    """Deterministic mixture step; ``x_prev=None`` gives ``x_1 = z_1 @ mu_x``.

    Batched over leading axes.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape[-1] != m3.K:
        raise dm.ShapeError(f"state has dimension {z_t.shape[-1]}, expected {m3.K}")
    if x_prev is None:
        return z_t @ np.asarray(m3.mu_x)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_prev.shape[-1] != m3.D:
        raise dm.ShapeError(f"latent has dimension {x_prev.shape[-1]}, expected {m3.D}")
    return np.einsum("...k,kde,...e->...d", z_t, np.asarray(m3.A), x_prev) + z_t @ np.asarray(m3.c)


def simulate3(m3: Mixture3Params, rng: np.random.Generator, T: int):
    """Ancestral sample ``(Z, X, Y)``.

    Per step the rng yields K gumbels, then D latent normals (only when
    ``latent_noise`` is nonzero), then N emission normals.  With zero latent
    noise the stream matches :func:`gdm.model.simulate` step for step.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    K, D, N = m3.K, m3.D, m3.N
    C = np.asarray(m3.C)
    q_sd = np.sqrt(np.asarray(m3.Q, dtype=np.float64))
    l_sd = np.sqrt(np.asarray(m3.latent_noise, dtype=np.float64))
    noisy = bool(np.any(l_sd > 0))
    Z, X, Y = np.empty((T, K)), np.empty((T, D)), np.empty((T, N))
    h = None
    for t in range(T):
        if t == 0:
            logits = np.asarray(m3.prior_logits)
        else:
            logits, h = transition_step(m3.transition, Z[t - 1], X[t - 1], h)
        Z[t] = relax(logits + sample_gumbel(rng, K), m3.tau)
        X[t] = latent_step(m3, Z[t], None if t == 0 else X[t - 1])
        if noisy:
            X[t] += l_sd * rng.standard_normal(D)
        Y[t] = C @ X[t] + q_sd * rng.standard_normal(N)
    return Z, X, Y


# ----------------------------------------------------------------------------
# block-tridiagonal Gaussians


def _values(x):
    if isinstance(x, (list, tuple)):
        return np.array([dm.value(v) for v in x], dtype=np.float64)
    return np.asarray(dm.value(x), dtype=np.float64)


def _diag(v, D):
    return dm.mul(np.eye(D), dm.reshape(v, (1, D)))


@dataclass
class BlockTriGaussian:
    """Gaussian in information form over a T x D trajectory.

    ``diag[t]`` is ``J_tt``, ``off[t]`` is ``J_{t,t+1}`` and ``h[t]`` the
    potential of block t.  Entries may be arrays or tape variables.
    """

    diag: list
    off: list
    h: list

    @property
    def T(self):
        return len(self.diag)

    @property
    def D(self):
        return _shape(self.diag[0])[0]

    def to_dense(self):
        T, D = self.T, self.D
        J = np.zeros((T * D, T * D))
        for t in range(T):
            J[t * D:(t + 1) * D, t * D:(t + 1) * D] = dm.value(self.diag[t])
        for t in range(T - 1):
            blk = np.asarray(dm.value(self.off[t]))
            J[t * D:(t + 1) * D, (t + 1) * D:(t + 2) * D] = blk
            J[(t + 1) * D:(t + 2) * D, t * D:(t + 1) * D] = blk.T
        h = np.concatenate([np.asarray(dm.value(x)) for x in self.h])
        return J, h


def assemble(A, b, Q, m, R) -> BlockTriGaussian:
    """Product of ``N(x_{t+1} | A_t x_t + b_t, diag Q_t)`` and ``N(x_t | m_t, diag R_t)``.

    ``A`` is (T-1, D, D), ``b`` and ``Q`` are (T-1, D), ``m`` and ``R`` are
    (T, D); each may be a list of per-step blocks.  ``Q`` may also be a
    single (D,) vector shared by all steps.
    """
    T, D = _shape(m)
    if _shape(R) != (T, D):
        raise dm.ShapeError(f"R has shape {_shape(R)}, expected {(T, D)}")
    if T > 1 and (_shape(A) != (T - 1, D, D) or _shape(b) != (T - 1, D)):
        raise dm.ShapeError(f"pairwise factors need A {(T - 1, D, D)} and b {(T - 1, D)}, "
                            f"got {_shape(A)} and {_shape(b)}")
    if np.any(_values(R) <= 0):
        raise ValueError("marginal variances R must be positive")
    shared_q = len(_shape(Q)) == 1
    if T > 1 and np.any(_values(Q) <= 0):
        raise ValueError("transition variances Q must be positive")
    rinv = dm.div(1.0, R)
    diag = [_diag(rinv[t], D) for t in range(T)]
    h = [dm.mul(rinv[t], m[t]) for t in range(T)]
    off = []
    for t in range(T - 1):
        qinv = dm.div(1.0, Q if shared_q else Q[t])
        At = A[t]
        QA = dm.mul(dm.reshape(qinv, (D, 1)), At)  # Q^-1 A_t
        diag[t] = dm.add(diag[t], dm.matmul(dm.transpose(At), QA))
        diag[t + 1] = dm.add(diag[t + 1], _diag(qinv, D))
        off.append(dm.neg(dm.transpose(QA)))
        qb = dm.mul(qinv, b[t])
        h[t] = dm.sub(h[t], dm.matmul(dm.transpose(At), qb))
        h[t + 1] = dm.add(h[t + 1], qb)
    return BlockTriGaussian(diag, off, h)


def block_cholesky(btg: BlockTriGaussian):
    """Lower block-bidiagonal factor ``L`` with ``J = L L^T``.

    Returns ``(Ld, Lo)``: diagonal blocks ``L_tt`` and sub-diagonal blocks
    ``L_{t+1,t}``.  O(T D^3).
    """
    try:
        Ld = [dm.cholesky(btg.diag[0])]
        Lo = []
        for t in range(btg.T - 1):
            lo = dm.transpose(dm.solve_triangular(Ld[t], btg.off[t]))
            Lo.append(lo)
            Ld.append(dm.cholesky(dm.sub(btg.diag[t + 1], dm.matmul(lo, dm.transpose(lo)))))
    except np.linalg.LinAlgError as err:
        raise ValueError(f"precision is not positive definite: {err}") from None
    return Ld, Lo


def _forward_solve(Ld, Lo, rhs):
    w = [dm.solve_triangular(Ld[0], rhs[0])]
    for t in range(1, len(Ld)):
        w.append(dm.solve_triangular(Ld[t], dm.sub(rhs[t], dm.matmul(Lo[t - 1], w[t - 1]))))
    return w


def _backward_solve(Ld, Lo, rhs):
    T = len(Ld)
    x = [None] * T
    x[T - 1] = dm.solve_triangular(Ld[T - 1], rhs[T - 1], trans=True)
    for t in range(T - 2, -1, -1):
        x[t] = dm.solve_triangular(Ld[t], dm.sub(rhs[t], dm.matmul(dm.transpose(Lo[t]), x[t + 1])), trans=True)
    return x


def block_tri_mean(btg: BlockTriGaussian, factor=None):
    """Solve ``J mu = h``; returns a T x D array (or tape variable)."""
    Ld, Lo = block_cholesky(btg) if factor is None else factor
    mu = _backward_solve(Ld, Lo, _forward_solve(Ld, Lo, btg.h))
    return dm.concat([dm.reshape(v, (1, -1)) for v in mu], axis=0)


class BlockTriSample(NamedTuple):
    x: Any
    mean: Any
    log_density: Any
    eta: np.ndarray


def sample_block_tri(btg: BlockTriGaussian, rng=None, draws=None, eta=None) -> BlockTriSample:
    """Draw ``x = mu + L^{-T} eta`` with ``eta`` standard normal.

    ``draws=None`` gives one T x D sample; an integer gives a stack of shape
    (draws, T, D) computed in one sweep.  ``log_density`` is ``log q(x)``
    (a vector when several draws are taken).
    """
    T, D = btg.T, btg.D
    shape = (T, D) if draws is None else (draws, T, D)
    if eta is None:
        if rng is None:
            raise ValueError("sample_block_tri needs an rng or explicit eta")
        eta = rng.standard_normal(shape)
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != shape:
        raise dm.ShapeError(f"eta has shape {eta.shape}, expected {shape}")
    factor = block_cholesky(btg)
    Ld, Lo = factor
    mu = block_tri_mean(btg, factor)
    if draws is None:
        v = _backward_solve(Ld, Lo, [eta[t] for t in range(T)])
        x = dm.add(mu, dm.concat([dm.reshape(vt, (1, D)) for vt in v], axis=0))
        quad = -0.5 * float(np.sum(eta * eta))
    else:
        v = _backward_solve(Ld, Lo, [eta[:, t, :].T for t in range(T)])
        x = np.asarray(dm.value(mu))[None] + np.stack([np.asarray(dm.value(vt)).T for vt in v], axis=1)
        quad = -0.5 * np.sum(eta * eta, axis=(1, 2))
    logdet = 0.0
    for L in Ld:
        logdet = dm.add(logdet, dm.sum(dm.log(dm.diagonal(L))))
    log_q = dm.add(dm.add(quad, logdet), -0.5 * T * D * math.log(2 * math.pi))
    return BlockTriSample(x, mu, log_q, eta)


def dense_gaussian_logpdf(x, J, h):
    """Reference log-density of the information-form Gaussian at a flat ``x``."""
    Sigma = np.linalg.inv(J)
    mu = Sigma @ h
    d = x - mu
    _, logdet = np.linalg.slogdet(J)
    return 0.5 * logdet - 0.5 * d @ J @ d - 0.5 * len(x) * math.log(2 * math.pi)


# ----------------------------------------------------------------------------
# three-level variational objective


@dataclass
class MarginalPotentials:
    """Learnable per-step factors ``N(x_t | m_t, diag exp(log_R_t))`` of q(x)."""

    m: Any
    log_R: Any

    @classmethod
    def init(cls, x_init, log_var=0.0):
        x_init = np.asarray(x_init, dtype=np.float64)
        return cls(x_init.copy(), np.full(x_init.shape, float(log_var)))


def latent_means(m3: Mixture3Params, Z, X):
    """Rows of ``sum_k z_tk (A_k x_{t-1} + c_k)`` for t >= 2 as a (T-1) x D matrix."""
    K, D = m3.K, m3.D
    AX = dm.matmul(X[:-1], dm.transpose(dm.reshape(m3.A, (K * D, D))))  # (T-1, K*D)
    Zn = Z[1:]
    out = dm.matmul(Zn, m3.c)
    for k in range(K):
        out = dm.add(out, dm.mul(Zn[:, k:k + 1], AX[:, k * D:(k + 1) * D]))
    return out


def log_joint3(m3: Mixture3Params, Z, X, Y, log_S=None):
    """``log p(y, x, z)`` with Gaussian latent steps of variance ``latent_noise``.

    The first latent is ``N(z_1 @ mu_x, diag latent_noise)``; ``log_S``
    plays the same role as in :func:`gdm.model.log_joint`.
    """
    check_simplex(Z)
    T = np.shape(dm.value(Y))[0]
    l_sd = dm.sqrt(m3.latent_noise)
    total = dm.gaussian_logpdf_diag(Y, dm.matmul(X, dm.transpose(m3.C)), dm.sqrt(m3.Q))
    dens = _state_density_args(Z, log_S)
    total = dm.add(total, gs_log_density(dens(0, 1)[0], m3.prior_logits, m3.tau, log_z=dens(0, 1)[1]))
    total = dm.add(total, dm.gaussian_logpdf_diag(X[0:1], dm.matmul(Z[0:1], m3.mu_x), l_sd))
    if T > 1:
        total = dm.add(total, dm.gaussian_logpdf_diag(X[1:], latent_means(m3, Z, X), l_sd))
        logits = transition_logits_seq(m3.transition, Z[:-1], X[:-1])
        total = dm.add(total, gs_log_density(dens(1, None)[0], logits, m3.tau, log_z=dens(1, None)[1]))
    return total


def build_q_x(m3: Mixture3Params, Z, q_x: MarginalPotentials) -> BlockTriGaussian:
    """q(x | z): generative latent steps at the sampled ``z`` times the marginal potentials."""
    T, D = np.shape(dm.value(q_x.m))
    K = m3.K
    A = [None] * (T - 1)
    b = [None] * (T - 1)
    for t in range(T - 1):
        At = 0.0
        for k in range(K):
            At = dm.add(At, dm.mul(Z[t + 1, k], m3.A[k]))
        A[t] = At
        b[t] = dm.matmul(Z[t + 1], m3.c)
    return assemble(A, b, m3.latent_noise, q_x.m, dm.exp(q_x.log_R))


def _pinv_full_column(C):
    """``(C^T C)^{-1} C^T`` on the tape, via a Cholesky factor of ``C^T C``."""
    L = dm.cholesky(dm.matmul(dm.transpose(C), C))
    return dm.solve_triangular(L, dm.solve_triangular(L, dm.transpose(C)), trans=True)


class Elbo3Sample(NamedTuple):
    elbo: Any
    z: Any
    x: Any
    log_q_z: Any
    log_q_x: Any


def elbo3(m3: Mixture3Params, q_z, q_x: MarginalPotentials, Y, rng=None, gumbels=None, eta=None) -> Elbo3Sample:
    """Single-sample estimate of the three-level ELBO.

    ``x`` is first initialised from the data as ``x_init = pinv(C) y``;
    ``z`` is drawn from the amortised posterior ``q_z`` (a
    :class:`gdm.inference.PosteriorParams` over D-dimensional inputs) fed
    with ``x_init``; finally ``x ~ q(x | z)``.  The pseudo-inverse stays on
    the tape, so ``C`` also receives gradient through ``x_init``.  The rng
    supplies the T x K gumbels and then the T x D normals.
    """
    from .inference import posterior_sample

    Yv = np.asarray(dm.value(Y), dtype=np.float64)
    if Yv.ndim != 2 or Yv.shape[1] != m3.N:
        raise dm.ShapeError(f"observations must be T x {m3.N}, got shape {Yv.shape}")
    if np.any(np.asarray(dm.value(m3.latent_noise)) <= 0):
        raise ValueError("elbo3 needs strictly positive latent_noise")
    if np.any(np.asarray(dm.value(m3.Q)) <= 0):
        raise ValueError("elbo3 needs strictly positive emission variances Q")
    T = Yv.shape[0]
    if _shape(q_x.m) != (T, m3.D):
        raise dm.ShapeError(f"marginal potentials have shape {_shape(q_x.m)}, expected {(T, m3.D)}")
    x_init = dm.matmul(Y, dm.transpose(_pinv_full_column(m3.C)))
    if gumbels is None:
        if rng is None:
            raise ValueError("elbo3 needs an rng or explicit noise")
        gumbels = sample_gumbel(rng, (T, m3.K))
    if eta is None:
        if rng is None:
            raise ValueError("elbo3 needs an rng or explicit noise")
        eta = rng.standard_normal((T, m3.D))
    draw_z = posterior_sample(q_z, x_init, m3.tau, gumbels=gumbels)
    q = build_q_x(m3, draw_z.z, q_x)
    draw_x = sample_block_tri(q, eta=eta)
    lj = log_joint3(m3, draw_z.z, draw_x.x, Y, log_S=draw_z.log_s)
    elbo = dm.sub(lj, dm.add(draw_z.log_density, draw_x.log_density))
    if not np.isfinite(dm.value(elbo)):
        raise FloatingPointError(f"non-finite three-level ELBO: {float(dm.value(elbo))}")
    return Elbo3Sample(elbo, draw_z.z, draw_x.x, draw_z.log_density, draw_x.log_density)


__all__ = [
    "BlockTriGaussian",
    "MarginalPotentials",
    "Mixture3Params",
    "assemble",
    "block_cholesky",
    "block_tri_mean",
    "condition_number",
    "elbo3",
    "latent_step",
    "log_joint3",
    "reparameterize",
    "sample_block_tri",
    "simulate3",
    "to_gdm",
    "to_mixture3",
]
