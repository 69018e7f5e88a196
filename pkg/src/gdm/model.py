"""The two-level Gumbel dynamical model.

Generative process, for soft states ``z_t`` on the K-simplex and
observations ``y_t`` in R^N::

    z_1 ~ GS(prior_logits, tau)
    y_1 ~ N(z_1 @ mu, diag(sigma^2))
    z_t ~ GS(f(z_{t-1}, F y_{t-1}), tau)
    y_t ~ N(sum_k z_tk (S_k F y_{t-1} + b_k), diag(sigma^2))

``f`` is one of three transition families (see :class:`Transition`).  All
functions accept parameters holding either numpy arrays or tape variables.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import diffmath as dm
from . import scans
from .gumbel import EPS_Z, gs_log_density, relax, sample_gumbel

VARIANTS = ("linear", "sticky-linear", "recurrent")

_LINEAR_FIELDS = ("W", "r")
_RECURRENT_FIELDS = ("Wx", "bx", "Wh", "bh", "W1z", "W1h", "b1", "W2", "b2")


def _shape(x):
    return np.shape(dm.value(x))


def check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown transition variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class Transition:
    """Transition-logit family over ``(z_prev, u_prev)``.

    ``u_prev`` is the D-dimensional driving input: ``F y_{t-1}`` in the
    two-level model and ``x_{t-1}`` in the three-level one.

    * ``linear``: ``W u + r``
    * ``sticky-linear``: ``(1 - gamma)(W u + r) + gamma z_prev``
    * ``recurrent``: ``h_t = GRU(h_{t-1}, u)``,
      ``W2 tanh(W1z z_prev + W1h h_t + b1) + b2``
    """

    variant: str
    W: Any = None
    r: Any = None
    gamma: Any = 0.0
    Wx: Any = None
    bx: Any = None
    Wh: Any = None
    bh: Any = None
    W1z: Any = None
    W1h: Any = None
    b1: Any = None
    W2: Any = None
    b2: Any = None

    @property
    def field_names(self):
        if self.variant == "recurrent":
            return _RECURRENT_FIELDS
        if self.variant == "sticky-linear":
            return _LINEAR_FIELDS + ("gamma",)
        return _LINEAR_FIELDS

    @property
    def hidden_size(self):
        return None if self.Wh is None else _shape(self.Wh)[1]

    @classmethod
    def init(cls, variant, K, D, rng, scale=0.1, gamma=0.5, hidden=16, width=32):
        check_variant(variant)
        if variant != "recurrent":
            return cls(variant, W=scale * rng.standard_normal((K, D)), r=np.zeros(K),
                       gamma=gamma if variant == "sticky-linear" else 0.0)
        H = hidden
        return cls(
            variant,
            Wx=rng.standard_normal((3 * H, D)) / np.sqrt(D),
            bx=np.zeros(3 * H),
            Wh=rng.standard_normal((3 * H, H)) / np.sqrt(H),
            bh=np.zeros(3 * H),
            W1z=rng.standard_normal((width, K)) / np.sqrt(K),
            W1h=rng.standard_normal((width, H)) / np.sqrt(H),
            b1=np.zeros(width),
            W2=scale * rng.standard_normal((K, width)),
            b2=np.zeros(K),
        )

    def validate(self, K, D):
        check_variant(self.variant)
        if self.variant == "recurrent":
            H = self.hidden_size
            if H is None or H < 1:
                raise ValueError("recurrent transition needs hidden size >= 1")
            width = _shape(self.W1z)[0]
            expect = {"Wx": (3 * H, D), "bx": (3 * H,), "Wh": (3 * H, H), "bh": (3 * H,),
                      "W1z": (width, K), "W1h": (width, H), "b1": (width,), "W2": (K, width), "b2": (K,)}
        else:
            expect = {"W": (K, D), "r": (K,)}
        for name, shp in expect.items():
            if _shape(getattr(self, name)) != shp:
                raise dm.ShapeError(f"transition.{name} has shape {_shape(getattr(self, name))}, expected {shp}")
        if self.variant == "sticky-linear" and not 0.0 <= float(dm.value(self.gamma)) <= 1.0:
            raise ValueError(f"stickiness gamma must lie in [0, 1], got {dm.value(self.gamma)}")

    # -- flattening -------------------------------------------------------

    def arrays(self, prefix="transition."):
        """Unconstrained trainable arrays (``gamma`` enters as its logit)."""
        out = {}
        for name in self.field_names:
            if name == "gamma":
                g = float(self.gamma)
                with np.errstate(divide="ignore"):
                    out[prefix + "gamma_logit"] = np.array(np.log(g) - np.log1p(-g))
            else:
                out[prefix + name] = np.asarray(getattr(self, name), dtype=np.float64)
        return out

    def with_arrays(self, arrays, prefix="transition."):
        updates = {}
        for name in self.field_names:
            if name == "gamma":
                if prefix + "gamma_logit" in arrays:
                    updates["gamma"] = dm.sigmoid(arrays[prefix + "gamma_logit"])
            elif prefix + name in arrays:
                updates[name] = arrays[prefix + name]
        return dataclasses.replace(self, **updates)

    def natural(self, prefix="transition."):
        out = {prefix + n: np.asarray(dm.value(getattr(self, n)), dtype=np.float64) for n in self.field_names}
        return out

    @classmethod
    def from_natural(cls, variant, arrays, prefix="transition."):
        kw = {}
        for key, val in arrays.items():
            if key.startswith(prefix):
                name = key[len(prefix):]
                kw[name] = float(val) if name == "gamma" else np.asarray(val, dtype=np.float64)
        return cls(variant, **kw)


def transition_logits_seq(tr: Transition, Zprev, Uprev, h0=None):
    """Logits for a whole sequence of steps.

    ``Zprev`` (L x K) and ``Uprev`` (L x D) hold the previous soft states and
    driving inputs, one row per step.  Returns L x K logits.
    """
    if tr.variant == "recurrent":
        Hs = scans.gru_scan(dm.add(dm.matmul(Uprev, dm.transpose(tr.Wx)), tr.bx), tr.Wh, tr.bh, h0)
        pre = dm.add(dm.add(dm.matmul(Zprev, dm.transpose(tr.W1z)), dm.matmul(Hs, dm.transpose(tr.W1h))), tr.b1)
        return dm.add(dm.matmul(dm.tanh(pre), dm.transpose(tr.W2)), tr.b2)
    lin = dm.add(dm.matmul(Uprev, dm.transpose(tr.W)), tr.r)
    if tr.variant == "sticky-linear":
        return dm.add(dm.mul(dm.sub(1.0, tr.gamma), lin), dm.mul(tr.gamma, Zprev))
    return lin


def transition_step(tr: Transition, z_prev, u_prev, h_prev=None):
    """Single-step logits in plain numpy, batched over leading axes.

    Returns ``(logits, h)``; ``h`` is the updated GRU state (``None`` unless
    the family is recurrent).
    """
    z_prev = np.asarray(z_prev, dtype=np.float64)
    u_prev = np.asarray(u_prev, dtype=np.float64)
    if tr.variant == "recurrent":
        if h_prev is None:
            h_prev = np.zeros(u_prev.shape[:-1] + (tr.hidden_size,))
        h = scans.gru_step(h_prev, u_prev, tr.Wx, tr.bx, tr.Wh, tr.bh)
        logits = np.tanh(z_prev @ tr.W1z.T + h @ tr.W1h.T + tr.b1) @ tr.W2.T + tr.b2
        return logits, h
    if u_prev.shape[-1] != np.shape(tr.W)[1]:
        raise dm.ShapeError(f"transition input has dimension {u_prev.shape[-1]}, expected {np.shape(tr.W)[1]}")
    lin = u_prev @ np.asarray(tr.W).T + tr.r
    if tr.variant == "sticky-linear":
        g = float(tr.gamma)
        return (1.0 - g) * lin + g * z_prev, None
    return lin, None


@dataclass
class GdmParams:
    """Parameters of the two-level model.

    Shapes: ``prior_logits`` (K,), ``mu`` (K, N), ``F`` (D, N),
    ``S`` (K, N, D), ``b`` (K, N), ``sigma`` (N,) standard deviations.
    """

    prior_logits: Any
    mu: Any
    F: Any
    S: Any
    b: Any
    sigma: Any
    transition: Transition
    tau: float = 0.99

    @property
    def K(self):
        return _shape(self.S)[0]

    @property
    def N(self):
        return _shape(self.S)[1]

    @property
    def D(self):
        return _shape(self.S)[2]

    def validate(self):
        K, N, D = self.K, self.N, self.D
        expect = {"prior_logits": (K,), "mu": (K, N), "F": (D, N), "b": (K, N), "sigma": (N,)}
        for name, shp in expect.items():
            if _shape(getattr(self, name)) != shp:
                raise dm.ShapeError(f"{name} has shape {_shape(getattr(self, name))}, expected {shp}")
        if np.any(np.asarray(dm.value(self.sigma)) <= 0):
            raise ValueError("observation noise sigma must be positive")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        self.transition.validate(K, D)
        return self

    def arrays(self):
        """Unconstrained trainable arrays keyed by name (``sigma`` as its log)."""
        out = {
            "prior_logits": np.asarray(self.prior_logits, dtype=np.float64),
            "mu": np.asarray(self.mu, dtype=np.float64),
            "F": np.asarray(self.F, dtype=np.float64),
            "S": np.asarray(self.S, dtype=np.float64),
            "b": np.asarray(self.b, dtype=np.float64),
            "log_sigma": np.log(np.asarray(self.sigma, dtype=np.float64)),
        }
        out.update(self.transition.arrays())
        return out

    def with_arrays(self, arrays):
        """Inverse of :meth:`arrays`; values may be tape variables."""
        updates = {k: arrays[k] for k in ("prior_logits", "mu", "F", "S", "b") if k in arrays}
        if "log_sigma" in arrays:
            updates["sigma"] = dm.exp(arrays["log_sigma"])
        updates["transition"] = self.transition.with_arrays(arrays)
        return dataclasses.replace(self, **updates)

    def natural(self):
        out = {k: np.asarray(dm.value(getattr(self, k)), dtype=np.float64)
               for k in ("prior_logits", "mu", "F", "S", "b", "sigma")}
        out.update(self.transition.natural())
        return out

    @classmethod
    def from_natural(cls, arrays, variant, tau):
        kw = {k: np.asarray(arrays[k], dtype=np.float64) for k in ("prior_logits", "mu", "F", "S", "b", "sigma")}
        return cls(transition=Transition.from_natural(variant, arrays), tau=float(tau), **kw)

    def detached(self):
        return GdmParams.from_natural(self.natural(), self.transition.variant, self.tau)


def check_simplex(Z, name="z"):
    Zv = np.asarray(dm.value(Z))
    if Zv.ndim != 2:
        raise dm.ShapeError(f"{name} must be a T x K matrix, got shape {Zv.shape}")
    if np.any(Zv <= 0) or np.max(np.abs(Zv.sum(axis=1) - 1.0)) > 1e-8:
        raise ValueError(f"{name} rows must be strictly positive and sum to 1")


def transition_logits(params: GdmParams, z_prev, y_prev, h_prev=None):
    """Logits of ``z_t`` given the previous soft state and observation."""
    y_prev = np.asarray(y_prev, dtype=np.float64)
    if y_prev.shape[-1] != params.N:
        raise dm.ShapeError(f"observation has dimension {y_prev.shape[-1]}, expected {params.N}")
    if np.shape(z_prev)[-1] != params.K:
        raise dm.ShapeError(f"state has dimension {np.shape(z_prev)[-1]}, expected {params.K}")
    return transition_step(params.transition, z_prev, y_prev @ np.asarray(params.F).T, h_prev)


def observation_mean(params: GdmParams, z_t, y_prev=None):
    """Mean of ``y_t``; ``y_prev=None`` gives the first-step mean ``z_1 @ mu``.

    Plain numpy, batched over leading axes of ``z_t`` / ``y_prev``.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape[-1] != params.K:
        raise dm.ShapeError(f"state has dimension {z_t.shape[-1]}, expected {params.K}")
    if y_prev is None:
        return z_t @ params.mu
    y_prev = np.asarray(y_prev, dtype=np.float64)
    if y_prev.shape[-1] != params.N:
        raise dm.ShapeError(f"observation has dimension {y_prev.shape[-1]}, expected {params.N}")
    x = y_prev @ np.asarray(params.F).T
    return np.einsum("...k,knd,...d->...n", z_t, params.S, x) + z_t @ params.b


def observation_means(params: GdmParams, Z, Y):
    """Tape-aware means for a whole sequence; row t is the mean of ``y_t``."""
    K, N, D = params.K, params.N, params.D
    first = dm.matmul(Z[0:1], params.mu)
    if np.shape(dm.value(Y))[0] == 1:
        return first
    P = dm.matmul(Y[:-1], dm.transpose(params.F))
    U = dm.matmul(P, dm.transpose(dm.reshape(params.S, (K * N, D))))
    Zn = Z[1:]
    rest = dm.matmul(Zn, params.b)
    for k in range(K):
        rest = dm.add(rest, dm.mul(Zn[:, k : k + 1], U[:, k * N : (k + 1) * N]))
    return dm.concat([first, rest], axis=0)


def transition_logit_seq(params: GdmParams, Z, Y):
    """Logits of ``z_2..z_T`` as a (T-1) x K matrix."""
    P = dm.matmul(Y[:-1], dm.transpose(params.F))
    return transition_logits_seq(params.transition, Z[:-1], P)


def _state_density_args(Z, log_S):
    """Row-slicer returning ``(z, log_z)`` argument pairs for :func:`gs_log_density`."""
    if log_S is None:
        return lambda a, b: (Z[a:b], None)
    if np.shape(dm.value(log_S)) != np.shape(dm.value(Z)):
        raise dm.ShapeError(f"log_S has shape {np.shape(dm.value(log_S))}, expected {np.shape(dm.value(Z))}")
    return lambda a, b: (None, log_S[a:b])


def log_joint(params: GdmParams, Z, Y, log_S=None):
    """``log p(y_{1:T}, z_{1:T})`` under the relaxed-state model.

    ``log_S`` optionally gives the log-coordinates at which the state
    densities are evaluated (see :func:`gdm.gumbel.log_relaxed`); by default
    they are ``log Z``.
    """
    check_simplex(Z)
    Yv = np.asarray(dm.value(Y))
    if np.shape(dm.value(Z))[0] != Yv.shape[0]:
        raise dm.ShapeError(f"states have {np.shape(dm.value(Z))[0]} rows but observations have {Yv.shape[0]}")
    if Yv.shape[1] != params.N:
        raise dm.ShapeError(f"observations have dimension {Yv.shape[1]}, expected {params.N}")
    obs = dm.gaussian_logpdf_diag(Y, observation_means(params, Z, Y), params.sigma)
    dens = _state_density_args(Z, log_S)
    prior = gs_log_density(dens(0, 1)[0], params.prior_logits, params.tau, log_z=dens(0, 1)[1])
    total = dm.add(obs, prior)
    if Yv.shape[0] > 1:
        total = dm.add(total, gs_log_density(dens(1, None)[0], transition_logit_seq(params, Z, Y), params.tau,
                                                    log_z=dens(1, None)[1]))
    return total


def simulate(params: GdmParams, rng: np.random.Generator, T: int):
    """Ancestral sample ``(Z, Y)`` of length ``T``.

    Per step the rng yields K gumbels and then N standard normals, so two
    models with matching dimensions consume the stream identically.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    K, N = params.K, params.N
    sigma = np.asarray(params.sigma, dtype=np.float64)
    Z = np.empty((T, K))
    Y = np.empty((T, N))
    z = relax(np.asarray(params.prior_logits) + sample_gumbel(rng, K), params.tau)
    Z[0] = z
    Y[0] = observation_mean(params, z) + sigma * rng.standard_normal(N)
    h = None
    for t in range(1, T):
        logits, h = transition_logits(params, Z[t - 1], Y[t - 1], h)
        Z[t] = relax(logits + sample_gumbel(rng, K), params.tau)
        Y[t] = observation_mean(params, Z[t], Y[t - 1]) + sigma * rng.standard_normal(N)
    return Z, Y


def init_params(series, K, D, variant="sticky-linear", rng=None, tau=0.99, dynamics_noise=0.01, **transition_kw):
    """Data-driven starting point for training.

    ``F`` spans the top-D principal directions of the pooled observations,
    each ``S_k`` starts at ``pinv(F)`` plus small noise, ``mu`` rows at the
    mean first observation, and ``sigma`` at the residual scale of the
    projected identity predictor.  ``dynamics_noise`` is the scale of the
    perturbation that breaks the symmetry between states.
    """
    rng = np.random.default_rng() if rng is None else rng
    Ys = [np.asarray(y, dtype=np.float64) for y in series]
    N = Ys[0].shape[1]
    if D > N:
        raise ValueError(f"latent dimension D={D} exceeds observation dimension N={N}")
    pooled = np.concatenate(Ys, axis=0)
    centered = pooled - pooled.mean(axis=0)
    _, _, Vt = np.linalg.svd(centered, full_matrices=False)
    F = Vt[:D].copy()
    Finv = np.linalg.pinv(F)
    S = Finv[None] + dynamics_noise * rng.standard_normal((K, N, D))
    resid = np.concatenate([y[1:] - y[:-1] @ F.T @ Finv.T for y in Ys if len(y) > 1] or [centered])
    sigma = np.maximum(resid.std(axis=0), 1e-3)
    mu = np.tile(np.mean([y[0] for y in Ys], axis=0), (K, 1))
    return GdmParams(
        prior_logits=np.zeros(K),
        mu=mu,
        F=F,
        S=S,
        b=np.zeros((K, N)),
        sigma=sigma,
        transition=Transition.init(variant, K, D, rng, **transition_kw),
        tau=tau,
    ).validate()


__all__ = [
    "EPS_Z",
    "GdmParams",
    "Transition",
    "VARIANTS",
    "init_params",
    "log_joint",
    "observation_mean",
    "observation_means",
    "simulate",
    "transition_logits",
    "transition_logits_seq",
    "transition_step",
]
