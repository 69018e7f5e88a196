"""Amortised variational posteriors over soft states and GS-BBVI training.

The posterior network maps an observation sequence to Gumbel-Softmax logits
``pi'_{1:T}``; states are drawn sequentially so the sticky and recurrent
forms can condition on the previous draw.  Gradients flow through the draws
(pathwise estimator).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from . import diffmath as dm
from . import scans
from .gumbel import EPS_Z, gs_log_density, log_relaxed, relax, sample_gumbel
from .model import GdmParams, check_variant, init_params, log_joint

log = logging.getLogger(__name__)

POSTERIOR_VARIANTS = ("linear", "sticky-linear", "birecurrent")
# generative transition family -> matching posterior family
MATCHING_POSTERIOR = {"linear": "linear", "sticky-linear": "sticky-linear", "recurrent": "birecurrent"}

_FIELDS = {
    "linear": ("prior_logits", "W", "b"),
    "sticky-linear": ("prior_logits", "W", "b", "B"),
    "birecurrent": (
        "prior_logits", "Wx_f", "bx_f", "Wh_f", "bh_f", "Wx_b", "bx_b", "Wh_b", "bh_b",
        "W1z", "W1e", "b1", "W2", "b2",
    ),
}


@dataclass
class PosteriorParams:
    """Inference-network parameters.

    * ``linear``: ``pi'_t = W y_t + b``
    * ``sticky-linear``: ``pi'_t = W y_t + B z_{t-1} + b``
    * ``birecurrent``: ``e = BiGRU(y)``, ``pi'_t = W2 tanh(W1z z_{t-1} + W1e e_t + b1) + b2``

    The first state always uses the learnable ``prior_logits``.
    """

    variant: str
    prior_logits: Any
    W: Any = None
    b: Any = None
    B: Any = None
    Wx_f: Any = None
    bx_f: Any = None
    Wh_f: Any = None
    bh_f: Any = None
    Wx_b: Any = None
    bx_b: Any = None
    Wh_b: Any = None
    bh_b: Any = None
    W1z: Any = None
    W1e: Any = None
    b1: Any = None
    W2: Any = None
    b2: Any = None

    @property
    def K(self):
        return np.shape(dm.value(self.prior_logits))[0]

    @property
    def input_dim(self):
        src = self.Wx_f if self.variant == "birecurrent" else self.W
        return np.shape(dm.value(src))[1]

    @classmethod
    def init(cls, variant, K, N, rng, scale=0.1, hidden=16, width=32):
        if variant not in POSTERIOR_VARIANTS:
            raise ValueError(f"unknown posterior variant {variant!r}; expected one of {POSTERIOR_VARIANTS}")
        if variant != "birecurrent":
            return cls(
                variant,
                prior_logits=np.zeros(K),
                W=scale * rng.standard_normal((K, N)),
                b=np.zeros(K),
                B=np.zeros((K, K)) if variant == "sticky-linear" else None,
            )
        H = hidden

        def gru():
            return (rng.standard_normal((3 * H, N)) / np.sqrt(N), np.zeros(3 * H),
                    rng.standard_normal((3 * H, H)) / np.sqrt(H), np.zeros(3 * H))

        f, bw = gru(), gru()
        return cls(
            variant,
            prior_logits=np.zeros(K),
            Wx_f=f[0], bx_f=f[1], Wh_f=f[2], bh_f=f[3],
            Wx_b=bw[0], bx_b=bw[1], Wh_b=bw[2], bh_b=bw[3],
            W1z=rng.standard_normal((width, K)) / np.sqrt(K),
            W1e=rng.standard_normal((width, 2 * H)) / np.sqrt(2 * H),
            b1=np.zeros(width),
            W2=scale * rng.standard_normal((K, width)),
            b2=np.zeros(K),
        )

    def arrays(self):
        return {n: np.asarray(getattr(self, n), dtype=np.float64) for n in _FIELDS[self.variant]}

    def with_arrays(self, arrays):
        return dataclasses.replace(self, **{n: arrays[n] for n in _FIELDS[self.variant] if n in arrays})

    def natural(self):
        return {n: np.asarray(dm.value(getattr(self, n)), dtype=np.float64) for n in _FIELDS[self.variant]}

    @classmethod
    def from_natural(cls, variant, arrays):
        return cls(variant, **{n: np.asarray(arrays[n], dtype=np.float64) for n in _FIELDS[variant]})

    def detached(self):
        return PosteriorParams.from_natural(self.variant, self.natural())


class PosteriorSample(NamedTuple):
    z: Any
    log_density: Any
    logits: Any
    gumbels: np.ndarray
    log_s: Any


def _bigru_features(post, Y):
    fwd = scans.gru_scan(dm.add(dm.matmul(Y, dm.transpose(post.Wx_f)), post.bx_f), post.Wh_f, post.bh_f)
    Yr = Y[::-1]
    bwd = scans.gru_scan(dm.add(dm.matmul(Yr, dm.transpose(post.Wx_b)), post.bx_b), post.Wh_b, post.bh_b)
    return dm.concat([fwd, bwd[::-1]], axis=1)


def posterior_sample(post: PosteriorParams, Y, tau, rng=None, gumbels=None) -> PosteriorSample:
    """Draw ``z_{1:T} ~ q(z | y_{1:T})`` and its total log-density."""
    Yv = np.asarray(dm.value(Y))
    if Yv.ndim != 2 or Yv.shape[1] != post.input_dim:
        raise dm.ShapeError(f"posterior expects a T x {post.input_dim} series, got shape {Yv.shape}")
    T, K = Yv.shape[0], post.K
    if gumbels is None:
        if rng is None:
            raise ValueError("posterior_sample needs an rng or explicit gumbels")
        gumbels = sample_gumbel(rng, (T, K))
    gumbels = np.asarray(gumbels, dtype=np.float64)
    first = dm.reshape(post.prior_logits, (1, K))
    if post.variant == "linear":
        base = dm.add(dm.matmul(Y, dm.transpose(post.W)), post.b)
        logits = dm.concat([first, base[1:]], axis=0)
        Z = relax(dm.add(logits, gumbels), tau)
    elif post.variant == "sticky-linear":
        base = dm.add(dm.matmul(Y, dm.transpose(post.W)), post.b)
        Z = scans.sticky_chain(base, post.prior_logits, gumbels, tau, EPS_Z, B=post.B)
        logits = dm.concat([first, dm.add(base[1:], dm.matmul(Z[:-1], dm.transpose(post.B)))], axis=0)
    else:
        E = dm.add(dm.matmul(_bigru_features(post, Y), dm.transpose(post.W1e)), post.b1)
        Z = scans.fnn_chain(E, post.W1z, post.W2, post.b2, post.prior_logits, gumbels, tau, EPS_Z)
        hidden = dm.tanh(dm.add(dm.matmul(Z[:-1], dm.transpose(post.W1z)), E[1:]))
        logits = dm.concat([first, dm.add(dm.matmul(hidden, dm.transpose(post.W2)), post.b2)], axis=0)
    log_S = log_relaxed(logits, gumbels, tau)
    return PosteriorSample(Z, gs_log_density(None, logits, tau, log_z=log_S), logits, gumbels, log_S)


def amortized_apply(post: PosteriorParams, Y, tau, rng=None, gumbels=None):
    """Soft states for a new series from the frozen inference network."""
    return posterior_sample(post.detached(), np.asarray(Y, dtype=np.float64), tau, rng, gumbels).z


def elbo_estimate(gdm: GdmParams, post: PosteriorParams, Y, rng=None, S=1, gumbels=None):
    """Monte Carlo ELBO, ``mean_s [log p(y, z_s) - log q(z_s | y)]``.

    ``gumbels`` (S x T x K) freezes the noise, which makes the estimate a
    deterministic function of the parameters.
    """
    if S < 1:
        raise ValueError("need at least one ELBO sample")
    total = 0.0
    for s in range(S):
        draw = posterior_sample(post, Y, gdm.tau, rng=rng, gumbels=None if gumbels is None else gumbels[s])
        lj = log_joint(gdm, draw.z, Y, log_S=draw.log_s)
        for term, val in (("log p(y, z)", lj), ("log q(z)", draw.log_density)):
            if not np.isfinite(dm.value(val)):
                raise FloatingPointError(f"non-finite ELBO term {term}: {float(dm.value(val))}")
        total = dm.add(total, dm.sub(lj, draw.log_density))
    return dm.mul(total, 1.0 / S)


# ----------------------------------------------------------------------------
# training


@dataclass
class ModelSpec:
    K: int
    D: int
    variant: str = "sticky-linear"
    hidden: int = 16
    width: int = 32
    gamma: float = 0.5
    init_scale: float = 0.1
    posterior_scale: float = 0.1
    dynamics_noise: float = 0.01
    partition_init: str = "kmeans"
    partition_scale: float = 1.0

    def __post_init__(self):
        check_variant(self.variant)
        if self.K < 1 or self.D < 1:
            raise ValueError("K and D must be positive")
        if self.partition_init not in ("kmeans", "random"):
            raise ValueError(f"unknown partition init {self.partition_init!r}")


@dataclass
class TrainConfig:
    steps: int = 6000
    learning_rate: float = 1e-2
    decay_every: int = 2000
    decay_factor: float = 0.5
    seed: int = 0
    tau: float = 0.99
    gradient_clip: float = 10.0
    elbo_samples: int = 1
    checkpoint_every: int = 0
    frozen: tuple = ()

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.elbo_samples < 1:
            raise ValueError("need at least one ELBO sample")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    def lr_at(self, step):
        return self.learning_rate * self.decay_factor ** (step // self.decay_every if self.decay_every else 0)


@dataclass
class TrainResult:
    model: GdmParams
    posterior: PosteriorParams
    trace: list = field(default_factory=list)
    opt_state: dm.AdamState = field(default_factory=dm.AdamState)
    step: int = 0


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: TrainResult):
        super().__init__(message)
        self.last_good = last_good


def partition_logits(series, F, K, rng, scale=1.0):
    """Linear logits ``(W, b)`` of a nearest-centroid rule in whitened latent space.

    The projected observations ``F y`` are whitened and clustered with
    k-means; ``logit_k(y) = scale * (2 c_k . u - |c_k|^2)`` with ``u`` the
    whitened projection is the Voronoi partition of the centroids ``c_k``.
    """
    from scipy.cluster.vq import kmeans2

    U = np.concatenate([np.asarray(y) for y in series]) @ np.asarray(F).T
    m, sd = U.mean(axis=0), U.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Uw = (U - m) / sd
    centroids, _ = kmeans2(Uw, K, minit="++", seed=rng)
    # u = P (F y - m) with P = diag(1 / sd)
    G = 2.0 * scale * centroids / sd  # K x D, acts on F y
    W = G @ np.asarray(F)
    b = -scale * np.sum(centroids ** 2, axis=1) - G @ m
    return W, b


def initialize(series, spec: ModelSpec, config: TrainConfig):
    """Starting point for training.

    With ``partition_init="kmeans"`` the linear and sticky posteriors start
    from a k-means partition of the projected training data, so the states
    begin attached to distinct regions; otherwise the posterior weights are
    small random values.
    """
    rng = np.random.default_rng([config.seed, 0x6D0D])
    extra = ({"gamma": spec.gamma} if spec.variant == "sticky-linear" else
             {"hidden": spec.hidden, "width": spec.width} if spec.variant == "recurrent" else {})
    gdm = init_params(series, spec.K, spec.D, spec.variant, rng=rng, tau=config.tau,
                      dynamics_noise=spec.dynamics_noise, scale=spec.init_scale, **extra)
    post = PosteriorParams.init(MATCHING_POSTERIOR[spec.variant], spec.K, gdm.N, rng,
                                scale=spec.posterior_scale, hidden=spec.hidden, width=spec.width)
    if spec.partition_init == "kmeans" and post.variant != "birecurrent" and spec.K > 1:
        post.W, post.b = partition_logits(series, gdm.F, spec.K, rng, spec.partition_scale)
    return gdm, post


def _split(arrays):
    model = {k[6:]: v for k, v in arrays.items() if k.startswith("model.")}
    post = {k[10:]: v for k, v in arrays.items() if k.startswith("posterior.")}
    return model, post


def _objective(gdm, post, series, rng, S):
    """Negative mean per-timestep ELBO over the training series."""
    total = 0.0
    for Y in series:
        total = dm.add(total, dm.mul(elbo_estimate(gdm, post, Y, rng=rng, S=S), 1.0 / len(Y)))
    return dm.mul(total, -1.0 / len(series))


def train(series, spec: ModelSpec | None = None, config: TrainConfig | None = None,
          resume: TrainResult | None = None, callback=None) -> TrainResult:
    """Maximise the ELBO over model and posterior parameters with Adam.

    ``series`` is a list of T_i x N observation arrays.  Step ``s`` draws its
    Gumbel noise from ``default_rng([seed, s])`` so runs are reproducible and
    resumable.  ``callback(result)`` fires every ``checkpoint_every`` steps.
    """
    config = TrainConfig() if config is None else config
    series = [np.asarray(y, dtype=np.float64) for y in series]
    if not series:
        raise ValueError("need at least one training series")
    if resume is None:
        if spec is None:
            raise ValueError("need a model spec when not resuming")
        gdm, post = initialize(series, spec, config)
        result = TrainResult(gdm, post)
    else:
        result = dataclasses.replace(resume, trace=list(resume.trace))
    if MATCHING_POSTERIOR[result.model.transition.variant] != result.posterior.variant:
        raise ValueError("posterior family must mirror the transition family")

    arrays = {"model." + k: v for k, v in result.model.arrays().items()}
    arrays.update({"posterior." + k: v for k, v in result.posterior.arrays().items()})
    frozen = {k: arrays.pop(k) for k in list(arrays) if k in config.frozen or k.split(".", 1)[1] in config.frozen}
    opt = result.opt_state
    trace = result.trace
    last_good = result
    bad_streak = 0
    start = result.step
    for step in range(start, start + config.steps):
        rng = np.random.default_rng([config.seed, step])
        tape = dm.Tape()
        tracked = tape.params(arrays)
        m_arr, p_arr = _split({**tracked, **frozen})
        gdm_v = result.model.with_arrays(m_arr)
        post_v = result.posterior.with_arrays(p_arr)
        try:
            loss = _objective(gdm_v, post_v, series, rng, config.elbo_samples)
            lval = float(dm.value(loss))
            if not math.isfinite(lval):
                raise FloatingPointError(f"loss is {lval}")
            grads, gnorm = dm.clip_by_global_norm(dm.backward(tape, loss), config.gradient_clip)
            arrays, opt = dm.adam_step(arrays, grads, opt, lr=config.lr_at(step))
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as err:
            bad_streak += 1
            log.warning("step %d skipped: %s", step, err)
            if bad_streak >= 2:
                raise TrainingDiverged(f"training diverged at step {step}: {err}", last_good) from err
            continue
        bad_streak = 0
        trace.append((step, -lval, gnorm))
        m_arr, p_arr = _split({**arrays, **frozen})
        result = TrainResult(
            result.model.with_arrays(m_arr).detached(),
            result.posterior.with_arrays(p_arr).detached(),
            trace,
            opt,
            step + 1,
        )
        last_good = result
        if callback is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            callback(result)
    return result
