"""Gumbel noise, Gumbel-Max, and the Gumbel-Softmax (relaxed categorical).

Scale of the Gumbel noise is fixed to 1 throughout.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import diffmath as dm

# Lower bound on every relaxed-state coordinate.  Samples are mapped to
# EPS_Z + (1 - K * EPS_Z) * softmax(.) so that logs stay finite.
EPS_Z = 1e-6
_U_CLAMP = 1e-12


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel draws, ``-log(-log(u))``."""
    u = rng.uniform(size=shape)
    u = np.clip(u, _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def gumbel_max(logits, gumbels) -> np.ndarray:
    """Index of the largest perturbed logit along the last axis (lowest index on ties)."""
    logits = np.asarray(logits, dtype=np.float64)
    gumbels = np.asarray(gumbels, dtype=np.float64)
    if logits.shape[-1] == 0:
        raise ValueError("gumbel_max needs at least one logit")
    if np.broadcast_shapes(logits.shape, gumbels.shape) != gumbels.shape:
        raise dm.ShapeError(f"logits {logits.shape} do not match gumbels {gumbels.shape}")
    return np.argmax(logits + gumbels, axis=-1)


def relax(u, tau):
    """Floored tempered softmax along the last axis."""
    K = np.shape(dm.value(u))[-1]
    return dm.add(EPS_Z, dm.mul(1.0 - K * EPS_Z, dm.softmax(u, tau)))


class GsSample(NamedTuple):
    z: object
    gumbels: np.ndarray
    logits: object
    tau: float
    log_s: object


def log_relaxed(logits, gumbels, tau):
    """Log of the unfloored relaxed sample, ``log softmax((logits + g) / tau)``.

    Densities are evaluated at this point: the floor applied to ``z`` is a
    fixed transformation of it, so it never enters the density ratio.
    """
    return dm.log_softmax(dm.add(logits, gumbels), tau)


def gs_sample(logits, tau, rng=None, gumbels=None) -> GsSample:
    """Reparameterised relaxed draw ``softmax((logits + g) / tau)``.

    Exactly one of ``rng`` / ``gumbels`` should be given.  ``z`` is tracked on
    the tape whenever ``logits`` is.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    shape = np.shape(dm.value(logits))
    if gumbels is None:
        if rng is None:
            raise ValueError("gs_sample needs an rng or explicit gumbels")
        gumbels = sample_gumbel(rng, shape)
    gumbels = np.asarray(gumbels, dtype=np.float64)
    z = relax(dm.add(logits, gumbels), tau)
    return GsSample(z, gumbels, logits, float(tau), log_relaxed(logits, gumbels, tau))


def gs_log_density(z, logits, tau, rows=False, log_z=None):
    """Log-density of the relaxed categorical at ``z``.

    ``z`` and ``logits`` are (..., K); densities of individual rows are summed
    unless ``rows`` is set, in which case a vector with one entry per row is
    returned.  Invariant to adding a constant to all logits.  Passing
    ``log_z`` (with ``z=None``) evaluates the density from log-coordinates,
    which stays exact where ``z`` itself would underflow.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if log_z is None:
        zval = np.asarray(dm.value(z))
        if np.any(zval <= 0):
            raise ValueError("relaxed density is only defined for strictly positive z")
        logz = dm.log(z)
    else:
        logz = log_z
    shape = np.shape(dm.value(logz))
    if len(shape) == 1:
        logz = dm.reshape(logz, (1, -1))
        if np.ndim(dm.value(logits)) == 1:
            logits = dm.reshape(logits, (1, -1))
    K = shape[-1]
    const = math.lgamma(K) + (K - 1) * math.log(tau)
    lse = dm.logsumexp(dm.sub(logits, dm.mul(tau, logz)), axis=-1)
    per_row = dm.sub(
        dm.add(const, dm.sum(logits, axis=-1)),
        dm.add(dm.mul(tau + 1.0, dm.sum(logz, axis=-1)), dm.mul(float(K), dm.reshape(lse, (-1,)))),
    )
    return per_row if rows else dm.sum(per_row)
