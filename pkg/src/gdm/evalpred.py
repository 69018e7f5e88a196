"""Smoothing, k-step prediction envelopes, and evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import scans
from .gumbel import relax, sample_gumbel
from .inference import PosteriorParams, posterior_sample
from .model import GdmParams, check_simplex, observation_mean, transition_step


def r_squared(y, yhat):
    """Pooled coefficient of determination over all coordinates."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("R^2 of an empty series is undefined")
    sst = np.sum((y - y.mean()) ** 2)
    if sst == 0:
        raise ValueError("R^2 is undefined for a constant series")
    return 1.0 - np.sum((y - yhat) ** 2) / sst


def smooth(gdm: GdmParams, Z, Y):
    """One-step reconstructions ``yhat_t = E[y_t | z_t, y_{t-1}]`` and their R^2."""
    Y = np.asarray(Y, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if Y.shape[0] == 0:
        raise ValueError("cannot smooth an empty series")
    if Z.shape[0] != Y.shape[0]:
        raise ValueError(f"states have {Z.shape[0]} rows but observations have {Y.shape[0]}")
    check_simplex(Z)
    yhat = np.empty_like(Y)
    yhat[0] = observation_mean(gdm, Z[0])
    yhat[1:] = observation_mean(gdm, Z[1:], Y[:-1])
    return yhat, r_squared(Y, yhat)


def posterior_states(post: PosteriorParams, Y, tau, rng, samples=1):
    """``samples`` posterior draws of z, stacked as (samples, T, K)."""
    Y = np.asarray(Y, dtype=np.float64)
    return np.stack([posterior_sample(post, Y, tau, rng=rng).z for _ in range(samples)])


def smooth_posterior(gdm: GdmParams, post: PosteriorParams, Y, rng, samples=1):
    """Smoothed observations from posterior draws, averaged over ``samples``."""
    Zs = posterior_states(post, Y, gdm.tau, rng, samples)
    yhat = np.mean([smooth(gdm, Z, Y)[0] for Z in Zs], axis=0)
    return yhat, r_squared(Y, yhat), Zs


@dataclass
class PredictionEnvelope:
    """Rollout statistics; ``mean[j, t]`` and ``std[j, t]`` describe the
    prediction of ``y_{t+j+1}`` made from start ``t``."""

    horizon: int
    mean: np.ndarray
    std: np.ndarray
    draws: int

    def target(self, Y, j):
        """Observed values aligned with ``mean[j]`` (NaN beyond the series end)."""
        Y = np.asarray(Y, dtype=np.float64)
        out = np.full(self.mean.shape[1:], np.nan)
        out[: len(Y) - j - 1] = Y[j + 1:]
        return out


def _hidden_before(tr, U):
    """GRU state before each step; row t is the state used together with ``U[t]``."""
    L = U.shape[0]
    H = tr.hidden_size
    out = np.zeros((L, H))
    if L > 1:
        out[1:] = scans.gru_scan(U[:-1] @ tr.Wx.T + tr.bx, tr.Wh, tr.bh)
    return out


def predict_k(gdm: GdmParams, post: PosteriorParams, Y, k, rng, M=64, sample_noise=True):
    """k-step-ahead envelopes from every start.

    For each of ``M`` rollouts a posterior sample supplies ``z_t``; the
    model then alternates transition draws and observation draws, feeding
    its own predictions back.  Observation noise is sampled unless
    ``sample_noise`` is off, in which case rollouts carry only the state
    uncertainty.
    """
    if k < 1:
        raise ValueError(f"horizon must be at least 1, got {k}")
    if M < 2:
        raise ValueError(f"need at least 2 rollouts for a spread, got {M}")
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != gdm.N:
        raise ValueError(f"observations must be T x {gdm.N}, got shape {Y.shape}")
    T, K, N = Y.shape[0], gdm.K, gdm.N
    sigma = np.asarray(gdm.sigma, dtype=np.float64)
    Z = posterior_states(post, Y, gdm.tau, rng, M)  # (M, T, K)
    y = np.broadcast_to(Y, (M, T, N)).copy()
    h = None
    tr = gdm.transition
    if tr.variant == "recurrent":
        h = np.broadcast_to(_hidden_before(tr, Y @ np.asarray(gdm.F).T), (M, T, tr.hidden_size)).copy()
    out = np.empty((k, M, T, N))
    z = Z
    for j in range(k):
        logits, h = transition_step(tr, z, y @ np.asarray(gdm.F).T, h)
        z = relax(logits + sample_gumbel(rng, (M, T, K)), gdm.tau)
        mean = observation_mean(gdm, z, y)
        y = mean + sigma * rng.standard_normal((M, T, N)) if sample_noise else mean
        out[j] = y
    return PredictionEnvelope(k, out.mean(axis=1), out.std(axis=1, ddof=1), M)


def coverage(env: PredictionEnvelope, Y, j=0, width=3.0):
    """Fraction of observed ``y_{t+j+1}`` inside ``mean +- width * std``."""
    tgt = env.target(Y, j)
    ok = ~np.isnan(tgt[:, 0])
    inside = np.abs(tgt[ok] - env.mean[j][ok]) <= width * env.std[j][ok]
    return float(inside.mean())


def envelope_width(env: PredictionEnvelope, j=0):
    """Mean ``std`` over starts and coordinates at horizon ``j + 1``."""
    return float(env.std[j].mean())


# ----------------------------------------------------------------------------
# state metrics


@dataclass
class StateAccuracyReport:
    accuracy: float
    k_neighbors: int
    confusion: np.ndarray
    classes: np.ndarray


def knn_predict(z_train, y_train, z_test, k=5, chunk=2048):
    """Majority vote of the k nearest training rows (Euclidean).

    Vote ties go to the smallest label; distance ties to the earlier row.
    """
    z_train = np.asarray(z_train, dtype=np.float64)
    z_test = np.asarray(z_test, dtype=np.float64)
    y_train = np.asarray(y_train)
    classes, codes = np.unique(y_train, return_inverse=True)
    out = np.empty(len(z_test), dtype=y_train.dtype)
    sq_train = np.sum(z_train ** 2, axis=1)
    for s in range(0, len(z_test), chunk):
        q = z_test[s:s + chunk]
        d = np.sum(q ** 2, axis=1)[:, None] - 2 * q @ z_train.T + sq_train[None]
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        votes = np.zeros((len(q), len(classes)), dtype=np.int64)
        np.add.at(votes, (np.repeat(np.arange(len(q)), k), codes[nn].ravel()), 1)
        out[s:s + chunk] = classes[np.argmax(votes, axis=1)]
    return out


def state_accuracy(z_train, labels_train, z_test, labels_test, k=5):
    """Inferred State Accuracy: k-NN from inferred states to true labels."""
    z_train = np.asarray(z_train, dtype=np.float64)
    z_test = np.asarray(z_test, dtype=np.float64)
    labels_train = np.asarray(labels_train)
    labels_test = np.asarray(labels_test)
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(z_train):
        raise ValueError(f"k={k} exceeds the {len(z_train)} training rows")
    if len(labels_train) != len(z_train) or len(labels_test) != len(z_test):
        raise ValueError("each state row needs exactly one label")
    for Z, name in ((z_train, "z_train"), (z_test, "z_test")):
        if np.any(Z < 0) or np.max(np.abs(Z.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError(f"{name} rows must lie on the simplex")
    pred = knn_predict(z_train, labels_train, z_test, k)
    classes = np.unique(np.concatenate([labels_train, labels_test]))
    idx = {c: i for i, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(labels_test, pred):
        conf[idx[t], idx[p]] += 1
    return StateAccuracyReport(float(np.trace(conf) / conf.sum()), k, conf, classes)


def state_usage(Z, labels, presence=0.01, coverage=0.2):
    """Per labelled class, the inferred states that carry more than
    ``presence`` weight in at least ``coverage`` of its time steps.

    Returns ``{label: [(state, ratio), ...]}`` sorted by decreasing ratio.
    """
    if not (0 < presence < 1 and 0 < coverage < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    out = {}
    for c in np.unique(labels):
        ratio = np.mean(Z[labels == c] > presence, axis=0)
        keep = [(int(s), float(ratio[s])) for s in np.flatnonzero(ratio >= coverage)]
        out[c.item()] = sorted(keep, key=lambda p: (-p[1], p[0]))
    return out


# ----------------------------------------------------------------------------
# exports


def write_metrics_csv(path, metrics):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, val in metrics:
            w.writerow([name, repr(float(val)) if isinstance(val, (float, np.floating)) else val])


def write_envelope_csv(path, env: PredictionEnvelope):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon", "start", "dim", "mean", "std"])
        for j in range(env.horizon):
            for t in range(env.mean.shape[1]):
                for n in range(env.mean.shape[2]):
                    w.writerow([j + 1, t, n, repr(float(env.mean[j, t, n])), repr(float(env.std[j, t, n]))])


def write_states_csv(path, Z):
    Z = np.asarray(Z, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"z_{k}" for k in range(Z.shape[1])])
        for t, row in enumerate(Z):
            w.writerow([t] + [repr(float(v)) for v in row])


__all__ = [
    "PredictionEnvelope",
    "StateAccuracyReport",
    "coverage",
    "envelope_width",
    "knn_predict",
    "posterior_states",
    "predict_k",
    "r_squared",
    "smooth",
    "smooth_posterior",
    "state_accuracy",
    "state_usage",
]
