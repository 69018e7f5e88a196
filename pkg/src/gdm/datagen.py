"""NASCAR track generator and CSV import/export of observation series.

The track has four primitives: two 7.5 degree rotations about the turn
centres (+-2, 0) and two constant-velocity straights.  Which primitive is
active is decided by a linear classifier of the current position with very
large logits, so at small temperature the states are effectively one-hot.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .gumbel import relax, sample_gumbel
from .mixture3 import Mixture3Params, latent_step
from .model import Transition, transition_step

STANDARD = "standard"
SOFT_STICKY = "soft-sticky"
NASCAR_VARIANTS = (STANDARD, SOFT_STICKY)

TURN_CENTRES = (np.array([2.0, 0.0]), np.array([-2.0, 0.0]))
CLASSIFIER_W = np.array([[10.0, 0.0], [-10.0, 0.0], [0.0, 10.0], [0.0, -10.0]])
CLASSIFIER_B = np.array([-20.0, -20.0, -10.0, -10.0])
STRAIGHT_OFFSETS = (np.array([0.1, 0.0]), np.array([-0.25, 0.0]))
TURN_ANGLE = math.pi / 24
# every state starts from the top straight, on the nominal unit-radius track
START = np.array([0.0, 1.0])


@dataclass(frozen=True)
class NascarConstants:
    W: np.ndarray
    r: np.ndarray
    A: np.ndarray
    c: np.ndarray
    turn_centres: tuple


def nascar_constants() -> NascarConstants:
    rot = expm(np.array([[0.0, TURN_ANGLE], [-TURN_ANGLE, 0.0]]))
    eye = np.eye(2)
    A = np.stack([rot, rot, eye, eye])
    c = np.stack([
        -(rot - eye) @ TURN_CENTRES[0],
        -(rot - eye) @ TURN_CENTRES[1],
        STRAIGHT_OFFSETS[0],
        STRAIGHT_OFFSETS[1],
    ])
    return NascarConstants(CLASSIFIER_W.copy(), CLASSIFIER_B.copy(), A, c, TURN_CENTRES)


@dataclass
class NascarConfig:
    """Generator settings.

    ``tau``, ``softness`` and ``stickiness`` default per variant when left
    as ``None`` (standard: 0.01 / 1 / 0; soft-sticky: 0.99 / 0.25 / 0.6).
    The emission matrix comes from ``emission_seed`` (default ``seed``) so
    several trials can share one observation map.
    """

    variant: str = STANDARD
    T: int = 1000
    tau: Optional[float] = None
    softness: Optional[float] = None
    stickiness: Optional[float] = None
    s_min: float = 1.0
    n_obs: int = 10
    obs_noise: float = 0.05
    seed: int = 0
    emission_seed: Optional[int] = None

    def __post_init__(self):
        if self.variant not in NASCAR_VARIANTS:
            raise ValueError(f"unknown NASCAR variant {self.variant!r}; expected one of {NASCAR_VARIANTS}")
        soft = self.variant == SOFT_STICKY
        if self.tau is None:
            self.tau = 0.99 if soft else 0.01
        if self.softness is None:
            self.softness = 0.25 if soft else 1.0
        if self.stickiness is None:
            self.stickiness = 0.6 if soft else 0.0
        if self.emission_seed is None:
            self.emission_seed = self.seed
        if self.T < 1:
            raise ValueError(f"T must be at least 1, got {self.T}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.stickiness < 1.0:
            raise ValueError(f"stickiness must lie in [0, 1), got {self.stickiness}")
        if self.softness <= 0:
            raise ValueError(f"softness must be positive, got {self.softness}")
        if not 0.0 < self.s_min <= 1.0:
            raise ValueError(f"s_min must lie in (0, 1], got {self.s_min}")
        if self.n_obs < 2:
            raise ValueError(f"need at least 2 observation dimensions, got {self.n_obs}")
        if self.obs_noise < 0:
            raise ValueError("observation noise must be non-negative")


def emission_matrix(n_obs, seed):
    return np.random.default_rng([seed, 4]).standard_normal((n_obs, 2)) / math.sqrt(2.0)


def nascar_params(config: NascarConfig | None = None) -> Mixture3Params:
    """Ground-truth three-level parameters for a configuration."""
    config = NascarConfig() if config is None else config
    k = nascar_constants()
    if config.variant == STANDARD:
        tr = Transition("linear", W=k.W, r=k.r)
    else:
        # c (1 - g)(W x + r) + g z  ==  sticky-linear with (W, r) scaled by c
        tr = Transition("sticky-linear", W=config.softness * k.W, r=config.softness * k.r,
                        gamma=config.stickiness)
    return Mixture3Params(
        prior_logits=np.zeros(4),
        mu_x=np.tile(START, (4, 1)),
        A=k.A,
        c=k.c,
        C=emission_matrix(config.n_obs, config.emission_seed),
        Q=np.full(config.n_obs, config.obs_noise ** 2),
        transition=tr,
        tau=config.tau,
    )


@dataclass
class ObsSeries:
    """Observations ``y`` (T x N) with optional integer labels.

    ``label_names`` maps label codes back to the strings found in a file
    when labels were not numeric.
    """

    y: np.ndarray
    labels: Optional[np.ndarray] = None
    label_names: Optional[tuple] = None
    name: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim != 2:
            raise ValueError(f"observations must be a T x N matrix, got shape {self.y.shape}")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.T,):
                raise ValueError(f"expected {self.T} labels, got shape {self.labels.shape}")

    @property
    def T(self):
        return self.y.shape[0]

    @property
    def N(self):
        return self.y.shape[1]


@dataclass
class NascarTrial:
    series: ObsSeries
    z: np.ndarray
    x: np.ndarray
    speeds: np.ndarray


def generate_nascar(config: NascarConfig | None = None) -> NascarTrial:
    """Simulate one trial; labels are the 1-based argmax of each soft state.

    Independent streams drive the Gumbel noise, the observation noise and
    the segment speeds, so ``s_min = 1`` reproduces the fixed-speed track.
    """
    config = NascarConfig() if config is None else config
    p = nascar_params(config)
    T, K = config.T, 4
    g_rng = np.random.default_rng([config.seed, 1])
    y_rng = np.random.default_rng([config.seed, 2])
    s_rng = np.random.default_rng([config.seed, 3])
    variable = config.s_min < 1.0
    Z = np.empty((T, K))
    X = np.empty((T, 2))
    speeds = np.ones(T)
    speed = 1.0
    scaled = dataclasses.replace(p)
    for t in range(T):
        if t == 0:
            logits = p.prior_logits
        else:
            logits, _ = transition_step(p.transition, Z[t - 1], X[t - 1])
        Z[t] = relax(logits + sample_gumbel(g_rng, K), config.tau)
        if variable and (t == 0 or Z[t].argmax() != Z[t - 1].argmax()):
            speed = s_rng.uniform(config.s_min, 1.0)
            scaled = dataclasses.replace(p, c=speed * p.c)
        speeds[t] = speed
        X[t] = latent_step(scaled, Z[t], None if t == 0 else X[t - 1])
    Y = X @ p.C.T + config.obs_noise * y_rng.standard_normal((T, config.n_obs))
    labels = Z.argmax(axis=1) + 1
    name = f"nascar-{config.variant}-seed{config.seed}"
    return NascarTrial(ObsSeries(Y, labels, name=name), Z, X, speeds)


def nascar_trials(config: NascarConfig, trials=2):
    """Trials with consecutive seeds sharing the first trial's emission matrix."""
    emission = config.emission_seed if config.emission_seed is not None else config.seed
    return [generate_nascar(dataclasses.replace(config, seed=config.seed + i, emission_seed=emission))
            for i in range(trials)]


def region_labels(X, W=CLASSIFIER_W, r=CLASSIFIER_B):
    """1-based index of the largest classifier logit at each position."""
    return np.argmax(np.asarray(X) @ W.T + r, axis=-1) + 1


# ----------------------------------------------------------------------------
# CSV


def write_csv(series: ObsSeries, path):
    """``t,y_0,...,y_{N-1}[,label]`` with shortest round-trip floats."""
    header = ["t"] + [f"y_{i}" for i in range(series.N)]
    if series.labels is not None:
        header.append("label")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for t in range(series.T):
        row = [str(t)] + [repr(float(v)) for v in series.y[t]]
        if series.labels is not None:
            code = int(series.labels[t])
            row.append(series.label_names[code] if series.label_names else str(code))
        w.writerow(row)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


@dataclass
class CsvSchema:
    """What :func:`ingest_csv` expects.

    ``n_obs`` pins the number of ``y_*`` columns; ``label_column`` names the
    label column (``None`` disables labels); ``labels`` lists the allowed
    label values, whose positions become the codes for non-numeric labels;
    ``require_labels`` rejects files without a label column.
    """

    n_obs: Optional[int] = None
    label_column: Optional[str] = "label"
    labels: Optional[Sequence[str]] = None
    require_labels: bool = False


class CsvFormatError(ValueError):
    pass


def _is_int(s):
    try:
        int(s)
    except ValueError:
        return False
    return True


def ingest_csv(path, schema: CsvSchema | None = None) -> ObsSeries:
    schema = CsvSchema() if schema is None else schema
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    y_cols = [i for i, h in enumerate(header) if h.startswith("y_")]
    if not y_cols:
        raise CsvFormatError(f"{path}: header has no y_* columns")
    if schema.n_obs is not None and len(y_cols) != schema.n_obs:
        raise CsvFormatError(f"{path}: expected {schema.n_obs} observation columns, found {len(y_cols)}")
    lab_col = header.index(schema.label_column) if schema.label_column in header else None
    if lab_col is None and schema.require_labels:
        raise CsvFormatError(f"{path}: missing label column {schema.label_column!r}")
    t_col = header.index("t") if "t" in header else None
    body = rows[1:]
    if not body:
        raise CsvFormatError(f"{path}: no data rows")
    Y = np.empty((len(body), len(y_cols)))
    raw_labels, times = [], []
    bad = []
    for n, row in enumerate(body, start=2):
        if len(row) != len(header):
            bad.append(f"row {n}: expected {len(header)} fields, got {len(row)}")
            continue
        try:
            Y[n - 2] = [float(row[i]) for i in y_cols]
            if t_col is not None:
                times.append(float(row[t_col]))
        except ValueError:
            bad.append(f"row {n}: non-numeric value")
            continue
        if not np.all(np.isfinite(Y[n - 2])):
            bad.append(f"row {n}: non-finite value")
        if lab_col is not None:
            raw_labels.append((n, row[lab_col].strip()))
    if bad:
        raise CsvFormatError(f"{path}: " + "; ".join(bad[:10]) + ("; ..." if len(bad) > 10 else ""))
    if times and np.any(np.diff(times) <= 0):
        raise CsvFormatError(f"{path}: rows are not in increasing time order")
    labels = names = None
    if lab_col is not None:
        values = [v for _, v in raw_labels]
        allowed = None if schema.labels is None else [str(v) for v in schema.labels]
        unknown = [n for n, v in raw_labels if allowed is not None and v not in allowed]
        if unknown:
            raise CsvFormatError(f"{path}: unknown label value in rows {unknown[:10]}")
        if all(_is_int(v) for v in values) and (allowed is None or all(_is_int(v) for v in allowed)):
            labels = np.array([int(v) for v in values])
        else:
            names = tuple(allowed) if allowed is not None else tuple(sorted(set(values)))
            code = {v: i for i, v in enumerate(names)}
            labels = np.array([code[v] for v in values])
    return ObsSeries(Y, labels, names, name=os.path.splitext(os.path.basename(str(path)))[0])


@dataclass
class Standardizer:
    """Per-coordinate affine scaling fitted on training series."""

    mean: np.ndarray
    scale: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, series):
        Y = np.concatenate([s.y if isinstance(s, ObsSeries) else np.asarray(s) for s in series])
        sd = Y.std(axis=0)
        return cls(Y.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def apply(self, s):
        if isinstance(s, ObsSeries):
            return dataclasses.replace(s, y=(s.y - self.mean) / self.scale)
        return (np.asarray(s) - self.mean) / self.scale

    def invert(self, y):
        return np.asarray(y) * self.scale + self.mean


__all__ = [
    "CsvFormatError",
    "CsvSchema",
    "NascarConfig",
    "NascarTrial",
    "ObsSeries",
    "Standardizer",
    "generate_nascar",
    "ingest_csv",
    "nascar_constants",
    "nascar_params",
    "nascar_trials",
    "region_labels",
    "write_csv",
]
