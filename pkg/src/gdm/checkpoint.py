"""Versioned JSON checkpoints.

Arrays are stored by name as ``{"shape": [...], "data": [...]}`` in
row-major order; floats use Python's shortest round-trip representation,
so loading and saving again reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffmath as dm
from .inference import ModelSpec, PosteriorParams, TrainConfig, TrainResult
from .mixture3 import Mixture3Params
from .model import GdmParams

FORMAT_VERSION = 1
KINDS = ("gdm2", "mixture3")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    variant: str
    tau: float
    model: dict
    posterior_variant: Optional[str] = None
    posterior: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    metrics: dict = field(default_factory=dict)
    optimizer: Optional[dict] = None
    trace: list = field(default_factory=list)

    # -- conversions --------------------------------------------------------

    def gdm(self) -> GdmParams:
        if self.kind != "gdm2":
            raise CheckpointError(f"checkpoint holds a {self.kind} model, not gdm2")
        return GdmParams.from_natural(self.model, self.variant, self.tau)

    def mixture3(self) -> Mixture3Params:
        if self.kind != "mixture3":
            raise CheckpointError(f"checkpoint holds a {self.kind} model, not mixture3")
        return Mixture3Params.from_natural(self.model, self.variant, self.tau)

    def posterior_params(self) -> PosteriorParams:
        if self.posterior_variant is None:
            raise CheckpointError("checkpoint has no posterior network")
        return PosteriorParams.from_natural(self.posterior_variant, self.posterior)

    def train_result(self) -> TrainResult:
        opt = dm.AdamState()
        if self.optimizer is not None:
            opt = dm.AdamState(int(self.optimizer["step"]), dict(self.optimizer["m"]), dict(self.optimizer["v"]))
        return TrainResult(self.gdm(), self.posterior_params(), [tuple(r) for r in self.trace], opt,
                           int(self.config.get("completed_steps", len(self.trace))))

    @classmethod
    def from_gdm(cls, gdm: GdmParams, posterior: PosteriorParams | None = None, **kw):
        return cls("gdm2", gdm.transition.variant, gdm.tau, gdm.natural(),
                   None if posterior is None else posterior.variant,
                   {} if posterior is None else posterior.natural(), **kw)

    @classmethod
    def from_mixture3(cls, m3: Mixture3Params, **kw):
        return cls("mixture3", m3.transition.variant, m3.tau, m3.natural(), **kw)

    @classmethod
    def from_train_result(cls, result: TrainResult, spec: ModelSpec, config: TrainConfig, metrics=None):
        cfg = {
            "K": spec.K, "D": spec.D, "variant": spec.variant, "hidden": spec.hidden, "width": spec.width,
            "gamma": spec.gamma, "init_scale": spec.init_scale,
            "learning_rate": config.learning_rate, "decay_every": config.decay_every,
            "decay_factor": config.decay_factor, "tau": config.tau, "gradient_clip": config.gradient_clip,
            "elbo_samples": config.elbo_samples, "completed_steps": result.step,
        }
        opt = result.opt_state
        optimizer = {"step": opt.step, "m": dict(opt.m), "v": dict(opt.v)}
        return cls.from_gdm(result.model, result.posterior, config=cfg, seed=config.seed,
                            metrics=dict(metrics or {}), optimizer=optimizer, trace=list(result.trace))

    # -- document -----------------------------------------------------------

    def to_document(self) -> dict:
        doc = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "variant": self.variant,
            "tau": float(self.tau),
            "model": _encode_arrays(self.model),
            "config": self.config,
            "seed": self.seed,
            "metrics": {k: _scalar(v) for k, v in self.metrics.items()},
            "trace": [[int(s), float(e), float(g)] for s, e, g in self.trace],
        }
        if self.posterior_variant is not None:
            doc["posterior_variant"] = self.posterior_variant
            doc["posterior"] = _encode_arrays(self.posterior)
        if self.optimizer is not None:
            doc["optimizer"] = {
                "step": int(self.optimizer["step"]),
                "m": _encode_arrays(self.optimizer["m"]),
                "v": _encode_arrays(self.optimizer["v"]),
            }
        return doc

    @classmethod
    def from_document(cls, doc: dict) -> "Checkpoint":
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
        kind = doc.get("kind")
        if kind not in KINDS:
            raise CheckpointError(f"unknown model kind {kind!r}")
        try:
            optimizer = None
            if "optimizer" in doc:
                o = doc["optimizer"]
                optimizer = {"step": o["step"], "m": _decode_arrays(o["m"]), "v": _decode_arrays(o["v"])}
            return cls(
                kind=kind,
                variant=doc["variant"],
                tau=float(doc["tau"]),
                model=_decode_arrays(doc["model"]),
                posterior_variant=doc.get("posterior_variant"),
                posterior=_decode_arrays(doc.get("posterior", {})),
                config=doc.get("config", {}),
                seed=doc.get("seed"),
                metrics=doc.get("metrics", {}),
                optimizer=optimizer,
                trace=[tuple(r) for r in doc.get("trace", [])],
            )
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointError(f"malformed checkpoint: {err}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_document(), sort_keys=True, indent=1, allow_nan=False) + "\n"


def _scalar(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    return v


def _encode_arrays(arrays: dict) -> dict:
    out = {}
    for name, val in arrays.items():
        a = np.asarray(dm.value(val), dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"array {name} has non-finite entries")
        out[name] = {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
    return out


def _decode_arrays(doc: dict) -> dict:
    out = {}
    for name, enc in doc.items():
        shape = tuple(int(s) for s in enc["shape"])
        data = np.array(enc["data"], dtype=np.float64)
        if data.size != math.prod(shape):
            raise CheckpointError(f"array {name}: {data.size} values do not fill shape {shape}")
        out[name] = data.reshape(shape)
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ckpt.dumps())


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: not a checkpoint document ({err.msg} at line {err.lineno})") from None
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: not a checkpoint document")
    return Checkpoint.from_document(doc)


__all__ = ["Checkpoint", "CheckpointError", "FORMAT_VERSION", "load_checkpoint", "save_checkpoint"]
