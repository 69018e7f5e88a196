"""Command-line interface: ``gdm generate|train|eval|predict|convert``.

Every failure prints one line ``error: <message>`` on stderr and exits
with a nonzero status.  ``GDM_SEED`` sets the default seed.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ck
from . import datagen, evalpred
from .inference import ModelSpec, TrainConfig, TrainingDiverged, amortized_apply, train
from .mixture3 import to_gdm, to_mixture3
from .model import VARIANTS

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _default_seed():
    raw = os.environ.get("GDM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"GDM_SEED must be an integer, got {raw!r}") from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def _series_files(pattern):
    files = sorted(glob.glob(pattern))
    if not files:
        raise CliError(f"no data files match {pattern!r}")
    return files


def _load_series(pattern, schema=None):
    return [datagen.ingest_csv(f, schema) for f in _series_files(pattern)]


def _json_dump(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ----------------------------------------------------------------------------
# commands


def cmd_generate(args):
    if args.dataset != "nascar":
        raise CliError(f"unknown dataset {args.dataset!r}")
    if args.K != 4:
        raise CliError(f"the NASCAR track has exactly 4 states, got --K {args.K}")
    try:
        cfg = datagen.NascarConfig(variant=args.variant, T=args.T, tau=args.tau, softness=args.softness,
                                   stickiness=args.stickiness, s_min=args.s_min, n_obs=args.n_obs,
                                   obs_noise=args.obs_noise, seed=args.seed)
    except ValueError as err:
        raise CliError(str(err)) from None
    os.makedirs(args.out, exist_ok=True)
    files = []
    for i, trial in enumerate(datagen.nascar_trials(cfg, args.trials)):
        name = f"trial_{i}.csv"
        datagen.write_csv(trial.series, os.path.join(args.out, name))
        files.append({"file": name, "seed": cfg.seed + i, "T": trial.series.T})
    manifest = {
        "dataset": "nascar",
        "variant": cfg.variant,
        "T": cfg.T,
        "K": 4,
        "n_obs": cfg.n_obs,
        "obs_noise": cfg.obs_noise,
        "tau": cfg.tau,
        "softness": cfg.softness,
        "stickiness": cfg.stickiness,
        "s_min": cfg.s_min,
        "seed": cfg.seed,
        "emission_seed": cfg.emission_seed,
        "trials": files,
    }
    _json_dump(os.path.join(args.out, "manifest.json"), manifest)
    return 0


def _write_trace(path, trace):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,elbo,grad_norm\n")
        for step, elbo, gnorm in trace:
            fh.write(f"{int(step)},{float(elbo)!r},{float(gnorm)!r}\n")


def cmd_train(args):
    series = _load_series(args.data)
    N = series[0].N
    if any(s.N != N for s in series):
        raise CliError("training files disagree on the observation dimension")
    if args.D > N:
        raise CliError(f"latent dimension --D {args.D} exceeds the observation dimension {N}")
    Ys = [s.y for s in series]
    config = TrainConfig(steps=args.steps, learning_rate=args.lr, seed=args.seed, tau=args.temp,
                         checkpoint_every=args.checkpoint_every)
    if args.resume:
        prev = ck.load_checkpoint(args.resume)
        resume = prev.train_result()
        cfg = prev.config
        spec = ModelSpec(K=int(cfg["K"]), D=int(cfg["D"]), variant=cfg["variant"], hidden=int(cfg["hidden"]),
                         width=int(cfg["width"]), gamma=float(cfg["gamma"]), init_scale=float(cfg["init_scale"]))
        if resume.model.N != N:
            raise CliError(f"checkpoint expects {resume.model.N}-dimensional data, files have {N}")
        config.seed = prev.seed if prev.seed is not None else config.seed
        config.tau = prev.tau
    else:
        resume = None
        spec = ModelSpec(K=args.K, D=args.D, variant=args.variant)
    trace_path = args.trace or os.path.splitext(args.out)[0] + ".trace.csv"

    def snapshot(result):
        ck.save_checkpoint(args.out, ck.Checkpoint.from_train_result(result, spec, config))

    try:
        result = train(Ys, spec, config, resume=resume, callback=snapshot)
    except TrainingDiverged as err:
        snapshot(err.last_good)
        raise CliError(f"{err}; last good state saved to {args.out}") from None
    rng = np.random.default_rng([config.seed, 0xE7A1])
    r2 = [evalpred.smooth_posterior(result.model, result.posterior, y, rng)[1] for y in Ys]
    metrics = {"train_r2": float(np.mean(r2)), "steps": result.step,
               "final_elbo": float(result.trace[-1][1]) if result.trace else float("nan")}
    if not np.isfinite(metrics["final_elbo"]):
        del metrics["final_elbo"]
    ck.save_checkpoint(args.out, ck.Checkpoint.from_train_result(result, spec, config, metrics))
    _write_trace(trace_path, result.trace)
    return 0


def _load_model(path):
    c = ck.load_checkpoint(path)
    if c.kind != "gdm2":
        raise CliError(f"{path} holds a {c.kind} model; convert it to gdm2 first")
    return c, c.gdm(), c.posterior_params()


def cmd_eval(args):
    _, gdm, post = _load_model(args.ckpt)
    schema = datagen.CsvSchema(n_obs=gdm.N, require_labels=True)
    try:
        train_s = _load_series(args.train_data, schema)
        test_s = _load_series(args.test_data, schema)
    except datagen.CsvFormatError as err:
        if "missing label column" in str(err):
            raise CliError(f"state accuracy needs labelled data: {err}") from None
        raise
    rng = np.random.default_rng([args.seed, 0xE7A1])
    os.makedirs(args.out, exist_ok=True)

    def infer(series):
        zs, r2 = [], []
        for s in series:
            z = amortized_apply(post, s.y, gdm.tau, rng)
            zs.append(z)
            r2.append(evalpred.smooth(gdm, z, s.y)[1])
        return zs, float(np.mean(r2))

    z_tr, r2_tr = infer(train_s)
    z_te, r2_te = infer(test_s)
    lab_tr = np.concatenate([s.labels for s in train_s])
    lab_te = np.concatenate([s.labels for s in test_s])
    rep = evalpred.state_accuracy(np.concatenate(z_tr), lab_tr, np.concatenate(z_te), lab_te, args.knn_k)
    evalpred.write_metrics_csv(os.path.join(args.out, "metrics.csv"), [
        ("train_r2", r2_tr), ("test_r2", r2_te), ("state_accuracy", rep.accuracy), ("knn_k", rep.k_neighbors),
    ])
    with open(os.path.join(args.out, "confusion.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("true,predicted,count\n")
        for i, a in enumerate(rep.classes):
            for j, b in enumerate(rep.classes):
                fh.write(f"{a},{b},{int(rep.confusion[i, j])}\n")
    usage = evalpred.state_usage(np.concatenate(z_te), lab_te, args.presence, args.coverage)
    with open(os.path.join(args.out, "state_usage.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("label,rank,state,presence_ratio\n")
        for lab, states in usage.items():
            for rank, (state, ratio) in enumerate(states):
                fh.write(f"{lab},{rank},{state},{ratio!r}\n")
    for tag, zs, series in (("train", z_tr, train_s), ("test", z_te, test_s)):
        for z, s in zip(zs, series):
            evalpred.write_states_csv(os.path.join(args.out, f"states_{tag}_{s.name}.csv"), z)
    return 0


def cmd_predict(args):
    _, gdm, post = _load_model(args.ckpt)
    series = datagen.ingest_csv(args.data, datagen.CsvSchema(n_obs=gdm.N))
    rng = np.random.default_rng([args.seed, 0x9ED1])
    env = evalpred.predict_k(gdm, post, series.y, args.horizon, rng, M=args.rollouts)
    evalpred.write_envelope_csv(args.out, env)
    if args.summary:
        rows = []
        for j in range(env.horizon):
            rows.append((f"coverage_h{j + 1}", evalpred.coverage(env, series.y, j, args.width)))
            rows.append((f"width_h{j + 1}", evalpred.envelope_width(env, j)))
        evalpred.write_metrics_csv(args.summary, rows)
    return 0


def cmd_convert(args):
    c = ck.load_checkpoint(args.ckpt)
    if args.to == "mixture3":
        if c.kind != "gdm2":
            raise CliError(f"{args.ckpt} already holds a {c.kind} model")
        out = ck.Checkpoint.from_mixture3(to_mixture3(c.gdm()), config=c.config, seed=c.seed, metrics=c.metrics)
    else:
        if c.kind != "mixture3":
            raise CliError(f"{args.ckpt} already holds a {c.kind} model")
        out = ck.Checkpoint.from_gdm(to_gdm(c.mixture3()), config=c.config, seed=c.seed, metrics=c.metrics)
    ck.save_checkpoint(args.out, out)
    return 0


# ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="gdm", description="Gumbel dynamical models")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("dataset", choices=["nascar"])
    g.add_argument("--variant", choices=datagen.NASCAR_VARIANTS, default=datagen.STANDARD)
    g.add_argument("--T", type=_positive_int, default=1000)
    g.add_argument("--K", type=_positive_int, default=4)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--trials", type=_positive_int, default=2)
    g.add_argument("--n-obs", type=_positive_int, default=10)
    g.add_argument("--obs-noise", type=float, default=0.05)
    g.add_argument("--tau", type=_positive_float, default=None)
    g.add_argument("--softness", type=_positive_float, default=None)
    g.add_argument("--stickiness", type=float, default=None)
    g.add_argument("--s-min", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model by GS-BBVI")
    t.add_argument("--data", required=True, help="glob of training CSV files")
    t.add_argument("--K", type=_positive_int, default=4)
    t.add_argument("--D", type=_positive_int, default=2)
    t.add_argument("--variant", choices=VARIANTS, default="sticky-linear")
    t.add_argument("--temp", type=_positive_float, default=0.99)
    t.add_argument("--steps", type=_nonneg_int, default=6000)
    t.add_argument("--lr", type=_positive_float, default=1e-2)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--checkpoint-every", type=_nonneg_int, default=0)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--trace", default=None, help="loss-trace CSV (default: next to the checkpoint)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="fit and state metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--train-data", required=True)
    e.add_argument("--test-data", required=True)
    e.add_argument("--knn-k", type=_positive_int, default=5)
    e.add_argument("--presence", type=float, default=0.01)
    e.add_argument("--coverage", type=float, default=0.2)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="k-step prediction envelopes")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--horizon", type=_positive_int, default=1)
    pr.add_argument("--rollouts", type=int, default=64)
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--width", type=_positive_float, default=3.0)
    pr.add_argument("--summary", default=None, help="optional coverage/width metrics CSV")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("convert", help="switch between two- and three-level parameterisations")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--to", choices=["mixture3", "gdm2"], required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        if args.command == "predict" and args.rollouts < 2:
            raise CliError(f"--rollouts must be at least 2 for a spread, got {args.rollouts}")
        if args.command == "eval" and not (0 < args.presence < 1 and 0 < args.coverage < 1):
            raise CliError("--presence and --coverage must lie in (0, 1)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(message)s")
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, np.linalg.LinAlgError, FloatingPointError) as err:
        msg = " ".join(str(err).split())
        print(f"error: {type(err).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
