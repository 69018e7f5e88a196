"""Fit a GDM to standard NASCAR and report fit, state accuracy and envelopes.

    python3 demos/nascar_demo.py [--variant soft-sticky] [--steps 6000] [--seed 0]
"""

import argparse
import time

import numpy as np

from gdm import datagen, evalpred, inference


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--variant", choices=datagen.NASCAR_VARIANTS, default=datagen.STANDARD)
    p.add_argument("--steps", type=int, default=6000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    train_t, test_t = datagen.nascar_trials(datagen.NascarConfig(variant=args.variant, seed=100 * args.seed))
    t0 = time.perf_counter()
    result = inference.train([train_t.series.y], inference.ModelSpec(K=4, D=2),
                             inference.TrainConfig(steps=args.steps, seed=args.seed))
    print(f"trained {result.step} steps in {time.perf_counter() - t0:.0f}s, final ELBO/T {result.trace[-1][1]:.3f}")

    rng = np.random.default_rng([args.seed, 0xE7A1])
    _, r2_tr, z_tr = evalpred.smooth_posterior(result.model, result.posterior, train_t.series.y, rng)
    _, r2_te, z_te = evalpred.smooth_posterior(result.model, result.posterior, test_t.series.y, rng)
    acc = evalpred.state_accuracy(z_tr[0], train_t.series.labels, z_te[0], test_t.series.labels, k=5)
    env = evalpred.predict_k(result.model, result.posterior, test_t.series.y, 1, rng, M=64)
    print(f"R2 train {r2_tr:.4f} test {r2_te:.4f}")
    print(f"state accuracy {acc.accuracy:.3f}")
    print(f"1-step coverage {evalpred.coverage(env, test_t.series.y):.3f} width {evalpred.envelope_width(env):.4f}")
    print("confusion (rows true 1..4):")
    print(acc.confusion)


if __name__ == "__main__":
    main()
