"""Convert a three-level mixture model to a two-level GDM and back.

    python3 demos/equivalence_demo.py
"""

import numpy as np

from gdm.mixture3 import Mixture3Params, simulate3, to_gdm, to_mixture3
from gdm.model import Transition, simulate


def main():
    r = np.random.default_rng(0)
    K, D, N = 3, 2, 5
    A = np.stack([0.9 * np.linalg.qr(r.standard_normal((D, D)))[0] for _ in range(K)])
    m3 = Mixture3Params(prior_logits=np.zeros(K), mu_x=r.standard_normal((K, D)), A=A,
                        c=0.1 * r.standard_normal((K, D)), C=r.standard_normal((N, D)), Q=np.zeros(N),
                        transition=Transition.init("sticky-linear", K, D, r, scale=0.8, gamma=0.4), tau=0.5)
    gdm = to_gdm(m3)
    back = to_mixture3(gdm)
    print("round-trip max error:", max(np.abs(back.A - m3.A).max(), np.abs(back.c - m3.c).max()))
    _, _, y3 = simulate3(m3, np.random.default_rng(1), 100)
    _, y2 = simulate(gdm, np.random.default_rng(1), 100)
    print("noiseless trajectories max difference:", np.abs(y3 - y2).max())


if __name__ == "__main__":
    main()
