import numpy as np
import pytest

from gdm import diffmath as dm
from gdm import scans
from gdm.gumbel import EPS_Z, relax

from conftest import check_grads

R = np.random.default_rng(11)
T, K, H, WID = 5, 3, 2, 4


def loop_sticky(base, first, G, tau, B):
    Z = [relax(first + G[0], tau)]
    for t in range(1, len(G)):
        Z.append(relax(base[t] + B @ Z[-1] + G[t], tau))
    return np.array(Z)


def loop_fnn(E, W1z, W2, b2, first, G, tau):
    Z = [relax(first + G[0], tau)]
    for t in range(1, len(G)):
        Z.append(relax(W2 @ np.tanh(W1z @ Z[-1] + E[t]) + b2 + G[t], tau))
    return np.array(Z)


def loop_gru(Xg, Wh, bh, h0):
    h, out = h0, []
    for x in Xg:
        hh = Wh @ h + bh
        r = 1 / (1 + np.exp(-(x[:H] + hh[:H])))
        u = 1 / (1 + np.exp(-(x[H:2 * H] + hh[H:2 * H])))
        n = np.tanh(x[2 * H:] + r * hh[2 * H:])
        h = (1 - u) * n + u * h
        out.append(h)
    return np.array(out)


G = R.standard_normal((T, K))
BASE = R.standard_normal((T, K))
FIRST = R.standard_normal(K)
BM = 0.5 * R.standard_normal((K, K))
E = R.standard_normal((T, WID))
W1Z = R.standard_normal((WID, K))
W2 = R.standard_normal((K, WID))
B2 = R.standard_normal(K)
XG = R.standard_normal((T, 3 * H))
WH = R.standard_normal((3 * H, H))
BH = R.standard_normal(3 * H)
H0 = R.standard_normal(H)
WEIGHT = R.standard_normal((T, K))


def test_sticky_chain_matches_loop():
    Z = scans.sticky_chain(BASE, FIRST, G, 0.7, EPS_Z, B=BM)
    assert np.allclose(Z, loop_sticky(BASE, FIRST, G, 0.7, BM), atol=1e-14)


def test_sticky_chain_without_B_is_independent_rows():
    Z = scans.sticky_chain(BASE, FIRST, G, 0.7, EPS_Z)
    assert np.allclose(Z, loop_sticky(BASE, FIRST, G, 0.7, np.zeros((K, K))), atol=1e-14)


def test_fnn_chain_matches_loop():
    Z = scans.fnn_chain(E, W1Z, W2, B2, FIRST, G, 0.8, EPS_Z)
    assert np.allclose(Z, loop_fnn(E, W1Z, W2, B2, FIRST, G, 0.8), atol=1e-14)


def test_gru_scan_matches_loop_and_step():
    Hs = scans.gru_scan(XG, WH, BH, H0)
    assert np.allclose(Hs, loop_gru(XG, WH, BH, H0), atol=1e-14)
    Wx = np.eye(3 * H)[:, :3 * H]
    assert np.allclose(scans.gru_step(H0, XG[0], Wx, 0.0, WH, BH), Hs[0], atol=1e-14)


def test_gru_scan_empty_and_shape_errors():
    assert scans.gru_scan(np.zeros((0, 3 * H)), WH, BH).shape == (0, H)
    with pytest.raises(dm.ShapeError):
        scans.gru_scan(np.zeros((T, 2 * H)), WH, BH)
    with pytest.raises(dm.ShapeError):
        scans.sticky_chain(BASE, FIRST, G[:-1], 0.7, EPS_Z)


def test_sticky_chain_grads():
    f = lambda p: dm.sum(dm.mul(scans.sticky_chain(p["base"], p["first"], G, 0.7, EPS_Z, B=p["B"]), WEIGHT))
    check_grads(f, {"base": BASE, "first": FIRST, "B": BM})


def test_fnn_chain_grads():
    def f(p):
        Z = scans.fnn_chain(p["E"], p["W1z"], p["W2"], p["b2"], p["first"], G, 0.8, EPS_Z)
        return dm.sum(dm.mul(Z, WEIGHT))

    check_grads(f, {"E": E, "W1z": W1Z, "W2": W2, "b2": B2, "first": FIRST})


def test_gru_scan_grads():
    w = R.standard_normal((T, H))
    f = lambda p: dm.sum(dm.mul(scans.gru_scan(p["Xg"], p["Wh"], p["bh"], p["h0"]), w))
    check_grads(f, {"Xg": XG, "Wh": WH, "bh": BH, "h0": H0})
