"""Fused sequential primitives with hand-written reverse passes.

Sequential sampling of soft states and GRU recurrences would put thousands
of tiny nodes on the tape for a single sequence.  Each scan here is recorded
as one node instead; the loops are compiled with numba.

Gate layout for GRU weights is ``[reset, update, candidate]`` stacked along
the first axis, each block ``H`` rows.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import diffmath as dm


@njit(cache=True)
def _relaxed_row(u, tau, eps, s_out, z_out):
    K = u.shape[0]
    m = u[0]
    for k in range(1, K):
        if u[k] > m:
            m = u[k]
    tot = 0.0
    for k in range(K):
        s_out[k] = np.exp((u[k] - m) / tau)
        tot += s_out[k]
    for k in range(K):
        s_out[k] /= tot
        z_out[k] = eps + (1.0 - K * eps) * s_out[k]


@njit(cache=True)
def _relaxed_row_grad(s, gz, tau, eps, gu_out):
    K = s.shape[0]
    dot = 0.0
    for k in range(K):
        dot += s[k] * gz[k]
    c = (1.0 - K * eps) / tau
    for k in range(K):
        gu_out[k] = c * s[k] * (gz[k] - dot)


# ----------------------------------------------------------------------------
# logits_t = base_t + B z_{t-1}  (t >= 1),  logits_0 = first


@njit(cache=True)
def _sticky_forward(base, B, first, G, tau, eps):
    T, K = G.shape
    Z = np.empty((T, K))
    S = np.empty((T, K))
    u = first + G[0]
    _relaxed_row(u, tau, eps, S[0], Z[0])
    for t in range(1, T):
        u = base[t] + B @ Z[t - 1] + G[t]
        _relaxed_row(u, tau, eps, S[t], Z[t])
    return Z, S


@njit(cache=True)
def _sticky_backward(gZ, Z, S, B, tau, eps):
    T, K = Z.shape
    gbase = np.zeros((T, K))
    gB = np.zeros((K, K))
    gz = gZ.copy()
    gu = np.empty(K)
    for t in range(T - 1, 0, -1):
        _relaxed_row_grad(S[t], gz[t], tau, eps, gu)
        gbase[t] = gu
        gB += np.outer(gu, Z[t - 1])
        gz[t - 1] += B.T @ gu
    gfirst = np.empty(K)
    _relaxed_row_grad(S[0], gz[0], tau, eps, gfirst)
    return gbase, gB, gfirst


def sticky_chain(base, first, gumbels, tau, eps, B=None):
    """Sequential relaxed draws with logits ``base_t + B z_{t-1}``.

    Row 0 of ``base`` is ignored; ``first`` supplies the logits of the first
    draw.  ``B=None`` means no dependence on the previous state.
    """
    vbase = np.ascontiguousarray(dm.value(base), dtype=np.float64)
    T, K = vbase.shape
    vB = np.zeros((K, K)) if B is None else np.ascontiguousarray(dm.value(B), dtype=np.float64)
    vfirst = np.ascontiguousarray(dm.value(first), dtype=np.float64).reshape(K)
    G = np.ascontiguousarray(gumbels, dtype=np.float64)
    if G.shape != (T, K):
        raise dm.ShapeError(f"gumbels have shape {G.shape}, expected {(T, K)}")
    Z, S = _sticky_forward(vbase, vB, vfirst, G, float(tau), float(eps))
    first_shape = np.shape(dm.value(first))

    def vjp(g):
        gbase, gB, gfirst = _sticky_backward(np.ascontiguousarray(g), Z, S, vB, float(tau), float(eps))
        return gbase, (None if B is None else gB), gfirst.reshape(first_shape)

    return dm.custom_op(Z, (base, B, first), vjp)


# ----------------------------------------------------------------------------
# logits_t = W2 tanh(W1z z_{t-1} + E_t) + b2  (t >= 1),  logits_0 = first


@njit(cache=True)
def _fnn_forward(E, W1z, W2, b2, first, G, tau, eps):
    T, K = G.shape
    Hf = E.shape[1]
    Z = np.empty((T, K))
    S = np.empty((T, K))
    A = np.zeros((T, Hf))
    _relaxed_row(first + G[0], tau, eps, S[0], Z[0])
    for t in range(1, T):
        A[t] = np.tanh(W1z @ Z[t - 1] + E[t])
        u = W2 @ A[t] + b2 + G[t]
        _relaxed_row(u, tau, eps, S[t], Z[t])
    return Z, S, A


@njit(cache=True)
def _fnn_backward(gZ, Z, S, A, W1z, W2, tau, eps):
    T, K = Z.shape
    Hf = A.shape[1]
    gE = np.zeros((T, Hf))
    gW1z = np.zeros((Hf, K))
    gW2 = np.zeros((K, Hf))
    gb2 = np.zeros(K)
    gz = gZ.copy()
    gu = np.empty(K)
    for t in range(T - 1, 0, -1):
        _relaxed_row_grad(S[t], gz[t], tau, eps, gu)
        gb2 += gu
        gW2 += np.outer(gu, A[t])
        gpre = (W2.T @ gu) * (1.0 - A[t] * A[t])
        gE[t] = gpre
        gW1z += np.outer(gpre, Z[t - 1])
        gz[t - 1] += W1z.T @ gpre
    gfirst = np.empty(K)
    _relaxed_row_grad(S[0], gz[0], tau, eps, gfirst)
    return gE, gW1z, gW2, gb2, gfirst


def fnn_chain(E, W1z, W2, b2, first, gumbels, tau, eps):
    """Sequential relaxed draws whose logits come from a one-hidden-layer net.

    ``E`` carries the input-dependent part of the hidden pre-activation
    (row 0 ignored); the previous soft state enters through ``W1z``.
    """
    arrs = [np.ascontiguousarray(dm.value(x), dtype=np.float64) for x in (E, W1z, W2, b2, first)]
    vE, vW1z, vW2, vb2, vfirst = arrs
    K = vW2.shape[0]
    G = np.ascontiguousarray(gumbels, dtype=np.float64)
    Z, S, A = _fnn_forward(vE, vW1z, vW2, vb2.reshape(K), vfirst.reshape(K), G, float(tau), float(eps))
    b2_shape, first_shape = vb2.shape, vfirst.shape

    def vjp(g):
        gE, gW1z, gW2, gb2, gfirst = _fnn_backward(
            np.ascontiguousarray(g), Z, S, A, vW1z, vW2, float(tau), float(eps)
        )
        return gE, gW1z, gW2, gb2.reshape(b2_shape), gfirst.reshape(first_shape)

    return dm.custom_op(Z, (E, W1z, W2, b2, first), vjp)


# ----------------------------------------------------------------------------
# GRU over a precomputed input projection Xg = X Wx^T + bx


@njit(cache=True)
def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


@njit(cache=True)
def _gru_forward(Xg, Wh, bh, h0):
    L = Xg.shape[0]
    H = h0.shape[0]
    Hs = np.empty((L, H))
    R = np.empty((L, H))
    U = np.empty((L, H))
    Nn = np.empty((L, H))
    HHn = np.empty((L, H))
    h = h0.copy()
    for t in range(L):
        hh = Wh @ h + bh
        r = _sig(Xg[t, :H] + hh[:H])
        u = _sig(Xg[t, H : 2 * H] + hh[H : 2 * H])
        n = np.tanh(Xg[t, 2 * H :] + r * hh[2 * H :])
        h = (1.0 - u) * n + u * h
        Hs[t] = h
        R[t] = r
        U[t] = u
        Nn[t] = n
        HHn[t] = hh[2 * H :]
    return Hs, R, U, Nn, HHn


@njit(cache=True)
def _gru_backward(gHs, Hs, R, U, Nn, HHn, Wh, h0):
    L, H = Hs.shape
    gXg = np.zeros((L, 3 * H))
    gWh = np.zeros((3 * H, H))
    gbh = np.zeros(3 * H)
    carry = np.zeros(H)
    ghh = np.empty(3 * H)
    for t in range(L - 1, -1, -1):
        hprev = h0 if t == 0 else Hs[t - 1]
        gh = gHs[t] + carry
        r, u, n = R[t], U[t], Nn[t]
        gpre_n = gh * (1.0 - u) * (1.0 - n * n)
        gpre_u = gh * (n * -1.0 + hprev) * u * (1.0 - u)
        gpre_r = gpre_n * HHn[t] * r * (1.0 - r)
        gXg[t, :H] = gpre_r
        gXg[t, H : 2 * H] = gpre_u
        gXg[t, 2 * H :] = gpre_n
        ghh[:H] = gpre_r
        ghh[H : 2 * H] = gpre_u
        ghh[2 * H :] = gpre_n * r
        gWh += np.outer(ghh, hprev)
        gbh += ghh
        carry = gh * u + Wh.T @ ghh
    return gXg, gWh, gbh, carry


def gru_scan(Xg, Wh, bh, h0=None):
    """Run a GRU over input projections ``Xg`` (L x 3H); returns hidden states (L x H)."""
    vXg = np.ascontiguousarray(dm.value(Xg), dtype=np.float64)
    vWh = np.ascontiguousarray(dm.value(Wh), dtype=np.float64)
    H = vWh.shape[1]
    vbh = np.ascontiguousarray(dm.value(bh), dtype=np.float64)
    bh_shape = vbh.shape
    vh0 = np.zeros(H) if h0 is None else np.ascontiguousarray(dm.value(h0), dtype=np.float64).reshape(H)
    if vXg.ndim != 2 or vXg.shape[1] != 3 * H or vWh.shape != (3 * H, H):
        raise dm.ShapeError(f"gru_scan: inputs {vXg.shape} and recurrent weights {vWh.shape} disagree")
    if vXg.shape[0] == 0:
        return np.zeros((0, H))
    Hs, R, U, Nn, HHn = _gru_forward(vXg, vWh, vbh.reshape(3 * H), vh0)

    def vjp(g):
        gXg, gWh, gbh, gh0 = _gru_backward(np.ascontiguousarray(g), Hs, R, U, Nn, HHn, vWh, vh0)
        return gXg, gWh, gbh.reshape(bh_shape), (None if h0 is None else gh0.reshape(np.shape(dm.value(h0))))

    return dm.custom_op(Hs, (Xg, Wh, bh, h0), vjp)


def gru_step(h, x, Wx, bx, Wh, bh):
    """Single GRU update in plain numpy; ``x`` may carry leading batch axes."""
    H = Wh.shape[1]
    xg = x @ Wx.T + bx
    hh = h @ Wh.T + bh
    r = 1.0 / (1.0 + np.exp(-(xg[..., :H] + hh[..., :H])))
    u = 1.0 / (1.0 + np.exp(-(xg[..., H : 2 * H] + hh[..., H : 2 * H])))
    n = np.tanh(xg[..., 2 * H :] + r * hh[..., 2 * H :])
    return (1.0 - u) * n + u * h
