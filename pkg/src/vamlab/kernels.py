"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Each public kernel is bound at import time to either the ``_nb_*`` compiled
version or the ``_np_*`` vectorized one (see :mod:`vamlab._accel`).  Both
variants are importable directly so tests and the benchmark can compare them.

The fused ``*_value_grad`` kernels evaluate a loss and its hand-derived
gradient for the low-rank model ``P = softmax_rows(Phi @ Psi.T)``.  They are
what the training loops call; the tape-based losses in :mod:`vamlab.models`
compute the same quantities through :mod:`vamlab.autodiff` and the test suite
pins the two together.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# softmax


def _np_softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@njit
def _nb_softmax_rows(logits):
    n, m = logits.shape
    out = np.empty((n, m))
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, m):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(m):
            e = np.exp(logits[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


def _np_softmax_rows_vjp(S, g):
    return S * (g - (g * S).sum(axis=1, keepdims=True))


@njit
def _nb_softmax_rows_vjp(S, g):
    n, m = S.shape
    out = np.empty((n, m))
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += g[i, j] * S[i, j]
        for j in range(m):
            out[i, j] = S[i, j] * (g[i, j] - acc)
    return out


# ---------------------------------------------------------------------------
# sampling and counting


def _np_sample_next(cdf, states, u):
    out = np.empty(states.shape[0], dtype=np.int64)
    last = cdf.shape[1] - 1
    for s in np.unique(states):
        mask = states == s
        idx = np.searchsorted(cdf[s], u[mask], side="right")
        out[mask] = np.minimum(idx, last)
    return out


@njit
def _nb_sample_next(cdf, states, u):
    N = states.shape[0]
    last = cdf.shape[1] - 1
    out = np.empty(N, dtype=np.int64)
    for i in range(N):
        j = np.searchsorted(cdf[states[i]], u[i], side="right")
        out[i] = j if j < last else last
    return out


def _np_pair_counts(a, b, n):
    flat = np.bincount(a * n + b, minlength=n * n)
    return flat.reshape(n, n).astype(np.float64)


@njit
def _nb_pair_counts(a, b, n):
    out = np.zeros((n, n))
    for i in range(a.shape[0]):
        out[a[i], b[i]] += 1.0
    return out


# ---------------------------------------------------------------------------
# dynamic programming


def _np_value_iteration(P, r, gamma, V, sweeps):
    V = V.copy()
    for _ in range(sweeps):
        V = r + gamma * (P @ V)
    return V


@njit
def _nb_value_iteration(P, r, gamma, V, sweeps):
    n = V.shape[0]
    cur = V.copy()
    nxt = np.empty(n)
    for _ in range(sweeps):
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += P[i, j] * cur[j]
            nxt[i] = r[i] + gamma * acc
        cur, nxt = nxt, cur
    return cur


# ---------------------------------------------------------------------------
# fused loss + gradient for the low-rank model
#
# Count-matrix inputs (N samples, states 0..n-1):
#   c0[x]       number of samples starting in x
#   C[x, y]     number of samples with x0 = x and x1 = y
#   cv[j, x]    sum over samples starting in x of V(x_{j+1})
#   cv2[j, x]   same with V(x_{j+1})**2
#   s1[x], s2[x] first and second moments (summed) of the bootstrap target


def _np_mle_value_grad(Phi, Psi, C, N):
    P = _np_softmax_rows(Phi @ Psi.T)
    logP = np.log(P)
    loss = -np.sum(C * logP) / N
    dlogits = (C.sum(axis=1, keepdims=True) * P - C) / N
    return loss, dlogits.T @ Phi


@njit
def _nb_mle_value_grad(Phi, Psi, C, N):
    P = _nb_softmax_rows(Phi @ np.ascontiguousarray(Psi.T))
    n = P.shape[0]
    loss = 0.0
    dlogits = np.empty((n, n))
    for i in range(n):
        row = 0.0
        for j in range(n):
            row += C[i, j]
            if C[i, j] != 0.0:
                loss -= C[i, j] * np.log(P[i, j])
        for j in range(n):
            dlogits[i, j] = (row * P[i, j] - C[i, j]) / N
    return loss / N, np.ascontiguousarray(dlogits.T) @ Phi


def _np_itervaml_value_grad(Phi, Psi, V, c0, cv, cv2, N):
    h = cv.shape[0]
    P = _np_softmax_rows(Phi @ Psi.T)
    ms = [V]
    for _ in range(h):
        ms.append(P @ ms[-1])
    norm = 1.0 / (N * h)
    loss = 0.0
    for j in range(h):
        m = ms[j + 1]
        loss += np.sum(c0 * m * m - 2.0 * m * cv[j] + cv2[j])
    loss *= norm
    dP = np.zeros_like(P)
    adj = np.zeros_like(V)
    for j in range(h - 1, -1, -1):
        m = ms[j + 1]
        adj = adj + 2.0 * norm * (c0 * m - cv[j])
        dP += np.outer(adj, ms[j])
        adj = P.T @ adj
    dlogits = _np_softmax_rows_vjp(P, dP)
    return loss, dlogits.T @ Phi


@njit
def _nb_itervaml_value_grad(Phi, Psi, V, c0, cv, cv2, N):
    h = cv.shape[0]
    n = V.shape[0]
    P = _nb_softmax_rows(Phi @ np.ascontiguousarray(Psi.T))
    ms = np.empty((h + 1, n))
    ms[0] = V
    for j in range(h):
        ms[j + 1] = P @ ms[j]
    norm = 1.0 / (N * h)
    loss = 0.0
    for j in range(h):
        for x in range(n):
            m = ms[j + 1, x]
            loss += c0[x] * m * m - 2.0 * m * cv[j, x] + cv2[j, x]
    loss *= norm
    dP = np.zeros((n, n))
    adj = np.zeros(n)
    PT = np.ascontiguousarray(P.T)
    for j in range(h - 1, -1, -1):
        for x in range(n):
            adj[x] += 2.0 * norm * (c0[x] * ms[j + 1, x] - cv[j, x])
        for x in range(n):
            for y in range(n):
                dP[x, y] += adj[x] * ms[j, y]
        adj = PT @ adj
    dlogits = _nb_softmax_rows_vjp(P, dP)
    return loss, np.ascontiguousarray(dlogits.T) @ Phi


def _np_muzero_value_grad(Phi, Psi, Vhat, c0, s1, s2, N):
    P = _np_softmax_rows(Phi @ Psi.T)
    m = P @ Vhat
    loss = np.sum(c0 * m * m - 2.0 * m * s1 + s2) / N
    g = 2.0 * (c0 * m - s1) / N
    dV = P.T @ g
    dlogits = _np_softmax_rows_vjp(P, np.outer(g, Vhat))
    return loss, dlogits.T @ Phi, dV


@njit
def _nb_muzero_value_grad(Phi, Psi, Vhat, c0, s1, s2, N):
    P = _nb_softmax_rows(Phi @ np.ascontiguousarray(Psi.T))
    n = P.shape[0]
    m = P @ Vhat
    loss = 0.0
    g = np.empty(n)
    for x in range(n):
        loss += c0[x] * m[x] * m[x] - 2.0 * m[x] * s1[x] + s2[x]
        g[x] = 2.0 * (c0[x] * m[x] - s1[x]) / N
    dV = np.ascontiguousarray(P.T) @ g
    dP = np.empty((n, n))
    for x in range(n):
        for y in range(n):
            dP[x, y] = g[x] * Vhat[y]
    dlogits = _nb_softmax_rows_vjp(P, dP)
    return loss / N, np.ascontiguousarray(dlogits.T) @ Phi, dV


# ---------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    softmax_rows = _nb_softmax_rows
    softmax_rows_vjp = _nb_softmax_rows_vjp
    sample_next = _nb_sample_next
    pair_counts = _nb_pair_counts
    value_iteration = _nb_value_iteration
    mle_value_grad = _nb_mle_value_grad
    itervaml_value_grad = _nb_itervaml_value_grad
    muzero_value_grad = _nb_muzero_value_grad
else:
    softmax_rows = _np_softmax_rows
    softmax_rows_vjp = _np_softmax_rows_vjp
    sample_next = _np_sample_next
    pair_counts = _np_pair_counts
    value_iteration = _np_value_iteration
    mle_value_grad = _np_mle_value_grad
    itervaml_value_grad = _np_itervaml_value_grad
    muzero_value_grad = _np_muzero_value_grad

NUMPY_KERNELS = {
    "softmax_rows": _np_softmax_rows,
    "softmax_rows_vjp": _np_softmax_rows_vjp,
    "sample_next": _np_sample_next,
    "pair_counts": _np_pair_counts,
    "value_iteration": _np_value_iteration,
    "mle_value_grad": _np_mle_value_grad,
    "itervaml_value_grad": _np_itervaml_value_grad,
    "muzero_value_grad": _np_muzero_value_grad,
}

NUMBA_KERNELS = {
    "softmax_rows": _nb_softmax_rows,
    "softmax_rows_vjp": _nb_softmax_rows_vjp,
    "sample_next": _nb_sample_next,
    "pair_counts": _nb_pair_counts,
    "value_iteration": _nb_value_iteration,
    "mle_value_grad": _nb_mle_value_grad,
    "itervaml_value_grad": _nb_itervaml_value_grad,
    "muzero_value_grad": _nb_muzero_value_grad,
}
