"""Hot inner kernels for sparse expert dispatch, combine, and their backward.

Two interchangeable backends:

* ``numba`` — ``@njit``-compiled loops (default when numba imports cleanly),
* ``numpy`` — pure-numpy reference path with identical semantics.

Select with the ``MOELAB_BACKEND`` environment variable (``auto`` / ``numba`` /
``numpy``). Both backends iterate experts in ascending index order and tokens
in selection order, so results are deterministic per backend.

Selections arrive pre-sorted by expert: ``tok[i]`` is the token row of the
i-th selection, ``w[i]`` its combine weight, and ``seg[e]:seg[e+1]`` the slice
of selections belonging to expert ``e``. Expert weights are stacked as
``w1[e] (h, d)``, ``b1[e] (d,)``, ``w2[e] (d, h)``, ``b2[e] (h,)``.
"""

from __future__ import annotations

import os

import numpy as np


def _dispatch_forward_np(x, tok, w, seg, w1, b1, w2, b2):
    n_experts = w1.shape[0]
    m = tok.shape[0]
    t, h = x.shape
    d = w1.shape[2]
    y = np.zeros((t, h))
    hid = np.zeros((m, d))
    rows = np.zeros((m, h))
    for e in range(n_experts):
        lo, hi = seg[e], seg[e + 1]
        if lo == hi:
            continue
        idx = tok[lo:hi]
        hs = np.maximum(x[idx] @ w1[e] + b1[e], 0.0)
        os_ = hs @ w2[e] + b2[e]
        hid[lo:hi] = hs
        rows[lo:hi] = os_
        np.add.at(y, idx, w[lo:hi, None] * os_)
    return y, hid, rows


def _dispatch_backward_np(gy, x, tok, w, seg, w1, w2, hid, rows):
    n_experts = w1.shape[0]
    gx = np.zeros_like(x)
    gw1 = np.zeros_like(w1)
    gb1 = np.zeros(w1.shape[2] * n_experts).reshape(n_experts, w1.shape[2])
    gw2 = np.zeros_like(w2)
    gb2 = np.zeros((n_experts, w2.shape[2]))
    gw = np.zeros_like(w)
    for e in range(n_experts):
        lo, hi = seg[e], seg[e + 1]
        if lo == hi:
            continue
        idx = tok[lo:hi]
        g_rows = gy[idx]
        gw[lo:hi] = (rows[lo:hi] * g_rows).sum(axis=1)
        g_out = w[lo:hi, None] * g_rows
        hs = hid[lo:hi]
        gw2[e] = hs.T @ g_out
        gb2[e] = g_out.sum(axis=0)
        gh = (g_out @ w2[e].T) * (hs > 0.0)
        xs = x[idx]
        gw1[e] = xs.T @ gh
        gb1[e] = gh.sum(axis=0)
        np.add.at(gx, idx, gh @ w1[e].T)
    return gx, gw1, gb1, gw2, gb2, gw


def _make_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def dispatch_forward(x, tok, w, seg, w1, b1, w2, b2):
        n_experts = w1.shape[0]
        m = tok.shape[0]
        t = x.shape[0]
        h = x.shape[1]
        d = w1.shape[2]
        y = np.zeros((t, h))
        hid = np.zeros((m, d))
        rows = np.zeros((m, h))
        for e in range(n_experts):
            lo, hi = seg[e], seg[e + 1]
            if lo == hi:
                continue
            xs = np.empty((hi - lo, h))
            for i in range(lo, hi):
                xs[i - lo] = x[tok[i]]
            hs = np.dot(xs, w1[e])
            for i in range(hs.shape[0]):
                for j in range(d):
                    v = hs[i, j] + b1[e, j]
                    hs[i, j] = v if v > 0.0 else 0.0
            os_ = np.dot(hs, w2[e])
            for i in range(lo, hi):
                ti = tok[i]
                wi = w[i]
                hid[i] = hs[i - lo]
                for j in range(h):
                    o = os_[i - lo, j] + b2[e, j]
                    rows[i, j] = o
                    y[ti, j] += wi * o
        return y, hid, rows

    @njit(cache=True)
    def dispatch_backward(gy, x, tok, w, seg, w1, w2, hid, rows):
        n_experts = w1.shape[0]
        t = x.shape[0]
        h = x.shape[1]
        d = w1.shape[2]
        gx = np.zeros((t, h))
        gw1 = np.zeros(w1.shape)
        gb1 = np.zeros((n_experts, d))
        gw2 = np.zeros(w2.shape)
        gb2 = np.zeros((n_experts, h))
        gw = np.zeros(w.shape)
        for e in range(n_experts):
            lo, hi = seg[e], seg[e + 1]
            if lo == hi:
                continue
            n = hi - lo
            g_out = np.empty((n, h))
            for i in range(lo, hi):
                ti = tok[i]
                acc = 0.0
                for j in range(h):
                    gyv = gy[ti, j]
                    acc += rows[i, j] * gyv
                    g_out[i - lo, j] = w[i] * gyv
                gw[i] = acc
            hs = hid[lo:hi]
            gw2[e] = np.dot(hs.T.copy(), g_out)
            for j in range(h):
                s = 0.0
                for i in range(n):
                    s += g_out[i, j]
                gb2[e, j] = s
            gh = np.dot(g_out, w2[e].T.copy())
            for i in range(n):
                for j in range(d):
                    if hs[i, j] <= 0.0:
                        gh[i, j] = 0.0
            xs = np.empty((n, h))
            for i in range(lo, hi):
                xs[i - lo] = x[tok[i]]
            gw1[e] = np.dot(xs.T.copy(), gh)
            for j in range(d):
                s = 0.0
                for i in range(n):
                    s += gh[i, j]
                gb1[e, j] = s
            gxs = np.dot(gh, w1[e].T.copy())
            for i in range(lo, hi):
                ti = tok[i]
                for j in range(h):
                    gx[ti, j] += gxs[i - lo, j]
        return gx, gw1, gb1, gw2, gb2, gw

    return dispatch_forward, dispatch_backward


def _resolve_backend() -> str:
    want = os.environ.get("MOELAB_BACKEND", "auto").lower()
    if want not in ("auto", "numba", "numpy"):
        raise ValueError(f"MOELAB_BACKEND must be auto/numba/numpy, got {want!r}")
    if want == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if want == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _resolve_backend()

if BACKEND == "numba":
    dispatch_forward, dispatch_backward = _make_numba_kernels()
else:
    dispatch_forward, dispatch_backward = _dispatch_forward_np, _dispatch_backward_np


def get_backend(name: str):
    """Return (forward, backward) for an explicit backend, for tests/benchmarks."""
    if name == "numpy":
        return _dispatch_forward_np, _dispatch_backward_np
    if name == "numba":
        return _make_numba_kernels()
    raise ValueError(f"unknown backend {name!r}")
