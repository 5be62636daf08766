"""Hot inner loops: DTW cost accumulation and per-frame normalized
autocorrelation.

Each kernel has a numba ``@njit`` version and a pure-numpy version. The
numba path is used when numba imports and ``SEGBERT_NUMBA`` is not ``0``;
both paths produce bit-identical results and are tested against each other.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("SEGBERT_NUMBA", "1") != "0"


# -- DTW ----------------------------------------------------------------------

def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance between every frame of a and b, computed
    from explicit differences so cost(a, b) is exactly cost(b, a).T."""
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(axis=-1)


def accumulate_numpy(cost: np.ndarray) -> np.ndarray:
    """Accumulated cost D[i, j] = cost[i, j] + min(D[i-1, j-1], D[i-1, j], D[i, j-1]),
    swept one anti-diagonal at a time."""
    n, m = cost.shape
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for s in range(2, n + m + 1):
        i = np.arange(max(1, s - m), min(n, s - 1) + 1)
        j = s - i
        best = np.minimum(np.minimum(D[i - 1, j - 1], D[i - 1, j]), D[i, j - 1])
        D[i, j] = best + cost[i - 1, j - 1]
    # the (0, 0) start has no predecessor: D[1, 1] = 0 + cost[0, 0] == cost[0, 0]
    return D


def backtrace_numpy(D: np.ndarray) -> np.ndarray:
    i, j = D.shape[0] - 1, D.shape[1] - 1
    path = [(i - 1, j - 1)]
    while i > 1 or j > 1:
        diag, up, left = D[i - 1, j - 1], D[i - 1, j], D[i, j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    return np.array(path[::-1], dtype=np.int64)


if HAVE_NUMBA:
    @njit(cache=True)
    def accumulate_numba(cost):
        n, m = cost.shape
        D = np.full((n + 1, m + 1), np.inf)
        D[0, 0] = 0.0
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                best = D[i - 1, j - 1]
                if D[i - 1, j] < best:
                    best = D[i - 1, j]
                if D[i, j - 1] < best:
                    best = D[i, j - 1]
                D[i, j] = best + cost[i - 1, j - 1]
        return D

    @njit(cache=True)
    def backtrace_numba(D):
        i = D.shape[0] - 1
        j = D.shape[1] - 1
        out = np.empty((i + j - 1, 2), dtype=np.int64)
        k = 0
        out[k, 0] = i - 1
        out[k, 1] = j - 1
        while i > 1 or j > 1:
            diag = D[i - 1, j - 1]
            up = D[i - 1, j]
            left = D[i, j - 1]
            if diag <= up and diag <= left:
                i -= 1
                j -= 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
            k += 1
            out[k, 0] = i - 1
            out[k, 1] = j - 1
        return out[: k + 1][::-1].copy()


def dtw_accumulate(cost: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    if use_numba is None:
        use_numba = numba_enabled()
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    return accumulate_numba(cost) if use_numba else accumulate_numpy(cost)


def dtw_backtrace(D: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    if use_numba is None:
        use_numba = numba_enabled()
    return backtrace_numba(D) if use_numba else backtrace_numpy(D)


# -- normalized autocorrelation -------------------------------------------------

def nccf_numpy(frames: np.ndarray, min_lag: int, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation of each frame's head against its lagged
    tail: r[f, tau] = sum x[n] x[n+tau] / sqrt(sum x[n]^2 * sum x[n+tau]^2),
    n over [0, W - tau). Returns (n_frames, max_lag - min_lag + 1)."""
    n_frames, W = frames.shape
    lags = np.arange(min_lag, max_lag + 1)
    out = np.zeros((n_frames, lags.size))
    for f in range(n_frames):
        x = frames[f]
        sq = np.concatenate(([0.0], np.cumsum(x * x)))
        for c, tau in enumerate(lags):
            num = np.dot(x[: W - tau], x[tau:])
            e0 = sq[W - tau]
            e1 = sq[W] - sq[tau]
            den = np.sqrt(e0 * e1)
            out[f, c] = num / den if den > 0 else 0.0
    return out


if HAVE_NUMBA:
    @njit(cache=True)
    def nccf_numba(frames, min_lag, max_lag):
        n_frames, W = frames.shape
        out = np.zeros((n_frames, max_lag - min_lag + 1))
        sq = np.zeros(W + 1)
        for f in range(n_frames):
            x = frames[f]
            for n in range(W):
                sq[n + 1] = sq[n] + x[n] * x[n]
            for c in range(max_lag - min_lag + 1):
                tau = min_lag + c
                num = np.dot(x[: W - tau], x[tau:])
                den = np.sqrt(sq[W - tau] * (sq[W] - sq[tau]))
                out[f, c] = num / den if den > 0 else 0.0
        return out


def nccf(frames: np.ndarray, min_lag: int, max_lag: int, use_numba: bool | None = None) -> np.ndarray:
    if use_numba is None:
        use_numba = numba_enabled()
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if frames.shape[1] <= max_lag:
        raise ValueError(f"analysis window ({frames.shape[1]}) must exceed the longest lag ({max_lag})")
    return nccf_numba(frames, min_lag, max_lag) if use_numba else nccf_numpy(frames, min_lag, max_lag)
