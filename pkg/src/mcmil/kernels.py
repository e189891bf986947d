"""Hot inner loops, each with a numba implementation and a pure-numpy fallback.

The backend is chosen once at import time: numba when it imports cleanly and
the environment variable ``MCMIL_NUMBA`` is not ``0``.  ``set_backend`` swaps
it at runtime, which the benchmark and the backend-equivalence tests use.

Elementwise kernels agree bitwise across backends.  The ragged loss kernel
agrees to summation-order rounding (about 1e-15 relative).
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_backend():
    flag = os.environ.get("MCMIL_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or not HAVE_NUMBA:
        return "numpy"
    return "numba"


# ---------------------------------------------------------------- numpy path


def _relu_dropout_np(z, mask, scale):
    out = np.zeros_like(z)
    np.multiply(z, scale, out=out, where=(z > 0.0) & mask)
    return out


def _relu_dropout_grad_np(da, z, mask, scale):
    out = np.zeros_like(da)
    np.multiply(da, scale, out=out, where=(z > 0.0) & mask)
    return out


def _first_argmax_np(x, starts, seg, seg_max):
    # lowest index attaining the segment max
    idx = np.arange(x.shape[0])
    cand = np.where(x == seg_max[seg], idx, x.shape[0])
    return np.minimum.reduceat(cand, starts)


def _mil_pair_losses_np(a, a_off, n, n_off, lam1, lam2, normalize):
    n_pairs = a_off.shape[0] - 1
    a_len = np.diff(a_off)
    n_len = np.diff(n_off)
    a_seg = np.repeat(np.arange(n_pairs), a_len)
    n_seg = np.repeat(np.arange(n_pairs), n_len)

    a_max = np.maximum.reduceat(a, a_off[:-1])
    n_max = np.maximum.reduceat(n, n_off[:-1])
    a_arg = _first_argmax_np(a, a_off[:-1], a_seg, a_max)
    n_arg = _first_argmax_np(n, n_off[:-1], n_seg, n_max)

    margin = 1.0 - a_max + n_max
    active = margin > 0.0
    hinge = np.where(active, margin, 0.0)

    if normalize:
        c_smooth = np.where(a_len > 1, lam1 / np.maximum(a_len - 1, 1), lam1)
        c_sparse = lam2 / a_len
    else:
        c_smooth = np.full(n_pairs, lam1)
        c_sparse = np.full(n_pairs, lam2)

    diff = a[:-1] - a[1:]
    inside = a_seg[:-1] == a_seg[1:]
    diff = np.where(inside, diff, 0.0)
    smooth = c_smooth * np.bincount(a_seg[:-1], weights=diff * diff, minlength=n_pairs)
    sparse = c_sparse * np.bincount(a_seg, weights=a, minlength=n_pairs)

    da = c_sparse[a_seg].copy()
    g = 2.0 * c_smooth[a_seg[:-1]] * diff
    da[:-1] += g
    da[1:] -= g
    da[a_arg[active]] -= 1.0
    dn = np.zeros_like(n)
    dn[n_arg[active]] += 1.0
    return hinge, smooth, sparse, da, dn


def _roc_counts_np(s, y):
    last = np.flatnonzero(s[1:] != s[:-1])
    last = np.append(last, s.shape[0] - 1)
    ctp = np.cumsum(y, dtype=np.int64)
    tp = ctp[last]
    fp = (last + 1) - tp
    return s[last].copy(), tp, fp


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _relu_dropout_nb(z, mask, scale):
        out = np.empty_like(z)
        rows, cols = z.shape
        for i in range(rows):
            for j in range(cols):
                v = z[i, j]
                if v > 0.0 and mask[i, j]:
                    out[i, j] = v * scale
                else:
                    out[i, j] = 0.0
        return out

    @numba.njit(cache=True)
    def _relu_dropout_grad_nb(da, z, mask, scale):
        out = np.empty_like(da)
        rows, cols = da.shape
        for i in range(rows):
            for j in range(cols):
                if z[i, j] > 0.0 and mask[i, j]:
                    out[i, j] = da[i, j] * scale
                else:
                    out[i, j] = 0.0
        return out

    @numba.njit(cache=True)
    def _mil_pair_losses_nb(a, a_off, n, n_off, lam1, lam2, normalize):
        n_pairs = a_off.shape[0] - 1
        hinge = np.zeros(n_pairs)
        smooth = np.zeros(n_pairs)
        sparse = np.zeros(n_pairs)
        da = np.zeros_like(a)
        dn = np.zeros_like(n)
        for p in range(n_pairs):
            a0, a1 = a_off[p], a_off[p + 1]
            n0, n1 = n_off[p], n_off[p + 1]
            ia = a0
            for i in range(a0 + 1, a1):
                if a[i] > a[ia]:
                    ia = i
            jn = n0
            for j in range(n0 + 1, n1):
                if n[j] > n[jn]:
                    jn = j
            m = a1 - a0
            if normalize:
                cs = lam1 / (m - 1) if m > 1 else lam1
                cp = lam2 / m
            else:
                cs = lam1
                cp = lam2
            acc = 0.0
            tot = 0.0
            for i in range(a0, a1):
                tot += a[i]
                da[i] += cp
            for i in range(a0, a1 - 1):
                d = a[i] - a[i + 1]
                acc += d * d
                da[i] += 2.0 * cs * d
                da[i + 1] -= 2.0 * cs * d
            smooth[p] = cs * acc
            sparse[p] = cp * tot
            margin = 1.0 - a[ia] + n[jn]
            if margin > 0.0:
                hinge[p] = margin
                da[ia] -= 1.0
                dn[jn] += 1.0
        return hinge, smooth, sparse, da, dn

    @numba.njit(cache=True)
    def _roc_counts_nb(s, y):
        size = s.shape[0]
        thr = np.empty(size)
        tp = np.empty(size, np.int64)
        fp = np.empty(size, np.int64)
        k = 0
        ctp = 0
        cfp = 0
        for i in range(size):
            if y[i]:
                ctp += 1
            else:
                cfp += 1
            if i == size - 1 or s[i + 1] != s[i]:
                thr[k] = s[i]
                tp[k] = ctp
                fp[k] = cfp
                k += 1
        return thr[:k].copy(), tp[:k].copy(), fp[:k].copy()


_IMPLS = {
    "numpy": {
        "relu_dropout": _relu_dropout_np,
        "relu_dropout_grad": _relu_dropout_grad_np,
        "mil_pair_losses": _mil_pair_losses_np,
        "roc_counts": _roc_counts_np,
    }
}
if HAVE_NUMBA:
    _IMPLS["numba"] = {
        "relu_dropout": _relu_dropout_nb,
        "relu_dropout_grad": _relu_dropout_grad_nb,
        "mil_pair_losses": _mil_pair_losses_nb,
        "roc_counts": _roc_counts_nb,
    }

_active = _IMPLS[_env_backend()]
_active_name = _env_backend()


def backend():
    return _active_name


def available_backends():
    return tuple(_IMPLS)


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global _active, _active_name
    if name not in _IMPLS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {available_backends()}")
    prev = _active_name
    _active, _active_name = _IMPLS[name], name
    return prev


# ---------------------------------------------------------------- public API


def relu_dropout(z, mask, scale):
    """ReLU followed by inverted dropout: ``relu(z) * mask * scale``."""
    return _active["relu_dropout"](z, mask, z.dtype.type(scale))


def relu_dropout_grad(da, z, mask, scale):
    """Gradient of :func:`relu_dropout` with respect to ``z``."""
    return _active["relu_dropout_grad"](da, z, mask, da.dtype.type(scale))


def mil_pair_losses(a, a_off, n, n_off, lam1, lam2, normalize=False):
    """Ranking-loss terms for many (anomalous, normal) bag pairs at once.

    Bags are ragged and stored CSR style: pair ``p`` owns anomalous scores
    ``a[a_off[p]:a_off[p+1]]`` and normal scores ``n[n_off[p]:n_off[p+1]]``.

    Returns per-pair ``hinge``, ``smooth``, ``sparse`` (each already weighted by
    its lambda) and the per-score gradients ``da``, ``dn`` of
    ``hinge + smooth + sparse`` for each pair.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    n = np.ascontiguousarray(n, dtype=np.float64)
    a_off = np.ascontiguousarray(a_off, dtype=np.int64)
    n_off = np.ascontiguousarray(n_off, dtype=np.int64)
    if a_off.shape != n_off.shape or a_off.shape[0] < 2:
        raise ValueError("offset arrays must have equal length >= 2")
    if np.any(np.diff(a_off) <= 0) or np.any(np.diff(n_off) <= 0):
        raise ValueError("every bag must hold at least one score")
    if a_off[0] != 0 or n_off[0] != 0 or a_off[-1] != a.shape[0] or n_off[-1] != n.shape[0]:
        raise ValueError("offsets do not span the score arrays")
    return _active["mil_pair_losses"](a, a_off, n, n_off, float(lam1), float(lam2), bool(normalize))


def roc_counts(scores_desc, labels_desc):
    """Cumulative (threshold, tp, fp) at the end of each tied-score group.

    Inputs must already be sorted by descending score.
    """
    s = np.ascontiguousarray(scores_desc, dtype=np.float64)
    y = np.ascontiguousarray(labels_desc, dtype=np.bool_)
    return _active["roc_counts"](s, y)
