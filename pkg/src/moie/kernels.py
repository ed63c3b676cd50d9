"""Hot inner loops, each in two flavours.

Every kernel has a vectorised numpy implementation (``*_np``) and a
loop implementation compiled with numba (``*_nb``).  The public name picks
one at import time: numba when it is importable, unless the environment
variable ``MOIE_DISABLE_NUMBA`` is set to a non-empty value other than
``0``.  Both paths are kept in sync by ``tests/test_kernels.py`` and timed by
``benchmarks/bench_kernels.py``.

Expert parameters use the stacked per-class layout of
:class:`moie.elen.ElenExpert`: ``alpha_t [C, Nc]`` (max-normalised
attention), ``w1 [C, H, Nc]``, ``b1 [C, H]``, ``w2 [C, H]``, ``b2 [C]``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("MOIE_DISABLE_NUMBA", "")
USE_NUMBA = HAVE_NUMBA and _flag in ("", "0")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# entropy-layer expert forward
# ---------------------------------------------------------------------------

def elen_logits_np(x, alpha_t, w1, b1, w2, b2):
    xmod = x[:, None, :] * alpha_t[None, :, :]  # [m, C, Nc]
    z = np.einsum("mcn,chn->mch", xmod, w1) + b1[None]
    h = np.maximum(z, 0.0)
    return np.einsum("mch,ch->mc", h, w2) + b2[None]


def _elen_logits_loop(x, alpha_t, w1, b1, w2, b2):
    m, nc = x.shape
    c_count, hidden = b1.shape
    out = np.empty((m, c_count))
    for j in range(m):
        for c in range(c_count):
            acc = b2[c]
            for k in range(hidden):
                z = b1[c, k]
                for i in range(nc):
                    z += w1[c, k, i] * (x[j, i] * alpha_t[c, i])
                if z > 0.0:
                    acc += w2[c, k] * z
            out[j, c] = acc
    return out


elen_logits_nb = _njit(_elen_logits_loop)


# ---------------------------------------------------------------------------
# percentile-descent explanation search
# ---------------------------------------------------------------------------

def nearest_rank(sorted_row, p):
    """Nearest-rank percentile of an ascending array (p in [0, 100])."""
    n = sorted_row.shape[0]
    rank = int(np.ceil(p / 100.0 * n))
    rank = min(max(rank, 1), n)
    return sorted_row[rank - 1]


def percentile_descent_np(x, pred, alpha_t, w1, b1, w2, b2, start=99):
    """Vectorised over samples; see :func:`moie.fol.extract_local_fol`.

    Returns ``(masks [m, Nc] bool, percentile [m] int, steps [m] int,
    exhausted [m] bool)``.
    """
    m, nc = x.shape
    rows = alpha_t[pred]  # [m, Nc]
    sorted_rows = np.sort(rows, axis=1)
    masks = np.ones((m, nc), dtype=bool)
    pct = np.full(m, -1, dtype=np.int64)
    steps = np.zeros(m, dtype=np.int64)
    open_ = np.ones(m, dtype=bool)
    for p in range(start, -1, -1):
        idx = np.nonzero(open_)[0]
        if idx.size == 0:
            break
        rank = min(max(int(np.ceil(p / 100.0 * nc)), 1), nc)
        thr = sorted_rows[idx, rank - 1]
        mk = rows[idx] >= thr[:, None]
        logits = elen_logits_np(x[idx] * mk, alpha_t, w1, b1, w2, b2)
        ok = np.argmax(logits, axis=1) == pred[idx]
        steps[idx] += 1
        hit = idx[ok]
        masks[hit] = mk[ok]
        pct[hit] = p
        open_[hit] = False
    exhausted = open_.copy()
    masks[exhausted] = True
    return masks, pct, steps, exhausted


def _percentile_descent_loop(x, pred, alpha_t, w1, b1, w2, b2, start):
    m, nc = x.shape
    c_count, hidden = b1.shape
    masks = np.ones((m, nc), dtype=np.bool_)
    pct = np.full(m, -1, dtype=np.int64)
    steps = np.zeros(m, dtype=np.int64)
    exhausted = np.zeros(m, dtype=np.bool_)
    xm = np.empty(nc)
    logits = np.empty(c_count)
    for j in range(m):
        row = alpha_t[pred[j]]
        srt = np.sort(row)
        done = False
        for p in range(start, -1, -1):
            rank = int(np.ceil(p / 100.0 * nc))
            if rank < 1:
                rank = 1
            if rank > nc:
                rank = nc
            thr = srt[rank - 1]
            for i in range(nc):
                xm[i] = x[j, i] if row[i] >= thr else 0.0
            for c in range(c_count):
                acc = b2[c]
                for k in range(hidden):
                    z = b1[c, k]
                    for i in range(nc):
                        z += w1[c, k, i] * (xm[i] * alpha_t[c, i])
                    if z > 0.0:
                        acc += w2[c, k] * z
                logits[c] = acc
            steps[j] += 1
            if np.argmax(logits) == pred[j]:
                for i in range(nc):
                    masks[j, i] = row[i] >= thr
                pct[j] = p
                done = True
                break
        if not done:
            exhausted[j] = True
    return masks, pct, steps, exhausted


percentile_descent_nb = _njit(_percentile_descent_loop)


# ---------------------------------------------------------------------------
# DNF evaluation
# ---------------------------------------------------------------------------

def dnf_eval_np(lit_idx, lit_neg, conj_ptr, bools):
    """Evaluate a flattened DNF on every row of ``bools``.

    Conjunction ``q`` owns literals ``conj_ptr[q]:conj_ptr[q+1]`` of
    ``lit_idx`` (concept index) and ``lit_neg`` (negation flag).
    """
    m = bools.shape[0]
    out = np.zeros(m, dtype=bool)
    for q in range(conj_ptr.shape[0] - 1):
        a, b = conj_ptr[q], conj_ptr[q + 1]
        sat = np.all(bools[:, lit_idx[a:b]] != lit_neg[a:b][None, :], axis=1)
        out |= sat
    return out


def _dnf_eval_loop(lit_idx, lit_neg, conj_ptr, bools):
    m = bools.shape[0]
    nq = conj_ptr.shape[0] - 1
    out = np.zeros(m, dtype=np.bool_)
    for j in range(m):
        for q in range(nq):
            ok = True
            for t in range(conj_ptr[q], conj_ptr[q + 1]):
                if bools[j, lit_idx[t]] == lit_neg[t]:
                    ok = False
                    break
            if ok:
                out[j] = True
                break
    return out


dnf_eval_nb = _njit(_dnf_eval_loop)


# ---------------------------------------------------------------------------
# cascade routing
# ---------------------------------------------------------------------------

def cascade_route_np(pi, threshold=0.5):
    """First column with ``pi >= threshold``; ``K`` means the residual."""
    sel = pi >= threshold
    any_ = sel.any(axis=1)
    return np.where(any_, np.argmax(sel, axis=1), pi.shape[1]).astype(np.int64)


def _cascade_route_loop(pi, threshold):
    m, k = pi.shape
    out = np.full(m, k, dtype=np.int64)
    for j in range(m):
        for i in range(k):
            if pi[j, i] >= threshold:
                out[j] = i
                break
    return out


cascade_route_nb = _njit(_cascade_route_loop)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def elen_logits(x, alpha_t, w1, b1, w2, b2):
    if USE_NUMBA:
        return elen_logits_nb(_f64(x), _f64(alpha_t), _f64(w1), _f64(b1), _f64(w2), _f64(b2))
    return elen_logits_np(x, alpha_t, w1, b1, w2, b2)


def percentile_descent(x, pred, alpha_t, w1, b1, w2, b2, start=99):
    pred = np.ascontiguousarray(pred, dtype=np.int64)
    if USE_NUMBA:
        return percentile_descent_nb(
            _f64(x), pred, _f64(alpha_t), _f64(w1), _f64(b1), _f64(w2), _f64(b2), int(start)
        )
    return percentile_descent_np(_f64(x), pred, alpha_t, w1, b1, w2, b2, start)


def dnf_eval(lit_idx, lit_neg, conj_ptr, bools):
    lit_idx = np.ascontiguousarray(lit_idx, dtype=np.int64)
    lit_neg = np.ascontiguousarray(lit_neg, dtype=np.bool_)
    conj_ptr = np.ascontiguousarray(conj_ptr, dtype=np.int64)
    bools = np.ascontiguousarray(bools, dtype=np.bool_)
    if USE_NUMBA:
        return dnf_eval_nb(lit_idx, lit_neg, conj_ptr, bools)
    return dnf_eval_np(lit_idx, lit_neg, conj_ptr, bools)


def cascade_route(pi, threshold=0.5):
    pi = _f64(pi)
    if pi.ndim == 1:
        pi = pi[:, None]
    if USE_NUMBA:
        return cascade_route_nb(pi, float(threshold))
    return cascade_route_np(pi, threshold)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
