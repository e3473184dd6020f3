"""Hot inner loops over ragged (segmented) row batches.

Every kernel has a numba implementation and a pure-numpy fallback with the
same signature.  The module-level names dispatch to one of them according to
``MMKGR_NO_NUMBA`` at import time; both variants stay importable through
:data:`numba_impl` and :data:`numpy_impl` for equivalence tests and benchmarks.

A segmented batch is a flat array of ``n`` rows plus an ``offsets`` array of
length ``B + 1``; segment ``b`` owns rows ``offsets[b]:offsets[b + 1]``.
"""
from types import SimpleNamespace

import numpy as np

from ._jit import USE_NUMBA, optional_njit


# ---------------------------------------------------------------- numba path

@optional_njit(cache=True)
def _nb_scatter_add_rows(out, idx, src):
    n, d = src.shape
    for i in range(n):
        r = idx[i]
        for k in range(d):
            out[r, k] += src[i, k]
    return out


@optional_njit(cache=True)
def _nb_segment_log_softmax(x, offsets):
    out = np.empty_like(x)
    for b in range(offsets.shape[0] - 1):
        lo = offsets[b]
        hi = offsets[b + 1]
        m = -np.inf
        for i in range(lo, hi):
            if x[i] > m:
                m = x[i]
        s = 0.0
        for i in range(lo, hi):
            s += np.exp(x[i] - m)
        lse = m + np.log(s)
        for i in range(lo, hi):
            out[i] = x[i] - lse
    return out


@optional_njit(cache=True)
def _nb_segment_log_softmax_grad(g, logp, offsets):
    out = np.empty_like(g)
    for b in range(offsets.shape[0] - 1):
        lo = offsets[b]
        hi = offsets[b + 1]
        s = 0.0
        for i in range(lo, hi):
            s += g[i]
        for i in range(lo, hi):
            out[i] = g[i] - np.exp(logp[i]) * s
    return out


@optional_njit(cache=True)
def _nb_segment_sum_rows(x, offsets):
    nseg = offsets.shape[0] - 1
    d = x.shape[1]
    out = np.zeros((nseg, d))
    for b in range(nseg):
        for i in range(offsets[b], offsets[b + 1]):
            for k in range(d):
                out[b, k] += x[i, k]
    return out


@optional_njit(cache=True)
def _nb_segment_argmax(x, offsets):
    nseg = offsets.shape[0] - 1
    out = np.empty(nseg, dtype=np.int64)
    for b in range(nseg):
        best = offsets[b]
        for i in range(offsets[b] + 1, offsets[b + 1]):
            if x[i] > x[best]:
                best = i
        out[b] = best
    return out


@optional_njit(cache=True)
def _nb_segment_sample(logp, offsets, u):
    nseg = offsets.shape[0] - 1
    out = np.empty(nseg, dtype=np.int64)
    for b in range(nseg):
        lo = offsets[b]
        hi = offsets[b + 1]
        acc = 0.0
        pick = hi - 1
        for i in range(lo, hi):
            acc += np.exp(logp[i])
            if u[b] < acc:
                pick = i
                break
        out[b] = pick
    return out


@optional_njit(cache=True)
def _nb_gather_actions(indptr, adj_rel, adj_ent, current, q_head, q_rel, q_tail, mask, no_op):
    nseg = current.shape[0]
    offsets = np.zeros(nseg + 1, dtype=np.int64)
    for b in range(nseg):
        e = current[b]
        cnt = indptr[e + 1] - indptr[e] + 1
        if mask[b] and e == q_head[b]:
            for i in range(indptr[e], indptr[e + 1]):
                if adj_rel[i] == q_rel[b] and adj_ent[i] == q_tail[b]:
                    cnt -= 1
        offsets[b + 1] = offsets[b] + cnt
    total = offsets[nseg]
    rels = np.empty(total, dtype=np.int64)
    ents = np.empty(total, dtype=np.int64)
    for b in range(nseg):
        e = current[b]
        pos = offsets[b]
        for i in range(indptr[e], indptr[e + 1]):
            if mask[b] and e == q_head[b] and adj_rel[i] == q_rel[b] and adj_ent[i] == q_tail[b]:
                continue
            rels[pos] = adj_rel[i]
            ents[pos] = adj_ent[i]
            pos += 1
        rels[pos] = no_op
        ents[pos] = e
    return rels, ents, offsets


# ---------------------------------------------------------------- numpy path

def _np_scatter_add_rows(out, idx, src):
    np.add.at(out, idx, src)
    return out


def _seg_ids(offsets):
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def _np_segment_log_softmax(x, offsets):
    seg = _seg_ids(offsets)
    starts = offsets[:-1]
    m = np.maximum.reduceat(x, starts)
    z = x - m[seg]
    s = np.add.reduceat(np.exp(z), starts)
    return z - np.log(s)[seg]


def _np_segment_log_softmax_grad(g, logp, offsets):
    seg = _seg_ids(offsets)
    s = np.add.reduceat(g, offsets[:-1])
    return g - np.exp(logp) * s[seg]


def _np_segment_sum_rows(x, offsets):
    return np.add.reduceat(x, offsets[:-1], axis=0)


def _np_segment_argmax(x, offsets):
    return np.array([lo + int(np.argmax(x[lo:hi])) for lo, hi in zip(offsets[:-1], offsets[1:])],
                    dtype=np.int64)


def _np_segment_sample(logp, offsets, u):
    out = np.empty(len(offsets) - 1, dtype=np.int64)
    for b, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
        c = np.cumsum(np.exp(logp[lo:hi]))
        k = int(np.searchsorted(c, u[b], side="right"))
        out[b] = lo + min(k, hi - lo - 1)
    return out


def _np_gather_actions(indptr, adj_rel, adj_ent, current, q_head, q_rel, q_tail, mask, no_op):
    rels, ents, sizes = [], [], []
    for b, e in enumerate(current):
        r = adj_rel[indptr[e]:indptr[e + 1]]
        t = adj_ent[indptr[e]:indptr[e + 1]]
        if mask[b] and e == q_head[b]:
            keep = ~((r == q_rel[b]) & (t == q_tail[b]))
            r, t = r[keep], t[keep]
        rels.append(r)
        rels.append(np.array([no_op], dtype=np.int64))
        ents.append(t)
        ents.append(np.array([e], dtype=np.int64))
        sizes.append(len(r) + 1)
    offsets = np.zeros(len(current) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    return (np.concatenate(rels).astype(np.int64), np.concatenate(ents).astype(np.int64),
            offsets)


numba_impl = SimpleNamespace(
    scatter_add_rows=_nb_scatter_add_rows,
    segment_log_softmax=_nb_segment_log_softmax,
    segment_log_softmax_grad=_nb_segment_log_softmax_grad,
    segment_sum_rows=_nb_segment_sum_rows,
    segment_argmax=_nb_segment_argmax,
    segment_sample=_nb_segment_sample,
    gather_actions=_nb_gather_actions,
)

numpy_impl = SimpleNamespace(
    scatter_add_rows=_np_scatter_add_rows,
    segment_log_softmax=_np_segment_log_softmax,
    segment_log_softmax_grad=_np_segment_log_softmax_grad,
    segment_sum_rows=_np_segment_sum_rows,
    segment_argmax=_np_segment_argmax,
    segment_sample=_np_segment_sample,
    gather_actions=_np_gather_actions,
)

active = numba_impl if USE_NUMBA else numpy_impl
BACKEND = "numba" if USE_NUMBA else "numpy"

scatter_add_rows = active.scatter_add_rows
segment_log_softmax = active.segment_log_softmax
segment_log_softmax_grad = active.segment_log_softmax_grad
segment_sum_rows = active.segment_sum_rows
segment_argmax = active.segment_argmax
segment_sample = active.segment_sample
gather_actions = active.gather_actions


def segment_ids(offsets):
    """Segment index of every row."""
    return _seg_ids(np.asarray(offsets))
