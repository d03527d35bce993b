"""Evaluation hot loops: fused distance matrix and per-query ranking statistics.

Both kernels exist twice, a numba ``@njit`` version and a pure-numpy one.
``OCNET_NUMBA=0`` in the environment (or numba missing) selects numpy.
The two paths return identical results; ``benchmarks/bench_kernels.py``
compares their speed.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("OCNET_NUMBA", "1").lower() not in ("0", "false", "no")


# -- numpy ------------------------------------------------------------------

def _l2_rows_numpy(a, b, chunk):
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for s in range(0, a.shape[0], chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def fused_distance_matrix_numpy(qf, gf, qb, gb, alpha, chunk=64):
    return _l2_rows_numpy(qf, gf, chunk) + alpha * _l2_rows_numpy(qb, gb, chunk)


def rank_stats_numpy(order, q_ids, q_cams, g_ids, g_cams, exclude_junk=True):
    """Per query: 0-based rank of the first correct match (-1 if none) and AP."""
    ids = g_ids[order]
    matches = ids == q_ids[:, None]
    if exclude_junk:
        keep = ~(matches & (g_cams[order] == q_cams[:, None]))
    else:
        keep = np.ones_like(matches)
    rank = np.cumsum(keep, axis=1) - 1
    hit = matches & keep
    hits = np.cumsum(hit, axis=1)
    num_pos = hits[:, -1] if hits.shape[1] else np.zeros(len(order), dtype=np.int64)
    # junk entries ahead of the first kept one sit at rank -1; only hits are divided
    prec = np.divide(hits, rank + 1.0, out=np.zeros(hits.shape), where=hit)
    # sequential cumsum sums in the same order as the numba loop, so both paths agree bit for bit
    acc = np.cumsum(prec, axis=1)[:, -1] if prec.shape[1] else np.zeros(len(order))
    ap = np.where(num_pos > 0, acc / np.maximum(num_pos, 1), 0.0)
    big = np.iinfo(np.int64).max
    first = np.where(num_pos > 0, np.where(hit, rank, big).min(axis=1, initial=big), -1)
    return first.astype(np.int64), ap.astype(np.float64)


# -- numba ------------------------------------------------------------------

if numba is not None:
    @numba.njit(cache=True)
    def fused_distance_matrix_numba(qf, gf, qb, gb, alpha):
        nq, ng = qf.shape[0], gf.shape[0]
        out = np.empty((nq, ng), dtype=np.float64)
        for i in range(nq):
            for j in range(ng):
                s1 = 0.0
                for k in range(qf.shape[1]):
                    t = qf[i, k] - gf[j, k]
                    s1 += t * t
                s2 = 0.0
                for k in range(qb.shape[1]):
                    t = qb[i, k] - gb[j, k]
                    s2 += t * t
                out[i, j] = np.sqrt(s1) + alpha * np.sqrt(s2)
        return out

    @numba.njit(cache=True)
    def rank_stats_numba(order, q_ids, q_cams, g_ids, g_cams, exclude_junk=True):
        nq, ng = order.shape
        first = np.full(nq, -1, dtype=np.int64)
        ap = np.zeros(nq, dtype=np.float64)
        for i in range(nq):
            rank = 0
            hits = 0
            acc = 0.0
            for j in range(ng):
                g = order[i, j]
                same = g_ids[g] == q_ids[i]
                if exclude_junk and same and g_cams[g] == q_cams[i]:
                    continue
                if same:
                    hits += 1
                    if first[i] < 0:
                        first[i] = rank
                    acc += hits / (rank + 1.0)
                rank += 1
            if hits > 0:
                ap[i] = acc / hits
        return first, ap
else:  # pragma: no cover
    fused_distance_matrix_numba = None
    rank_stats_numba = None


def fused_distance_matrix(qf, gf, qb, gb, alpha):
    args = [np.ascontiguousarray(x, dtype=np.float64) for x in (qf, gf, qb, gb)]
    if USE_NUMBA:
        return fused_distance_matrix_numba(*args, float(alpha))
    return fused_distance_matrix_numpy(*args, float(alpha))


def rank_stats(order, q_ids, q_cams, g_ids, g_cams, exclude_junk=True):
    args = [np.ascontiguousarray(x, dtype=np.int64) for x in (order, q_ids, q_cams, g_ids, g_cams)]
    if USE_NUMBA:
        return rank_stats_numba(*args, bool(exclude_junk))
    return rank_stats_numpy(*args, exclude_junk=exclude_junk)
