"""Compiled loops for k-NN and farthest sampling.

Both kernels follow the pure numpy paths in :mod:`point_ops` exactly:
distances are summed coordinate by coordinate and every tie goes to the
lowest index.  ``AVAILABLE`` is False when numba cannot be imported.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

AVAILABLE = numba is not None

if AVAILABLE:

    @numba.njit(cache=True)
    def knn_kernel(query, base_t, k, skip):
        """``base_t`` is (B, D, n); coordinates flagged in ``skip`` add exactly zero."""
        B, q, D = query.shape
        n = base_t.shape[2]
        out = np.empty((B, q, k), dtype=np.intp)
        d = np.empty(n)
        bd = np.empty(k)
        bi = np.empty(k, dtype=np.intp)
        for b in range(B):
            for i in range(q):
                d[:] = 0.0
                for c in range(D):
                    if skip[c]:
                        continue
                    qc = query[b, i, c]
                    row = base_t[b, c]
                    for j in range(n):
                        t = qc - row[j]
                        d[j] += t * t
                filled = 0
                for j in range(n):
                    x = d[j]
                    if filled == k and x >= bd[k - 1]:
                        continue
                    # insert after every kept entry with distance <= x
                    pos = filled if filled < k else k - 1
                    while pos > 0 and bd[pos - 1] > x:
                        bd[pos] = bd[pos - 1]
                        bi[pos] = bi[pos - 1]
                        pos -= 1
                    bd[pos] = x
                    bi[pos] = j
                    if filled < k:
                        filled += 1
                out[b, i, :] = bi
        return out

    @numba.njit(cache=True)
    def farthest_kernel(values, m, start, cosine, cos_eps):
        B, n, D = values.shape
        out = np.empty((B, m), dtype=np.intp)
        mind = np.empty(n)
        chosen = np.zeros(n, dtype=np.bool_)
        norms = np.empty(n)
        for b in range(B):
            if cosine:
                for j in range(n):
                    s = 0.0
                    for c in range(D):
                        s += values[b, j, c] * values[b, j, c]
                    norms[j] = np.sqrt(s)
            chosen[:] = False
            pick = start[b]
            for t in range(m):
                out[b, t] = pick
                chosen[pick] = True
                best, best_j = -np.inf, -1
                for j in range(n):
                    d = 0.0
                    if cosine:
                        for c in range(D):
                            d += values[b, j, c] * values[b, pick, c]
                        d = 1.0 - d / max(norms[j] * norms[pick], cos_eps)
                    else:
                        for c in range(D):
                            u = values[b, j, c] - values[b, pick, c]
                            d += u * u
                    if t == 0 or d < mind[j]:
                        mind[j] = d
                    if not chosen[j] and mind[j] > best:
                        best, best_j = mind[j], j
                pick = best_j
        return out
