"""Slow reference implementations used as test oracles."""

import math

import numpy as np


def sq_dist(a, b):
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def cos_dist(a, b):
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) * float(x) for x in a))
    nb = math.sqrt(sum(float(x) * float(x) for x in b))
    return 1.0 - dot / max(na * nb, 1e-8)


def max_min(values, m, start, dist):
    """Greedy max-min, recomputing every minimum distance from scratch each step."""
    chosen = [int(start)]
    n = len(values)
    while len(chosen) < m:
        best, best_d = None, -math.inf
        for i in range(n):
            if i in chosen:
                continue
            d = min(dist(values[i], values[j]) for j in chosen)
            if d > best_d:  # strict: the lowest index wins ties
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_sort(query, base, k):
    d = [(sq_dist(query, b), i) for i, b in enumerate(base)]
    return [i for _, i in sorted(d)[:k]]


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def tie_heavy(rng, n, d):
    """Small-integer values: many exactly equal distances, all exact in float."""
    return rng.integers(-2, 3, size=(n, d)).astype(np.float64)


def max_min_matrix(dist, m, start):
    """Greedy max-min over a precomputed distance matrix, minima recomputed every step."""
    n = dist.shape[0]
    chosen = [int(start)]
    while len(chosen) < m:
        mind = dist[:, chosen].min(axis=1)
        mind[chosen] = -np.inf
        chosen.append(int(np.argmax(mind)))  # first maximum: lowest index
    return chosen
