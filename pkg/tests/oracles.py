"""Independent brute-force references used by several test modules."""

import math

import numpy as np


def affinity_double_loop(x, positions, mu, w, w_prime):
    """Affinity by explicit loops: row i = f_s * exp(f_a) normalised over j."""
    n, d = x.shape
    out = np.zeros((n, n))
    for i in range(n):
        num = []
        for j in range(n):
            dist = math.sqrt(sum((positions[i][k] - positions[j][k]) ** 2 for k in range(3)))
            gate = 1.0 if (dist <= mu or i == j) else 0.0
            a = 0.0
            for p in range(d):
                wi = sum(w[p][q] * x[i][q] for q in range(d))
                wj = sum(w_prime[p][q] * x[j][q] for q in range(d))
                a += wi * wj
            num.append((gate, a / math.sqrt(d)))
        top = max(a for g, a in num if g)
        row = [g * math.exp(a - top) for g, a in num]
        total = sum(row)
        out[i] = [r / total for r in row]
    return out


def matmul_triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def average_precision_brute(scores, labels):
    """Precision at every positive's rank, ranking by score (stable)."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, precisions = 0, []
    for rank, i in enumerate(ranked, start=1):
        if labels[i]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)
