"""Brute-force reference implementations used only by the tests.

Nothing here imports the code under test.
"""

import math

import numpy as np
from scipy.spatial.distance import cdist


def knn_edges(x, k, metric="one-minus-cosine", present=None):
    """Exhaustive k-NN: sort every candidate by (distance, index)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    nodes = [i for i in range(n) if present is None or present[i]]
    d = cdist(x, x, "cosine" if metric == "one-minus-cosine" else "euclidean")
    nodes = np.asarray(nodes)
    edges = set()
    for i in nodes:
        cands = nodes[nodes != i]
        # primary key distance, secondary key index
        order = np.lexsort((cands, d[i, cands]))
        edges.update((int(i), int(j)) for j in cands[order[:k]])
    return edges


def average_precision(flags):
    hits = 0
    total = 0.0
    for r, flag in enumerate(flags, start=1):
        if flag:
            hits += 1
            total += hits / r
    return total / hits if hits else None


def map_cmc(rankings, ks=(1, 5, 10)):
    aps = []
    cmc = {k: 0 for k in ks}
    for flags in rankings:
        ap = average_precision(flags)
        if ap is None:
            continue
        aps.append(ap)
        for k in ks:
            if any(flags[:k]):
                cmc[k] += 1
    return math.fsum(aps) / len(aps), {k: v / len(aps) for k, v in cmc.items()}


def softmax_row(logits):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [v / s for v in e]
