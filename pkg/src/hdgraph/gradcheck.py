"""Central finite-difference gradient checks for the losses and the MixHop net."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import l2_normalize_rows
from .graph import (
    _forward_cached,
    Propagator,
    init_mixhop_net,
    knn_adjacency,
    loss_and_grads,
    normalize_adjacency,
)
from .losses import OimBank, TripletConfig, distance_and_grads, oim_loss, triplet_loss

STEP = 1e-5
TOLERANCE = 1e-4
# entries where both gradients are below this are compared in absolute terms
FLOOR = 1e-6


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_oim(seed: int = 0, batch: int = 6, dim: int = 8, classes: int = 5,
              temperature: float = 0.5) -> float:
    rng = np.random.default_rng(seed)
    bank = OimBank.random(classes, dim, seed=seed, temperature=temperature)
    x = l2_normalize_rows(rng.standard_normal((batch, dim)))
    labels = rng.integers(0, classes, batch)
    _, grad = oim_loss(x, labels, bank)
    num = numerical_gradient(lambda: oim_loss(x, labels, bank)[0], x)
    return max_relative_error(grad, num)


def check_triplet(seed: int = 0, dim: int = 8, active: bool = True,
                  distance: str = "euclidean", margin_gap: float = 1e-2) -> float:
    """Gradient check on a triplet at least ``margin_gap`` away from the hinge."""
    rng = np.random.default_rng(seed)
    while True:
        a, p, n = rng.standard_normal((3, dim))
        gap = distance_and_grads(a, p, distance)[0] - distance_and_grads(a, n, distance)[0]
        if active:
            margin = max(0.0, -gap) + 0.3
        else:
            if gap > 0:
                p, n, gap = n, p, -gap
            margin = max(0.0, -gap - 0.3)
        cfg = TripletConfig(margin, distance)
        pre = margin + gap
        if abs(pre) >= margin_gap and (pre > 0) == active:
            break
    _, grads = triplet_loss(a, p, n, cfg)
    err = 0.0
    for vec, g in zip((a, p, n), grads):
        num = numerical_gradient(lambda: triplet_loss(a, p, n, cfg)[0], vec)
        err = max(err, max_relative_error(g, num))
    return err


def relu_margin(net, x, prop) -> float:
    """Smallest |pre-activation| over the ReLU layers of ``net``."""
    _, _, caches = _forward_cached(net, x, prop)
    margins = [np.abs(z).min() for layer, (_, pre) in zip(net.layers, caches)
               if layer.activation == "relu" for z in pre]
    return float(min(margins)) if margins else np.inf


def gcn_instance(seed: int = 0, n: int = 16, dim: int = 5, classes: int = 3, depth: int = 3,
                 powers=(0, 1, 2), hidden: int = 4, k: int = 3, min_margin: float = 1e-3):
    """Random graph, features, labels and net whose ReLUs all sit >= ``min_margin`` from 0."""
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        x = rng.standard_normal((n, dim))
        adj = normalize_adjacency(knn_adjacency(x, k))
        labels = rng.integers(0, classes, n)
        labels[:classes] = np.arange(classes)
        labels[-2] = -1
        net = init_mixhop_net(dim, classes, depth, powers, hidden, seed=int(rng.integers(2**31)))
        if relu_margin(net, x, Propagator(adj)) >= min_margin:
            return x, adj, labels, net
    raise RuntimeError("could not draw an instance with ReLUs away from zero")


def check_gcn(seed: int = 0, **kwargs) -> float:
    x, adj, labels, net = gcn_instance(seed, **kwargs)
    prop = Propagator(adj)
    _, grads = loss_and_grads(net, x, adj, labels, prop)
    err = 0.0
    for p, g in zip(net.parameters(), grads):
        num = numerical_gradient(lambda: loss_and_grads(net, x, adj, labels, prop)[0], p)
        err = max(err, max_relative_error(g, num))
    return err


def run_all(seed: int = 0) -> dict[str, float]:
    return {
        "oim": check_oim(seed),
        "triplet_active_euclidean": check_triplet(seed, active=True),
        "triplet_inactive_euclidean": check_triplet(seed, active=False),
        "triplet_active_cosine": check_triplet(seed, active=True, distance="one-minus-cosine"),
        "triplet_inactive_cosine": check_triplet(seed, active=False, distance="one-minus-cosine"),
        "mixhop_cross_entropy": check_gcn(seed),
    }
