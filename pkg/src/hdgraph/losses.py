"""OIM and triplet losses with analytic gradients.

Both losses operate on float64 numpy arrays. The ``ProjectionHead`` at the
bottom is a single affine map trained with the two losses; it exists to
exercise them end-to-end on ingested or synthetic embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import l2_normalize, l2_normalize_rows
from .errors import ConfigError, DimensionError, LabelError

DISTANCES = ("euclidean", "one-minus-cosine")


@dataclass(frozen=True)
class OimBank:
    """Per-identity feature centers (one unit-norm row per identity)."""

    centers: np.ndarray
    temperature: float = 1.0 / 30.0
    momentum: float = 0.5

    def __post_init__(self):
        centers = np.array(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 2:
            raise ConfigError(f"OIM bank needs at least 2 centers, got shape {centers.shape}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must be in [0, 1], got {self.momentum}")
        norms = np.linalg.norm(centers, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ConfigError("OIM bank rows must be unit norm")
        object.__setattr__(self, "centers", centers)

    @classmethod
    def random(cls, num_classes: int, dim: int, seed: int = 0, **kwargs) -> "OimBank":
        """Bank whose rows are seeded random unit vectors."""
        rng = np.random.default_rng(seed)
        centers = l2_normalize_rows(rng.standard_normal((num_classes, dim)))
        return cls(centers, **kwargs)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    distance: str = "euclidean"

    def __post_init__(self):
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ConfigError(f"margin must be finite and >= 0, got {self.margin}")
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance {self.distance!r}")


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return labels


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def oim_loss(batch, labels, bank: OimBank) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of each row's label under the bank softmax.

    Returns the loss and its gradient with respect to ``batch`` (the bank
    is treated as constant).
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    labels = _check_labels(labels, bank.num_classes)
    if x.shape[1] != bank.centers.shape[1]:
        raise DimensionError(f"feature dim {x.shape[1]} != bank dim {bank.centers.shape[1]}")
    if labels.shape[0] != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} rows but {labels.shape[0]} labels")
    b = x.shape[0]
    logp = log_softmax(x @ bank.centers.T / bank.temperature)
    loss = -logp[np.arange(b), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    grad = dlogits @ bank.centers / (bank.temperature * b)
    return float(loss), grad


def oim_update_bank(bank: OimBank, batch, labels) -> OimBank:
    """Momentum update of the centers, applied row by row in batch order."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    labels = _check_labels(labels, bank.num_classes)
    centers = bank.centers.copy()
    mu = bank.momentum
    for row, j in zip(x, labels):
        centers[j] = l2_normalize(mu * centers[j] + (1.0 - mu) * row)
    return OimBank(centers, bank.temperature, bank.momentum)


def distance_and_grads(a: np.ndarray, b: np.ndarray, kind: str):
    """Distance d(a, b) and its gradients with respect to ``a`` and ``b``."""
    if kind == "euclidean":
        diff = a - b
        d = float(np.sqrt(np.dot(diff, diff)))
        if d == 0.0:
            zero = np.zeros_like(a)
            return 0.0, zero, zero
        return d, diff / d, -diff / d
    if kind == "one-minus-cosine":
        na = np.sqrt(np.dot(a, a))
        nb = np.sqrt(np.dot(b, b))
        cos = np.dot(a, b) / (na * nb)
        ga = -(b / (na * nb) - cos * a / na**2)
        gb = -(a / (na * nb) - cos * b / nb**2)
        return float(1.0 - cos), ga, gb
    raise ConfigError(f"unknown distance {kind!r}")


def triplet_loss(anchor, positive, negative, cfg: TripletConfig = TripletConfig()):
    """Hinge ``max(m + d(a, p) - d(a, n), 0)`` and gradients for (a, p, n)."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise DimensionError(f"shape mismatch {a.shape}, {p.shape}, {n.shape}")
    d_ap, ga_p, gp = distance_and_grads(a, p, cfg.distance)
    d_an, ga_n, gn = distance_and_grads(a, n, cfg.distance)
    pre = cfg.margin + d_ap - d_an
    if pre <= 0.0:
        zero = np.zeros_like(a)
        return 0.0, (zero, zero.copy(), zero.copy())
    return float(pre), (ga_p - ga_n, gp, -gn)


def batch_hard_triplets(x: np.ndarray, labels, distance: str = "euclidean"):
    """Hardest positive and hardest negative index for every anchor.

    Anchors with no positive or no negative in the batch get -1 entries.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if distance == "euclidean":
        sq = np.einsum("ij,ij->i", x, x)
        dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    else:
        xn = l2_normalize_rows(x)
        dist = 1.0 - xn @ xn.T
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    pos = np.where(same, dist, -np.inf).argmax(axis=1)
    neg = np.where(diff, dist, np.inf).argmin(axis=1)
    pos[~same.any(axis=1)] = -1
    neg[~diff.any(axis=1)] = -1
    return pos, neg


def batch_hard_triplet_loss(x, labels, cfg: TripletConfig = TripletConfig()):
    """Batch-mean triplet loss over batch-hard triplets, with gradient wrt ``x``.

    The mined indices are held fixed when differentiating.
    """
    x = np.asarray(x, dtype=np.float64)
    pos, neg = batch_hard_triplets(x, labels, cfg.distance)
    grad = np.zeros_like(x)
    total = 0.0
    for i in range(x.shape[0]):
        if pos[i] < 0 or neg[i] < 0:
            continue
        loss, (ga, gp, gn) = triplet_loss(x[i], x[pos[i]], x[neg[i]], cfg)
        total += loss
        grad[i] += ga
        grad[pos[i]] += gp
        grad[neg[i]] += gn
    b = x.shape[0]
    return total / b, grad / b


@dataclass
class ProjectionHead:
    """Affine map followed by row-wise L2 normalization."""

    weight: np.ndarray
    bias: np.ndarray
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, seed: int = 0) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        # identity-like start keeps the initial embedding close to the input
        w = np.eye(out_dim, in_dim) + rng.uniform(-0.01, 0.01, (out_dim, in_dim))
        return cls(w, np.zeros(out_dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return l2_normalize_rows(np.atleast_2d(x) @ self.weight.T + self.bias)


def projection_loss_and_grads(head: ProjectionHead, x, labels, bank: OimBank,
                              triplet_cfg: TripletConfig = TripletConfig(),
                              triplet_weight: float = 1.0):
    """OIM + weighted batch-hard triplet loss of the projected batch.

    Returns ``(loss, grad_weight, grad_bias, projected)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = x @ head.weight.T + head.bias
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    y = z / norms
    l_oim, g_oim = oim_loss(y, labels, bank)
    l_tri, g_tri = batch_hard_triplet_loss(y, labels, triplet_cfg)
    gy = g_oim + triplet_weight * g_tri
    gz = (gy - y * np.sum(y * gy, axis=1, keepdims=True)) / norms
    return l_oim + triplet_weight * l_tri, gz.T @ x, gz.sum(axis=0), y


def train_projection(x, labels, num_classes: int, out_dim: int | None = None, *,
                     lr: float = 0.1, epochs: int = 50, seed: int = 0,
                     triplet_cfg: TripletConfig = TripletConfig(),
                     temperature: float = 1.0 / 30.0, momentum: float = 0.5):
    """Full-batch gradient descent on OIM + triplet loss.

    The OIM bank is updated with the projected batch after every step.
    Returns the trained head and the final bank; per-epoch losses are in
    ``head.history``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    out_dim = out_dim or x.shape[1]
    head = ProjectionHead.init(x.shape[1], out_dim, seed)
    bank = OimBank.random(num_classes, out_dim, seed=seed + 1,
                          temperature=temperature, momentum=momentum)
    for _ in range(epochs):
        loss, gw, gb, y = projection_loss_and_grads(head, x, labels, bank, triplet_cfg)
        head.history.append(loss)
        head.weight -= lr * gw
        head.bias -= lr * gb
        bank = oim_update_bank(bank, y, labels)
    return head, bank
