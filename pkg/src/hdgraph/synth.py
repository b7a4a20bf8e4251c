"""Seeded synthetic cloth-changing scenarios.

Head vectors cluster around one prototype per identity. Body vectors
cluster around one prototype per (identity, clothing) pair, and a
fraction of those prototypes is shared with another identity of the same
split, so body neighbors follow clothes rather than identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import EmbeddingRecord, EmbeddingSet, l2_normalize
from .errors import ConfigError, DegenerateGraphError


@dataclass(frozen=True)
class ScenarioConfig:
    n_identities: int = 100
    clothes_per_identity: int = 3
    samples_per_clothing: int = 10
    body_dim: int = 64
    head_dim: int = 32
    head_noise_sigma: float = 0.15
    body_noise_sigma: float = 0.15
    clothing_confusion: float = 0.3
    head_missing_rate: float = 0.3
    train_fraction: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        counts = ("n_identities", "clothes_per_identity", "samples_per_clothing",
                  "body_dim", "head_dim")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("clothing_confusion", "head_missing_rate", "train_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("head_noise_sigma", "body_noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.samples_per_clothing < 3:
            raise ConfigError("each query needs 2 same-clothing gallery positives: "
                              "samples_per_clothing must be >= 3")
        if self.clothes_per_identity < 2:
            raise ConfigError("each query needs cloth-changed positives: "
                              "clothes_per_identity must be >= 2")
        n_train, n_test = self.split_sizes()
        if n_train < 2 or n_test < 1:
            raise ConfigError(f"identity split {n_train}/{n_test} leaves too few identities "
                              "(need >= 2 train and >= 1 test)")

    def split_sizes(self) -> tuple[int, int]:
        n_train = int(round(self.train_fraction * self.n_identities))
        return n_train, self.n_identities - n_train

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(rng, dim):
    while True:
        v = rng.standard_normal(dim)
        if np.dot(v, v) > 0:
            return l2_normalize(v)


def _noisy(proto, sigma, noise):
    if sigma == 0:
        return proto.copy()
    return l2_normalize(proto + sigma * noise)


def generate_scenario(cfg: ScenarioConfig = ScenarioConfig()):
    """Return ``(train, query, gallery)`` embedding sets.

    Identities are split disjointly between train and test. For each test
    identity, the first sample of each clothing is a query and the rest go
    to the gallery. Record ids and frame ids are unique and sequential.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_train, _ = cfg.split_sizes()
    perm = rng.permutation(cfg.n_identities)
    is_train = np.zeros(cfg.n_identities, dtype=bool)
    is_train[perm[:n_train]] = True

    heads = [_unit(rng, cfg.head_dim) for _ in range(cfg.n_identities)]

    bodies: list[np.ndarray] = []
    owner: list[int] = []
    clothing_of: dict[tuple[int, int], int] = {}
    for ident in range(cfg.n_identities):
        for c in range(cfg.clothes_per_identity):
            share = rng.random() < cfg.clothing_confusion
            pool = [p for p, o in enumerate(owner) if o != ident and is_train[o] == is_train[ident]]
            if share and pool:
                clothing_of[ident, c] = pool[int(rng.integers(len(pool)))]
            else:
                clothing_of[ident, c] = len(bodies)
                bodies.append(_unit(rng, cfg.body_dim))
                owner.append(ident)

    train, query, gallery = [], [], []
    next_id = 0
    for ident in range(cfg.n_identities):
        for c in range(cfg.clothes_per_identity):
            proto = clothing_of[ident, c]
            for s in range(cfg.samples_per_clothing):
                body_noise = rng.standard_normal(cfg.body_dim)
                head_noise = rng.standard_normal(cfg.head_dim)
                drop_head = rng.random() < cfg.head_missing_rate
                rec = EmbeddingRecord(
                    record_id=next_id,
                    frame_id=next_id,
                    body=_noisy(bodies[proto], cfg.body_noise_sigma, body_noise),
                    head=None if drop_head else _noisy(heads[ident], cfg.head_noise_sigma, head_noise),
                    label=ident,
                    clothing_id=proto,
                )
                next_id += 1
                if is_train[ident]:
                    train.append(rec)
                elif s == 0:
                    query.append(rec)
                else:
                    gallery.append(rec)

    def as_set(recs):
        return EmbeddingSet(tuple(recs), cfg.body_dim, cfg.head_dim)

    return as_set(train), as_set(query), as_set(gallery)


def neighbor_purity(g, labels) -> float:
    """Fraction of edges whose two endpoints share an identity label.

    Edges touching an unlabeled node (label < 0) are ignored.
    """
    labels = np.asarray(labels)
    edges = g.edge_array() if hasattr(g, "edge_array") else np.asarray(list(g), dtype=np.int64)
    if edges.size == 0:
        raise DegenerateGraphError("graph has no edges")
    src, dst = edges[:, 0], edges[:, 1]
    ok = (labels[src] >= 0) & (labels[dst] >= 0)
    if not ok.any():
        raise DegenerateGraphError("no edge joins two labeled nodes")
    return float(np.mean(labels[src[ok]] == labels[dst[ok]]))
