"""Similarity fusion and the head-driven graph re-ranking pipeline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import EmbeddingSet, SimilarityMatrix, cosine_matrix, pairwise_similarity
from .errors import ConfigError, MatrixMismatchError
from .graph import (
    METRICS,
    TRANSFER_MODES,
    MixhopNet,
    NormalizedAdjacency,
    build_knn_graph,
    extract_updated_features,
    normalize_adjacency,
    train_gcn,
    transfer_head_edges,
)
from .metrics import map_and_cmc, ranked_results

log = logging.getLogger(__name__)

MISSING_HEAD_POLICIES = ("fallback_to_update", "drop_query")
GRAPH_MODES = ("head", "body")


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.5
    missing_head_policy: str = "fallback_to_update"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.missing_head_policy not in MISSING_HEAD_POLICIES:
            raise ConfigError(f"unknown missing-head policy {self.missing_head_policy!r}")


def fuse_similarities(s_head: SimilarityMatrix, s_update: SimilarityMatrix,
                      cfg: FusionConfig = FusionConfig()) -> SimilarityMatrix:
    """``lam * S_head + (1 - lam) * S_update`` entrywise.

    Entries where the head score is missing take the update score. With
    the ``drop_query`` policy, queries whose whole head row is missing are
    removed from the result.
    """
    if s_head.row_ids != s_update.row_ids or s_head.col_ids != s_update.col_ids:
        raise MatrixMismatchError("head and update matrices cover different ids")
    lam = cfg.lam
    fused = lam * np.where(s_head.missing, 0.0, s_head.values) + (1.0 - lam) * s_update.values
    fused = np.where(s_head.missing, s_update.values, fused)
    missing = s_head.missing & s_update.missing
    rows = np.arange(len(s_head.row_ids))
    if cfg.missing_head_policy == "drop_query":
        rows = rows[~s_head.missing.all(axis=1)]
    return SimilarityMatrix(fused[rows], tuple(np.asarray(s_head.row_ids)[rows]),
                            s_head.col_ids, missing[rows])


def rank_gallery(sim: SimilarityMatrix) -> list[np.ndarray]:
    """Per query, gallery column positions by descending score, ties to lower id."""
    col_ids = np.asarray(sim.col_ids)
    return [np.lexsort((col_ids, -row)) for row in sim.values]


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 5
    metric: str = "one-minus-cosine"
    graph_mode: str = "head"
    transfer_mode: str = "replace"
    powers: tuple[int, ...] = (0, 1, 2)
    depth: int = 3
    hidden_width: int = 128
    lr: float = 0.5
    epochs: int = 100
    seed: int = 0
    fusion: FusionConfig = field(default_factory=FusionConfig)
    exclude_same_frame: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.graph_mode not in GRAPH_MODES:
            raise ConfigError(f"unknown graph mode {self.graph_mode!r}")
        if self.transfer_mode not in TRANSFER_MODES:
            raise ConfigError(f"unknown transfer mode {self.transfer_mode!r}")
        if self.depth < 1 or self.hidden_width < 1 or self.epochs < 0:
            raise ConfigError("depth and hidden_width must be >= 1, epochs >= 0")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        object.__setattr__(self, "powers", tuple(sorted(set(int(p) for p in self.powers))))


def graph_adjacency(eset: EmbeddingSet, cfg: PipelineConfig) -> NormalizedAdjacency:
    """Body k-NN graph, with head edges transferred in ``head`` graph mode."""
    body_g = build_knn_graph(eset, "body", cfg.k, cfg.metric)
    g = body_g
    if cfg.graph_mode == "head" and eset.has_channel("head").sum() >= 2:
        head_g = build_knn_graph(eset, "head", cfg.k, cfg.metric)
        g = transfer_head_edges(head_g, body_g, cfg.transfer_mode)
    return normalize_adjacency(g)


def contiguous_labels(labels: np.ndarray) -> np.ndarray:
    """Map identity labels to 0..C-1 in sorted order; -1 stays unlabeled."""
    out = np.full(labels.shape, -1, dtype=np.int64)
    known = labels >= 0
    _, inv = np.unique(labels[known], return_inverse=True)
    out[known] = inv
    return out


def fit_graph_net(train: EmbeddingSet, cfg: PipelineConfig, history: Optional[list] = None) -> MixhopNet:
    """Train the MixHop net on the training graph (inductive setting)."""
    adj = graph_adjacency(train, cfg)
    labels = contiguous_labels(train.labels)
    return train_gcn(train.matrix("body"), adj, labels, lr=cfg.lr, epochs=cfg.epochs,
                     seed=cfg.seed, depth=cfg.depth, powers=cfg.powers,
                     hidden_width=cfg.hidden_width, history=history)


@dataclass
class RerankResult:
    fused: SimilarityMatrix
    s_head: SimilarityMatrix
    s_update: SimilarityMatrix
    rankings: list[np.ndarray]
    net: MixhopNet

    def ranked_lists(self) -> list[dict]:
        """JSON-ready ``{query_id, ranked_gallery_ids, scores}`` per query."""
        col_ids = np.asarray(self.fused.col_ids)
        out = []
        for q, order in enumerate(self.rankings):
            out.append({
                "query_id": int(self.fused.row_ids[q]),
                "ranked_gallery_ids": [int(i) for i in col_ids[order]],
                "scores": [float(s) for s in self.fused.values[q, order]],
            })
        return out


def similarity_components(net: MixhopNet, query: EmbeddingSet, gallery: EmbeddingSet,
                          cfg: PipelineConfig) -> tuple[SimilarityMatrix, SimilarityMatrix]:
    """Head similarity and updated-feature similarity over the pooled test graph."""
    pooled = query.concat(gallery)
    adj = graph_adjacency(pooled, cfg)
    updated = extract_updated_features(net, pooled.matrix("body"), adj)
    nq = len(query)
    s_update = SimilarityMatrix(cosine_matrix(updated[:nq], updated[nq:]),
                                tuple(query.ids), tuple(gallery.ids))
    if query.head_dim and gallery.head_dim:
        s_head = pairwise_similarity(query, gallery, "head", require_query_channel=False)
    else:
        shape = (len(query), len(gallery))
        s_head = SimilarityMatrix(np.full(shape, np.nan), tuple(query.ids), tuple(gallery.ids),
                                  np.ones(shape, dtype=bool))
    return s_head, s_update


def rerank_pipeline(train: Optional[EmbeddingSet], query: EmbeddingSet, gallery: EmbeddingSet,
                    cfg: PipelineConfig = PipelineConfig(),
                    net: Optional[MixhopNet] = None) -> RerankResult:
    """Graph construction, MixHop propagation, fusion and ranking.

    ``net`` skips training; otherwise a net is fitted on ``train``.
    """
    if net is None:
        if train is None:
            raise ConfigError("either a training set or a trained net is required")
        net = fit_graph_net(train, cfg)
    s_head, s_update = similarity_components(net, query, gallery, cfg)
    fused = fuse_similarities(s_head, s_update, cfg.fusion)
    return RerankResult(fused, s_head, s_update, rank_gallery(fused), net)


def evaluate_similarity(sim: SimilarityMatrix, query: EmbeddingSet, gallery: EmbeddingSet,
                        exclude_same_frame: bool = True, ks: Sequence[int] = (1, 5, 10)) -> dict:
    """Rank with ``sim`` and compute retrieval metrics as a flat dict."""
    pos = {rid: i for i, rid in enumerate(query.ids.tolist())}
    rows = [pos[r] for r in sim.row_ids]
    results = ranked_results(np.asarray(sim.row_ids), query.labels[rows], query.frames[rows],
                             gallery.ids, gallery.labels, gallery.frames,
                             rank_gallery(sim), exclude_same_frame)
    m_ap, cmc, excluded = map_and_cmc(results, ks)
    out = {"mAP": m_ap, "excluded_queries": excluded}
    out.update({f"rank{k}": v for k, v in cmc.items()})
    return out


def body_baseline(query: EmbeddingSet, gallery: EmbeddingSet) -> SimilarityMatrix:
    """Raw body-cosine control."""
    return pairwise_similarity(query, gallery, "body")


def with_lambda(cfg: PipelineConfig, lam: float) -> PipelineConfig:
    return replace(cfg, fusion=replace(cfg.fusion, lam=lam))
