"""Embedding records, embedding sets and cosine-similarity primitives.

Every vector is held as a float64 numpy array. Missing head channels are
``None`` on the record and an explicit boolean mask on similarity
matrices; they are never encoded as zero vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    BoxError,
    DimensionError,
    EmptySetError,
    MissingChannelError,
    NormalizationError,
    ValidationError,
)

CHANNELS = ("body", "head")

Box = tuple[float, float, float, float]


def validate_box(box: Sequence[float]) -> Box:
    if len(box) != 4:
        raise BoxError(f"box needs 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = (float(c) for c in box)
    if not (x1 < x2 and y1 < y2):
        raise BoxError(f"degenerate box {(x1, y1, x2, y2)}")
    return (x1, y1, x2, y2)


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One detected person.

    ``label`` and ``clothing_id`` are ``None`` when unknown. ``score`` is
    the detector confidence of the body box.
    """

    record_id: int
    frame_id: int
    body: np.ndarray
    head: Optional[np.ndarray] = None
    label: Optional[int] = None
    clothing_id: Optional[int] = None
    box: Optional[Box] = None
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "body", np.asarray(self.body, dtype=np.float64).reshape(-1))
        if self.head is not None:
            object.__setattr__(self, "head", np.asarray(self.head, dtype=np.float64).reshape(-1))
        if self.box is not None:
            object.__setattr__(self, "box", validate_box(self.box))
        if self.label is not None and self.label < 0:
            raise ValidationError(f"record {self.record_id}: negative label {self.label}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"record {self.record_id}: score {self.score} outside [0, 1]")

    def channel(self, name: str) -> Optional[np.ndarray]:
        if name == "body":
            return self.body
        if name == "head":
            return self.head
        raise ValidationError(f"unknown channel {name!r}")

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        same_head = (self.head is None and other.head is None) or (
            self.head is not None
            and other.head is not None
            and np.array_equal(self.head, other.head)
        )
        return (
            self.record_id == other.record_id
            and self.frame_id == other.frame_id
            and np.array_equal(self.body, other.body)
            and same_head
            and self.label == other.label
            and self.clothing_id == other.clothing_id
            and self.box == other.box
            and self.score == other.score
        )


@dataclass(frozen=True)
class EmbeddingSet:
    """Ordered records; list position is the node index used by graphs."""

    records: tuple[EmbeddingRecord, ...]
    body_dim: int
    head_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for idx, rec in enumerate(self.records):
            if rec.record_id in seen:
                raise ValidationError(f"duplicate record_id {rec.record_id} at index {idx}")
            seen.add(rec.record_id)
            if rec.body.shape[0] != self.body_dim:
                raise DimensionError(
                    f"record {idx}: body dim {rec.body.shape[0]} != {self.body_dim}"
                )
            if rec.head is not None and rec.head.shape[0] != self.head_dim:
                raise DimensionError(
                    f"record {idx}: head dim {rec.head.shape[0]} != {self.head_dim}"
                )

    @classmethod
    def from_records(cls, records: Iterable[EmbeddingRecord], normalize: bool = True) -> "EmbeddingSet":
        """Build a set, inferring dims from the records.

        With ``normalize`` every body and head vector is L2-normalized.
        """
        records = list(records)
        if not records:
            raise EmptySetError("cannot infer dimensions of an empty record list")
        body_dim = records[0].body.shape[0]
        head_dim = next((r.head.shape[0] for r in records if r.head is not None), 0)
        if normalize:
            records = [normalize_record(r) for r in records]
        return cls(tuple(records), body_dim, head_dim)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    @property
    def ids(self) -> np.ndarray:
        return np.array([r.record_id for r in self.records], dtype=np.int64)

    @property
    def frames(self) -> np.ndarray:
        return np.array([r.frame_id for r in self.records], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        """Identity labels with -1 for unlabeled records."""
        return np.array(
            [-1 if r.label is None else r.label for r in self.records], dtype=np.int64
        )

    def has_channel(self, channel: str) -> np.ndarray:
        if channel == "body":
            return np.ones(len(self), dtype=bool)
        if channel == "head":
            return np.array([r.head is not None for r in self.records], dtype=bool)
        raise ValidationError(f"unknown channel {channel!r}")

    def matrix(self, channel: str) -> np.ndarray:
        """Stack channel vectors into an (N, dim) array; absent rows are NaN."""
        dim = self.body_dim if channel == "body" else self.head_dim
        out = np.full((len(self), dim), np.nan)
        for i, rec in enumerate(self.records):
            v = rec.channel(channel)
            if v is not None:
                out[i] = v
        return out

    def concat(self, other: "EmbeddingSet") -> "EmbeddingSet":
        head_dim = self.head_dim or other.head_dim
        if other.body_dim != self.body_dim:
            raise DimensionError(f"body dims differ: {self.body_dim} vs {other.body_dim}")
        if self.head_dim and other.head_dim and self.head_dim != other.head_dim:
            raise DimensionError(f"head dims differ: {self.head_dim} vs {other.head_dim}")
        return EmbeddingSet(self.records + other.records, self.body_dim, head_dim)

    def drop_heads_below(self, min_score: float) -> "EmbeddingSet":
        """Remove the head channel of records whose detection score is below ``min_score``."""
        recs = tuple(
            replace(r, head=None) if r.head is not None and r.score < min_score else r
            for r in self.records
        )
        return EmbeddingSet(recs, self.body_dim, self.head_dim)


@dataclass(frozen=True)
class SimilarityMatrix:
    """Query-by-gallery scores.

    ``missing`` flags entries that could not be computed because a head
    channel was absent; those entries hold NaN in ``values``.
    """

    values: np.ndarray
    row_ids: tuple[int, ...]
    col_ids: tuple[int, ...]
    missing: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_ids", tuple(int(i) for i in self.row_ids))
        object.__setattr__(self, "col_ids", tuple(int(i) for i in self.col_ids))
        if values.shape != (len(self.row_ids), len(self.col_ids)):
            raise DimensionError(
                f"values shape {values.shape} does not match "
                f"{len(self.row_ids)} rows x {len(self.col_ids)} cols"
            )
        if self.missing is None:
            object.__setattr__(self, "missing", np.zeros(values.shape, dtype=bool))
        else:
            object.__setattr__(self, "missing", np.asarray(self.missing, dtype=bool))

    @property
    def shape(self):
        return self.values.shape


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.dot(v, v))
    if norm == 0.0 or not np.isfinite(norm):
        raise NormalizationError("cannot normalize a zero or non-finite vector")
    return v / norm


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise NormalizationError(f"row {bad} is all-zero")
    return m / norms[:, None]


def normalize_record(rec: EmbeddingRecord) -> EmbeddingRecord:
    head = None if rec.head is None else l2_normalize(rec.head)
    return replace(rec, body=l2_normalize(rec.body), head=head)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise NormalizationError("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row of ``q`` against every row of ``g``."""
    if q.shape[1] != g.shape[1]:
        raise DimensionError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    return l2_normalize_rows(q) @ l2_normalize_rows(g).T


def pairwise_similarity(
    queries: EmbeddingSet,
    gallery: EmbeddingSet,
    channel: str = "body",
    require_query_channel: bool = True,
) -> SimilarityMatrix:
    """Cosine similarity between query and gallery records on one channel.

    Gallery records without the channel give missing entries. Queries
    without it raise ``MissingChannelError`` unless
    ``require_query_channel`` is False, in which case their whole row is
    marked missing.
    """
    if len(queries) == 0 or len(gallery) == 0:
        raise EmptySetError("query and gallery sets must be non-empty")
    q_has = queries.has_channel(channel)
    g_has = gallery.has_channel(channel)
    if require_query_channel and not q_has.all():
        bad = int(np.flatnonzero(~q_has)[0])
        raise MissingChannelError(
            f"query {queries[bad].record_id} has no {channel} channel"
        )
    values = np.full((len(queries), len(gallery)), np.nan)
    missing = ~(q_has[:, None] & g_has[None, :])
    if q_has.any() and g_has.any():
        sims = cosine_matrix(queries.matrix(channel)[q_has], gallery.matrix(channel)[g_has])
        values[np.ix_(q_has, g_has)] = sims
    return SimilarityMatrix(values, tuple(queries.ids), tuple(gallery.ids), missing)
