"""Embedding, box, ranking and metric file formats.

Binary embedding layout (all little-endian)::

    "UDGB" | u32 version | u32 count | u32 body_dim | u32 head_dim
    per record:
        u64 id | u64 frame | i64 label (-1 none) | i64 clothing (-1 none)
        u8 has_head | u8 has_box | 4 x f32 box | f32 score
        body_dim x f32 | head_dim x f32 (only when has_head)

The box floats are always written (zeros when absent) so that every
record header has the same size.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import EmbeddingRecord, EmbeddingSet, normalize_record
from .errors import DataError, FormatError, ValidationError
from .metrics import BoxRecord

MAGIC = b"UDGB"
VERSION = 1
HEADER = struct.Struct("<4sIIII")
RECORD_HEAD = struct.Struct("<QQqqBB4ff")
FORMATS = ("binary", "jsonl")


def infer_format(path, fmt: Optional[str] = None) -> str:
    if fmt:
        if fmt not in FORMATS:
            raise ValidationError(f"unknown format {fmt!r}")
        return fmt
    return "jsonl" if str(path).endswith((".jsonl", ".json")) else "binary"


def extension(fmt: str) -> str:
    return ".jsonl" if fmt == "jsonl" else ".udgb"


def _check_finite(vec: np.ndarray, index: int, what: str) -> None:
    if not np.all(np.isfinite(vec)):
        raise DataError(f"record {index}: non-finite value in {what} vector")


def _finish(records: list[EmbeddingRecord], body_dim: int, head_dim: int,
            normalize: bool, min_head_score: Optional[float]) -> EmbeddingSet:
    if normalize:
        records = [normalize_record(r) for r in records]
    eset = EmbeddingSet(tuple(records), body_dim, head_dim)
    if min_head_score is not None:
        eset = eset.drop_heads_below(min_head_score)
    return eset


# ---------------------------------------------------------------------------
# binary
# ---------------------------------------------------------------------------


def embeddings_to_bytes(eset: EmbeddingSet) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION, len(eset), eset.body_dim, eset.head_dim)]
    for r in eset:
        box = r.box if r.box is not None else (0.0, 0.0, 0.0, 0.0)
        parts.append(RECORD_HEAD.pack(
            r.record_id, r.frame_id,
            -1 if r.label is None else r.label,
            -1 if r.clothing_id is None else r.clothing_id,
            r.head is not None, r.box is not None, *box, r.score,
        ))
        parts.append(r.body.astype("<f4").tobytes())
        if r.head is not None:
            parts.append(r.head.astype("<f4").tobytes())
    return b"".join(parts)


def embeddings_from_bytes(data: bytes, normalize: bool = True,
                          min_head_score: Optional[float] = None) -> EmbeddingSet:
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header: {len(data)} bytes, need {HEADER.size} (offset 0)")
    magic, version, count, body_dim, head_dim = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    pos = HEADER.size
    records = []

    def need(n: int, index: int):
        if pos + n > len(data):
            raise FormatError(f"record {index}: truncated at byte offset {pos} "
                              f"(need {n} bytes, {len(data) - pos} left)")

    for index in range(count):
        need(RECORD_HEAD.size, index)
        rid, frame, label, clothing, has_head, has_box, x1, y1, x2, y2, score = \
            RECORD_HEAD.unpack_from(data, pos)
        if has_head not in (0, 1) or has_box not in (0, 1):
            raise FormatError(f"record {index}: invalid flag byte at offset {pos + 32}")
        if has_head and head_dim == 0:
            raise FormatError(f"record {index}: head flag set but header head_dim is 0")
        pos += RECORD_HEAD.size
        need(4 * body_dim, index)
        body = np.frombuffer(data, "<f4", body_dim, pos).astype(np.float64)
        pos += 4 * body_dim
        head = None
        if has_head:
            need(4 * head_dim, index)
            head = np.frombuffer(data, "<f4", head_dim, pos).astype(np.float64)
            pos += 4 * head_dim
        _check_finite(body, index, "body")
        if head is not None:
            _check_finite(head, index, "head")
        if not math.isfinite(score):
            raise DataError(f"record {index}: non-finite score")
        records.append(EmbeddingRecord(
            rid, frame, body, head,
            None if label < 0 else label,
            None if clothing < 0 else clothing,
            (x1, y1, x2, y2) if has_box else None,
            score,
        ))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes at offset {pos}")
    return _finish(records, body_dim, head_dim, normalize, min_head_score)


# ---------------------------------------------------------------------------
# JSON lines
# ---------------------------------------------------------------------------


def _f32_list(vec: np.ndarray) -> list[float]:
    return [float(v) for v in vec.astype(np.float32)]


def record_to_json(r: EmbeddingRecord) -> dict:
    return {
        "id": r.record_id,
        "frame": r.frame_id,
        "label": r.label,
        "clothing": r.clothing_id,
        "box": None if r.box is None else [float(np.float32(c)) for c in r.box],
        "score": float(np.float32(r.score)),
        "body": _f32_list(r.body),
        "head": None if r.head is None else _f32_list(r.head),
    }


def embeddings_to_jsonl(eset: EmbeddingSet) -> str:
    return "".join(json.dumps(record_to_json(r)) + "\n" for r in eset)


def _vector(obj, key: str, dim: Optional[int], index: int) -> np.ndarray:
    try:
        vec = np.asarray(obj[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"record {index}: {key} is not a numeric array") from exc
    if vec.ndim != 1 or vec.size == 0:
        raise FormatError(f"record {index}: {key} must be a non-empty array")
    if dim is not None and vec.size != dim:
        raise FormatError(f"record {index}: {key} has length {vec.size}, expected {dim}")
    _check_finite(vec, index, key)
    return vec


def embeddings_from_jsonl(text: str, normalize: bool = True,
                          min_head_score: Optional[float] = None) -> EmbeddingSet:
    records = []
    body_dim = head_dim = None
    for index, line in enumerate(l for l in text.splitlines() if l.strip()):
        try:
            obj = json.loads(line)
            body = _vector(obj, "body", body_dim, index)
            body_dim = body.size
            head = None
            if obj.get("head") is not None:
                head = _vector(obj, "head", head_dim, index)
                head_dim = head.size
            label = obj.get("label")
            clothing = obj.get("clothing")
            rec = EmbeddingRecord(
                int(obj["id"]), int(obj.get("frame", obj["id"])), body, head,
                None if label is None or label < 0 else int(label),
                None if clothing is None or clothing < 0 else int(clothing),
                None if obj.get("box") is None else tuple(obj["box"]),
                float(obj.get("score", 1.0)),
            )
        except json.JSONDecodeError as exc:
            raise FormatError(f"record {index}: invalid JSON ({exc.msg})") from exc
        except KeyError as exc:
            raise FormatError(f"record {index}: missing field {exc}") from exc
        records.append(rec)
    if not records:
        raise FormatError("no records in file")
    return _finish(records, body_dim, head_dim or 0, normalize, min_head_score)


# ---------------------------------------------------------------------------
# file entry points
# ---------------------------------------------------------------------------


def save_embeddings(eset: EmbeddingSet, path, fmt: Optional[str] = None) -> None:
    fmt = infer_format(path, fmt)
    if fmt == "binary":
        Path(path).write_bytes(embeddings_to_bytes(eset))
    else:
        Path(path).write_text(embeddings_to_jsonl(eset))


def load_embeddings(path, fmt: Optional[str] = None, normalize: bool = True,
                    min_head_score: Optional[float] = None) -> EmbeddingSet:
    fmt = infer_format(path, fmt)
    if fmt == "binary":
        return embeddings_from_bytes(Path(path).read_bytes(), normalize, min_head_score)
    return embeddings_from_jsonl(Path(path).read_text(), normalize, min_head_score)


def load_boxes(path) -> list[BoxRecord]:
    """Detections ``{frame, box, score}`` or ground truth ``{frame, box, identity}``."""
    out = []
    with open(path) as fh:
        for index, line in enumerate(l for l in fh if l.strip()):
            try:
                obj = json.loads(line)
                out.append(BoxRecord(int(obj["frame"]), tuple(obj["box"]),
                                     float(obj.get("score", 1.0)), obj.get("identity")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"box line {index}: {exc}") from exc
    return out


def save_boxes(boxes: Iterable[BoxRecord], path) -> None:
    with open(path, "w") as fh:
        for b in boxes:
            obj = {"frame": b.frame_id, "box": list(b.box)}
            if b.identity is None:
                obj["score"] = b.score
            else:
                obj["identity"] = b.identity
            fh.write(json.dumps(obj) + "\n")


def write_rankings(lists: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for row in lists:
            fh.write(json.dumps(row) + "\n")


def read_rankings(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for index, line in enumerate(l for l in fh if l.strip()):
            try:
                row = json.loads(line)
                row["query_id"], row["ranked_gallery_ids"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"ranking line {index}: {exc}") from exc
            out.append(row)
    return out


METRIC_KEYS = ("mAP", "rank1", "rank5", "rank10", "detection_ap", "detection_recall",
               "excluded_queries")


def write_metrics_json(metrics: dict, path) -> str:
    payload = {key: metrics.get(key) for key in METRIC_KEYS}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)
    return text


def write_csv(rows: list[dict], path, columns: Optional[list[str]] = None) -> None:
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c) for c in columns})
