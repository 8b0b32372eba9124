"""File formats: feature stores (CSV and binary), embedding tables, weight
tables, and the class manifest.

Feature CSV: header ``class_id,split,f0,...,f{d-1}`` with split in
{support, query}. Binary form: magic ``FSCF``, little-endian u32 version (=1),
u32 record count, u32 dimension, then per record u32 class_id, u8 split tag
(0=support, 1=query), and d float32 values. Embedding / weight CSVs:
``class_id,e0,...`` / ``class_id,w0,...``. Manifest: JSON object mapping
class_id to {"label": str, "session": int}.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .datamodel import ClassRegistry, EmbeddingTable, FeatureStore, WeightMatrix
from .errors import FormatError

FEATURE_MAGIC = b"FSCF"
FEATURE_VERSION = 1
_SPLIT_TO_TAG = {"support": 0, "query": 1}
_TAG_TO_SPLIT = {0: "support", 1: "query"}


def _fmt(x: float) -> str:
    return repr(float(x))


# --- feature stores --------------------------------------------------------

def save_feature_store_csv(store: FeatureStore, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "split"] + [f"f{i}" for i in range(store.dimension)])
        for cid, split, row in store.iter_rows():
            writer.writerow([cid, split] + [_fmt(v) for v in row])


def load_feature_store_csv(path) -> FeatureStore:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["class_id", "split"]:
            raise FormatError(f"{path}: expected header starting 'class_id,split'")
        dim = len(header) - 2
        if dim < 1:
            raise FormatError(f"{path}: no feature columns")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != dim + 2:
                raise FormatError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(rec)}")
            try:
                cid = int(rec[0])
                feat = np.array([float(v) for v in rec[2:]])
            except ValueError as err:
                raise FormatError(f"{path}:{lineno}: {err}") from None
            split = rec[1]
            if split not in _SPLIT_TO_TAG:
                raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append((cid, split, feat))
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return FeatureStore.from_rows(dim, rows)


def save_feature_store_binary(store: FeatureStore, path) -> None:
    path = Path(path)
    rows = list(store.iter_rows())
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, len(rows), store.dimension))
        for cid, split, row in rows:
            fh.write(struct.pack("<IB", cid, _SPLIT_TO_TAG[split]))
            fh.write(np.asarray(row, dtype="<f4").tobytes())


def load_feature_store_binary(path) -> FeatureStore:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not a feature store")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    version, n, dim = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} (expected {FEATURE_VERSION})")
    rec_size = 5 + 4 * dim
    if len(blob) != 16 + n * rec_size:
        raise FormatError(f"{path}: expected {16 + n * rec_size} bytes, got {len(blob)}")
    rows = []
    off = 16
    for _ in range(n):
        cid, tag = struct.unpack_from("<IB", blob, off)
        if tag not in _TAG_TO_SPLIT:
            raise FormatError(f"{path}: unknown split tag {tag}")
        feat = np.frombuffer(blob, dtype="<f4", count=dim, offset=off + 5).astype(np.float64)
        rows.append((cid, _TAG_TO_SPLIT[tag], feat))
        off += rec_size
    return FeatureStore.from_rows(dim, rows)


def load_feature_store(path) -> FeatureStore:
    """Dispatch on the magic bytes: binary if present, CSV otherwise."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == FEATURE_MAGIC:
        return load_feature_store_binary(path)
    return load_feature_store_csv(path)


# --- per-class vector tables ------------------------------------------------

def _save_vector_csv(path, prefix: str, items: dict[int, np.ndarray], dimension: int) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id"] + [f"{prefix}{i}" for i in range(dimension)])
        for cid in sorted(items):
            writer.writerow([cid] + [_fmt(v) for v in items[cid]])


def _load_vector_csv(path, prefix: str) -> dict[int, np.ndarray]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "class_id" or len(header) < 2:
            raise FormatError(f"{path}: expected header 'class_id,{prefix}0,...'")
        dim = len(header) - 1
        items: dict[int, np.ndarray] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != dim + 1:
                raise FormatError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(rec)}")
            try:
                items[int(rec[0])] = np.array([float(v) for v in rec[1:]])
            except ValueError as err:
                raise FormatError(f"{path}:{lineno}: {err}") from None
    if not items:
        raise FormatError(f"{path}: no data rows")
    return items


def save_embeddings_csv(table: EmbeddingTable, path) -> None:
    _save_vector_csv(path, "e", {c: table.vector(c) for c in table.classes}, table.dimension)


def load_embeddings_csv(path, source: str = "label") -> EmbeddingTable:
    return EmbeddingTable(_load_vector_csv(path, "e"), source=source)


def save_weights_csv(weights: WeightMatrix, path) -> None:
    _save_vector_csv(path, "w", weights.as_dict(), weights.dimension)


def load_weights_csv(path) -> WeightMatrix:
    items = _load_vector_csv(path, "w")
    return WeightMatrix.from_rows({c: items[c] for c in sorted(items)})


# --- manifest ---------------------------------------------------------------

def save_manifest(path, labels: dict[int, str], sessions: dict[int, int]) -> None:
    obj = {str(c): {"label": labels.get(c, f"class_{c}"), "session": int(sessions[c])}
           for c in sorted(sessions)}
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> tuple[dict[int, str], dict[int, int]]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(obj, dict) or not obj:
        raise FormatError(f"{path}: manifest must be a non-empty JSON object")
    labels: dict[int, str] = {}
    sessions: dict[int, int] = {}
    for key, entry in obj.items():
        try:
            cid = int(key)
            labels[cid] = str(entry["label"])
            sessions[cid] = int(entry["session"])
        except (ValueError, TypeError, KeyError):
            raise FormatError(f"{path}: bad manifest entry for key {key!r}") from None
    return labels, sessions


def registry_from_manifest(sessions: dict[int, int]) -> ClassRegistry:
    """Build the session plan recorded in a manifest."""
    if not sessions:
        raise FormatError("manifest assigns no classes")
    n = max(sessions.values()) + 1
    if min(sessions.values()) != 0:
        raise FormatError("manifest must assign session 0 (base) classes")
    plan: list[list[int]] = [[] for _ in range(n)]
    for cid, t in sessions.items():
        if not 0 <= t < n:
            raise FormatError(f"class {cid}: bad session index {t}")
        plan[t].append(cid)
    return ClassRegistry(plan)
