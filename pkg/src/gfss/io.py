"""Binary feature-map files, episode manifests and provenance helpers.

A feature-map file is::

    b"GFSS" | version u16 | H u32 | W u32 | F u32      (little-endian header)
    H*W*F float32 features, row-major
    [H*W uint16 class ids, 0xFFFF = ignore]            (optional mask)

Whether the mask is present follows from the payload length, which must
match one of the two layouts exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, IoError
from .head import ClassPartition
from .metrics import IGNORE_LABEL
from .synthgen import BaseDataset, Episode, QueryImage, SupportImage

MAGIC = b"GFSS"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")
MANIFEST_NAME = "manifest.json"


@dataclass
class FeatureMap:
    features: np.ndarray            # (H, W, F) float64
    mask: np.ndarray | None = None  # (H, W) int64, IGNORE_LABEL for ignored pixels

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape


def encode_feature_map(fm: FeatureMap) -> bytes:
    feats = np.asarray(fm.features)
    if feats.ndim != 3:
        raise DataError(f"features must be (H, W, F), got {feats.shape}")
    H, W, F = feats.shape
    parts = [_HEADER.pack(MAGIC, VERSION, H, W, F), feats.astype("<f4").tobytes()]
    if fm.mask is not None:
        mask = np.asarray(fm.mask)
        if mask.shape != (H, W):
            raise DataError(f"mask {mask.shape} does not match features ({H}, {W})")
        if mask.min() < 0 or mask.max() > IGNORE_LABEL:
            raise DataError("mask ids must fit in 16 bits")
        parts.append(mask.astype("<u2").tobytes())
    return b"".join(parts)


def decode_feature_map(blob: bytes) -> FeatureMap:
    if len(blob) < _HEADER.size:
        raise DataError(f"file too short for a header ({len(blob)} bytes)")
    magic, version, H, W, F = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported version {version}")
    n_feat = H * W * F * 4
    payload = len(blob) - _HEADER.size
    if payload not in (n_feat, n_feat + H * W * 2):
        raise DataError(f"payload of {payload} bytes does not match H={H} W={W} F={F}")
    start = _HEADER.size
    feats = np.frombuffer(blob, "<f4", H * W * F, start).astype(np.float64).reshape(H, W, F)
    mask = None
    if payload > n_feat:
        mask = np.frombuffer(blob, "<u2", H * W, start + n_feat).astype(np.int64).reshape(H, W)
    return FeatureMap(feats, mask)


def write_feature_map(path, fm: FeatureMap) -> None:
    try:
        Path(path).write_bytes(encode_feature_map(fm))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_feature_map(path) -> FeatureMap:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_feature_map(blob)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


# provenance -------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, (tuple, set, range)):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def config_hash(config: dict) -> str:
    """Short SHA-256 digest of the canonical JSON form of ``config``."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


# episodes ---------------------------------------------------------------------

def _grid(flat: np.ndarray, h: int, w: int) -> np.ndarray:
    return flat.reshape(h, w, *flat.shape[1:])


def save_episode(out_dir, episode: Episode, base: BaseDataset | None = None,
                 provenance: dict | None = None) -> Path:
    """Write every image as a feature-map file plus ``manifest.json``; return the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    h, w = episode.image_size
    entries = []

    def put(role: str, i: int, feats, labels, **extra):
        name = f"{role}_{i:03d}.gfss"
        write_feature_map(out / name, FeatureMap(_grid(feats, h, w), _grid(labels, h, w)))
        entries.append({"role": role, "file": name, **extra})

    for i, s in enumerate(episode.support):
        put("support", i, s.features, np.where(s.mask == 1, s.novel_class, 0), novel_class=s.novel_class)
    for i, q in enumerate(episode.query):
        put("query", i, q.features, q.labels)
    if base is not None:
        for i, (f, y) in enumerate(zip(base.features, base.labels)):
            put("base", i, f, y)
    manifest = {
        "format_version": VERSION,
        "image_size": [h, w],
        "n_base": episode.partition.n_base,
        "n_novel": episode.partition.n_novel,
        "train_histogram": [int(c) for c in episode.train_histogram],
        "entries": entries,
        **(provenance or {}),
    }
    path = out / MANIFEST_NAME
    write_json(path, manifest)
    return path


def load_episode(manifest_path) -> tuple[Episode, BaseDataset | None, dict]:
    """Inverse of :func:`save_episode`. Base-phase images come back with folded labels only."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = read_json(manifest_path)
    try:
        part = ClassPartition(int(manifest["n_base"]), int(manifest["n_novel"]))
        h, w = (int(v) for v in manifest["image_size"])
        entries = manifest["entries"]
        hist = np.asarray(manifest["train_histogram"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{manifest_path}: malformed manifest ({exc})") from exc
    support, query, base_f, base_y = [], [], [], []
    for e in entries:
        fm = read_feature_map(manifest_path.parent / e["file"])
        if fm.features.shape[:2] != (h, w) or fm.mask is None:
            raise DataError(f"{e['file']}: expected an {h}x{w} map with a mask")
        feats = fm.features.reshape(h * w, -1)
        labels = fm.mask.reshape(-1)
        if e["role"] == "support":
            cls = int(e["novel_class"])
            support.append(SupportImage(feats, (labels == cls).astype(np.int64), cls))
        elif e["role"] == "query":
            query.append(QueryImage(feats, labels))
        elif e["role"] == "base":
            base_f.append(feats)
            base_y.append(labels)
        else:
            raise DataError(f"unknown role {e['role']!r} in {manifest_path}")
    episode = Episode(support, query, part, hist, (h, w))
    base = BaseDataset(base_f, base_y, base_y, part) if base_f else None
    return episode, base, manifest
