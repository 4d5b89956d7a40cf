"""On-disk formats: dense matrix files and the dataset manifest.

Matrix file layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"VMIL"
    4       1     format version (1)
    5       1     dtype code: 1 = float32, 2 = float64
    6       2     reserved, zero
    8       4     rows (uint32)
    12      4     cols (uint32)
    16      ...   rows * cols values, row-major, little-endian

The manifest is JSON Lines, one record per bag::

    {"id": str, "labels": [int, ...], "num_frames": int,
     "features": "features/<id>.bin" | null,
     "frames": "frames/<id>.bin" | null, "frame_shape": [H, W, C] | null,
     "frame_labels": [[int, ...], ...] | null}

Exactly one of ``features`` / ``frames`` is set; pixel clips are stored as an
N x (H*W*C) matrix. The manifest sits next to ``dataset.json`` holding
``{"format_version", "num_classes", "feature_dim", "generator"}``
(``feature_dim`` is null for pixel datasets).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import LabelSet, VideoBag
from .errors import ContractViolation

MAGIC = b"VMIL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBBHII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}

MANIFEST_NAME = "manifest.jsonl"
META_NAME = "dataset.json"


def write_matrix(path, matrix) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ContractViolation(f"expected a 2-D matrix, got shape {matrix.shape}")
    code = _CODES.get(matrix.dtype)
    if code is None:
        raise ContractViolation(f"unsupported dtype {matrix.dtype}; use float32 or float64")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, code, 0, rows, cols))
        fh.write(np.ascontiguousarray(matrix, dtype=_DTYPES[code]).tobytes())


def read_matrix(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ContractViolation(f"{path}: truncated header")
    magic, version, code, _, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ContractViolation(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported format version {version}")
    if code not in _DTYPES:
        raise ContractViolation(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = _HEADER.size + rows * cols * dtype.itemsize
    if len(blob) != expected:
        raise ContractViolation(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(rows, cols)
    return data.astype(dtype.newbyteorder("="))


def safe_filename(video_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in video_id)


def save_dataset(bags, directory, generator_config=None) -> Path:
    """Write bags plus manifest under ``directory``; returns the manifest path."""
    bags = list(bags)
    if not bags:
        raise ContractViolation("refusing to write an empty dataset")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    k = bags[0].num_classes
    dims = set()
    lines = []
    for bag in bags:
        name = safe_filename(bag.id)
        record = {
            "id": bag.id,
            "labels": bag.video_label.sorted(),
            "num_frames": bag.num_frames,
            "features": None,
            "frames": None,
            "frame_shape": None,
            "frame_labels": None
            if bag.frame_labels is None
            else [lbl.sorted() for lbl in bag.frame_labels],
        }
        if bag.features is not None:
            dims.add(bag.features.shape[1])
            (directory / "features").mkdir(exist_ok=True)
            record["features"] = f"features/{name}.bin"
            write_matrix(directory / record["features"], bag.features)
        else:
            dims.add(None)
            (directory / "frames").mkdir(exist_ok=True)
            record["frames"] = f"frames/{name}.bin"
            record["frame_shape"] = list(bag.frames.shape[1:])
            write_matrix(directory / record["frames"], bag.frames.reshape(bag.num_frames, -1))
        lines.append(json.dumps(record, sort_keys=True))
    if len(dims) != 1:
        raise ContractViolation(f"inconsistent feature dimensions or mixed modalities {sorted(map(str, dims))}")
    meta = {
        "format_version": FORMAT_VERSION,
        "num_classes": k,
        "feature_dim": dims.pop(),
        "generator": generator_config,
    }
    (directory / META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(directory) -> list:
    directory = Path(directory)
    meta_path = directory / META_NAME
    manifest = directory / MANIFEST_NAME
    if not meta_path.exists() or not manifest.exists():
        raise FileNotFoundError(f"no dataset found in {directory}")
    meta = json.loads(meta_path.read_text())
    k = int(meta["num_classes"])
    bags = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        features = frames = None
        if rec.get("features"):
            features = read_matrix(directory / rec["features"])
            n = features.shape[0]
        else:
            flat = read_matrix(directory / rec["frames"])
            frames = flat.reshape((flat.shape[0],) + tuple(rec["frame_shape"]))
            n = frames.shape[0]
        if n != rec["num_frames"]:
            raise ContractViolation(f"bag {rec['id']!r}: frame count mismatch with data file")
        frame_labels = None
        if rec.get("frame_labels") is not None:
            frame_labels = [LabelSet(frozenset(f), k) for f in rec["frame_labels"]]
        bags.append(
            VideoBag(
                rec["id"],
                LabelSet(frozenset(rec["labels"]), k),
                frames=frames,
                features=features,
                frame_labels=frame_labels,
            )
        )
    return bags
