"""Video-level metrics, frame localization scores and attention export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import LabelSet
from .errors import ContractViolation

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "specificity")
TABLE_COLUMNS = ("Precision", "Recall", "F1-score", "Specificity", "Accuracy")
EXPONENT_CAP = 1e4
PLACEHOLDER_LEVEL = 0.95


@dataclass
class PredictionRecord:
    video_id: str
    probabilities: np.ndarray
    predicted: LabelSet
    alpha: np.ndarray
    ground_truth: LabelSet
    positive_indices: Optional[list] = None
    frame_labels: Optional[list] = None

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.predicted.num_classes != len(self.probabilities):
            raise ContractViolation("predicted label set and probability vector disagree on K")

    @classmethod
    def from_probabilities(cls, video_id, probabilities, alpha, ground_truth, threshold=0.5, **kw):
        p = np.asarray(probabilities, dtype=np.float64)
        return cls(video_id, p, LabelSet.from_multi_hot(p, threshold), alpha, ground_truth, **kw)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "probabilities": self.probabilities.tolist(),
            "predicted": self.predicted.sorted(),
            "ground_truth": self.ground_truth.sorted(),
            "alpha": self.alpha.tolist(),
            "positive_indices": self.positive_indices,
            "frame_labels": None if self.frame_labels is None else [l.sorted() for l in self.frame_labels],
        }


@dataclass
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float

    @property
    def sensitivity(self) -> float:
        return self.recall

    @property
    def support(self) -> int:
        return self.tp + self.fn


@dataclass
class MetricsTable:
    per_class: list
    macro: dict = field(default_factory=dict)
    macro_supported: dict = field(default_factory=dict)

    def row(self, which="macro") -> dict:
        src = getattr(self, which)
        return {
            "Precision": src["precision"],
            "Recall": src["recall"],
            "F1-score": src["f1"],
            "Specificity": src["specificity"],
            "Accuracy": src["accuracy"],
        }

    def to_json(self) -> dict:
        return {
            "per_class": [
                {**{m: getattr(c, m) for m in METRIC_NAMES}, "sensitivity": c.recall,
                 "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
                for c in self.per_class
            ],
            "macro_all_classes": self.macro,
            "macro_supported_classes": self.macro_supported,
        }


def _ratio(num, den):
    return num / den if den else 0.0


def class_metrics(tp, fp, fn, tn) -> ClassMetrics:
    tp, fp, fn, tn = int(tp), int(fp), int(fn), int(tn)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassMetrics(
        tp, fp, fn, tn,
        accuracy=_ratio(tp + tn, tp + fp + fn + tn),
        precision=precision,
        recall=recall,
        f1=f1,
        specificity=_ratio(tn, tn + fp),
    )


def _macro(classes) -> dict:
    if not classes:
        return {m: 0.0 for m in METRIC_NAMES}
    return {m: sum(getattr(c, m) for c in classes) / len(classes) for m in METRIC_NAMES}


def _check_records(records):
    records = list(records)
    if not records:
        raise ContractViolation("need at least one record")
    ks = {r.ground_truth.num_classes for r in records} | {r.predicted.num_classes for r in records}
    if len(ks) != 1:
        raise ContractViolation(f"records disagree on the class count: {sorted(ks)}")
    return records, ks.pop()


def evaluate(records) -> MetricsTable:
    """Per-class confusion counts over videos, then per-class and macro metrics.

    Zero denominators give 0. ``macro`` averages over all classes,
    ``macro_supported`` over classes with at least one positive video.
    """
    records, k = _check_records(records)
    pred = np.stack([r.predicted.multi_hot(dtype=bool) for r in records])
    true = np.stack([r.ground_truth.multi_hot(dtype=bool) for r in records])
    tp = (pred & true).sum(axis=0)
    fp = (pred & ~true).sum(axis=0)
    fn = (~pred & true).sum(axis=0)
    tn = (~pred & ~true).sum(axis=0)
    per_class = [class_metrics(tp[c], fp[c], fn[c], tn[c]) for c in range(k)]
    return MetricsTable(
        per_class=per_class,
        macro=_macro(per_class),
        macro_supported=_macro([c for c in per_class if c.support > 0]),
    )


@dataclass
class LocalizationScore:
    argmax_hit_rate: float
    topk_hit_rate: float
    mean_attention_on_positive: float
    num_videos: int
    skipped: int


def localization_score(records, k_top: int = 3) -> LocalizationScore:
    """Attention-vs-planted-frame agreement over positive videos.

    ``topk_hit_rate`` is the mean fraction of the ``k_top`` highest-attention
    frames that carry a positive frame label.
    """
    hits, topk, mass = [], [], []
    skipped = 0
    for r in records:
        if r.frame_labels is None:
            skipped += 1
            continue
        positive = np.array([bool(l) for l in r.frame_labels])
        if not positive.any():
            continue
        if len(positive) != len(r.alpha):
            raise ContractViolation(f"record {r.video_id!r}: alpha length != frame label count")
        order = np.argsort(-r.alpha, kind="stable")
        hits.append(float(positive[order[0]]))
        top = order[: min(k_top, len(order))]
        topk.append(float(positive[top].mean()))
        mass.append(float(r.alpha[positive].sum()))
    n = len(hits)
    return LocalizationScore(
        argmax_hit_rate=float(np.mean(hits)) if n else 0.0,
        topk_hit_rate=float(np.mean(topk)) if n else 0.0,
        mean_attention_on_positive=float(np.mean(mass)) if n else 0.0,
        num_videos=n,
        skipped=skipped,
    )


def confusion_matrix(records, normalize=False) -> np.ndarray:
    """(K+1) x (K+1) multi-label confusion counts.

    For each true class g of a video, row g is incremented at every predicted
    class, or at the trailing "none" column when nothing is predicted. Videos
    without true classes use the trailing "none" row.
    """
    records, k = _check_records(records)
    mat = np.zeros((k + 1, k + 1), dtype=np.int64)
    for r in records:
        rows = r.ground_truth.sorted() or [k]
        cols = r.predicted.sorted() or [k]
        for g in rows:
            for p in cols:
                mat[g, p] += 1
    if not normalize:
        return mat
    sums = mat.sum(axis=1, keepdims=True)
    return np.divide(mat, sums, out=np.zeros(mat.shape), where=sums > 0)


def attention_exponent(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ContractViolation("attention values must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        exponent = 0.0001 + 1.0 / alpha
    return np.minimum(exponent, EXPONENT_CAP)


def encode_attention_frame(frame, alpha_n) -> np.ndarray:
    """Pixel-wise ``I ** (0.0001 + 1/alpha)``: low attention fades the frame to black."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size and (frame.min() < 0 or frame.max() > 1):
        raise ContractViolation("pixel values must lie in [0, 1]")
    return np.power(frame, attention_exponent(alpha_n))


def to_gray(frame: np.ndarray, bits: int = 16) -> np.ndarray:
    """Channel-mean grey image quantised to ``bits`` (8 or 16)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame.mean(axis=-1)
    top = 2 ** bits - 1
    return np.clip(np.rint(frame * top), 0, top).astype(np.uint16 if bits == 16 else np.uint8)


def write_metrics_table(rows: dict, path_stem) -> tuple:
    """Write ``{method: {column: value}}`` as ``<stem>.csv`` and ``<stem>.json``."""
    stem = Path(path_stem)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("Method",) + TABLE_COLUMNS)
        for method, row in rows.items():
            writer.writerow([method] + [f"{row[c]:.3f}" for c in TABLE_COLUMNS])
    json_path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def write_records(records, path) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records))
    return path


def export_attention(record: PredictionRecord, out_dir, frames=None, stem=None) -> dict:
    """Write the attention vector (JSON + one value per line) and encoded PNG frames.

    Frames are saved as 16-bit grey PNGs so close attention values stay
    distinguishable. ``frames`` defaults to a uniform light-grey placeholder
    clip for feature-only videos, in which case brightness encodes attention alone.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or record.video_id
    alpha = record.alpha
    (out_dir / f"{stem}_alpha.txt").write_text("".join(f"{a!r}\n" for a in alpha.tolist()))
    (out_dir / f"{stem}_alpha.json").write_text(json.dumps({
        "video_id": record.video_id,
        "alpha": alpha.tolist(),
        "positive_indices": record.positive_indices,
    }, indent=2) + "\n")
    if frames is None:
        frames = np.full((len(alpha), 32, 32), PLACEHOLDER_LEVEL)
    if len(frames) != len(alpha):
        raise ContractViolation("frame count does not match attention length")
    paths = []
    for i, (frame, a) in enumerate(zip(frames, alpha)):
        img = to_gray(encode_attention_frame(frame, a))
        p = out_dir / f"{stem}_frame{i:03d}.png"
        Image.fromarray(img).save(p, format="PNG")
        paths.append(p)
    return {"alpha": out_dir / f"{stem}_alpha.json", "frames": paths}
