"""Bag/label data model, weak-label derivation and the synthetic video generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, InfeasibleSplitError


@dataclass(frozen=True)
class LabelSet:
    """A set of class indices in ``[0, num_classes)``. Empty means no pathology."""

    classes: frozenset = field(default_factory=frozenset)
    num_classes: int = 14

    def __post_init__(self):
        classes = frozenset(int(c) for c in self.classes)
        if self.num_classes < 1:
            raise ContractViolation(f"num_classes must be positive, got {self.num_classes}")
        bad = [c for c in classes if not 0 <= c < self.num_classes]
        if bad:
            raise ContractViolation(f"class indices {sorted(bad)} outside [0, {self.num_classes})")
        object.__setattr__(self, "classes", classes)

    @classmethod
    def from_multi_hot(cls, vector, threshold=None):
        vector = np.asarray(vector)
        if threshold is None:
            idx = np.flatnonzero(vector)
        else:
            idx = np.flatnonzero(vector > threshold)
        return cls(frozenset(idx.tolist()), len(vector))

    def multi_hot(self, dtype=np.float64):
        out = np.zeros(self.num_classes, dtype=dtype)
        out[sorted(self.classes)] = 1
        return out

    def union(self, other: "LabelSet") -> "LabelSet":
        if other.num_classes != self.num_classes:
            raise ContractViolation("cannot combine label sets with different class counts")
        return LabelSet(self.classes | other.classes, self.num_classes)

    def sorted(self) -> list:
        return sorted(self.classes)

    def __contains__(self, item):
        return item in self.classes

    def __len__(self):
        return len(self.classes)

    def __iter__(self):
        return iter(sorted(self.classes))

    def __bool__(self):
        return bool(self.classes)


@dataclass
class VideoBag:
    """One training instance: a clip and its video-level label set.

    Exactly one of ``frames`` (N x H x W x C, values in [0, 1]) or
    ``features`` (N x D) is set. ``frame_labels`` holds the hidden per-frame
    ground truth of synthetic clips and is never read by training.
    """

    id: str
    video_label: LabelSet
    frames: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    frame_labels: Optional[list] = None

    def __post_init__(self):
        if (self.frames is None) == (self.features is None):
            raise ContractViolation(f"bag {self.id!r}: exactly one of frames/features must be set")
        if self.frames is not None:
            if self.frames.ndim != 4:
                raise ContractViolation(f"bag {self.id!r}: frames must be N x H x W x C")
            if self.frames.size and (self.frames.min() < 0 or self.frames.max() > 1):
                raise ContractViolation(f"bag {self.id!r}: pixel values must lie in [0, 1]")
        elif self.features.ndim != 2:
            raise ContractViolation(f"bag {self.id!r}: features must be N x D")
        if self.num_frames < 1:
            raise ContractViolation(f"bag {self.id!r}: a bag needs at least one frame")
        if self.frame_labels is not None:
            if len(self.frame_labels) != self.num_frames:
                raise ContractViolation(f"bag {self.id!r}: frame_labels length != frame count")
            if derive_weak_label(self.frame_labels) != self.video_label:
                raise ContractViolation(
                    f"bag {self.id!r}: video label is not the union of its frame labels"
                )

    @property
    def num_frames(self) -> int:
        data = self.frames if self.frames is not None else self.features
        return int(data.shape[0])

    @property
    def num_classes(self) -> int:
        return self.video_label.num_classes

    def positive_frame_mask(self) -> Optional[np.ndarray]:
        if self.frame_labels is None:
            return None
        return np.array([bool(lbl) for lbl in self.frame_labels])


def derive_weak_label(frame_labels: Sequence[LabelSet]) -> LabelSet:
    """Video label under the MIL constraint: a class is present iff some frame has it."""
    if len(frame_labels) == 0:
        raise ContractViolation("derive_weak_label needs at least one frame label")
    k = frame_labels[0].num_classes
    classes = set()
    for lbl in frame_labels:
        if lbl.num_classes != k:
            raise ContractViolation("frame labels disagree on the class count")
        classes |= lbl.classes
    return LabelSet(frozenset(classes), k)


def max_aggregate_label(frame_scores, threshold: float = 0.5) -> LabelSet:
    """Class k is predicted iff its maximum frame score is strictly above ``threshold``."""
    scores = np.asarray(frame_scores, dtype=np.float64)
    if not 0.0 <= threshold <= 1.0:
        raise ContractViolation(f"threshold must lie in [0, 1], got {threshold}")
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ContractViolation("frame_scores must be a non-empty N x K matrix")
    if scores.min() < 0 or scores.max() > 1:
        raise ContractViolation("frame scores must lie in [0, 1]")
    return LabelSet.from_multi_hot(scores.max(axis=0), threshold)


@dataclass
class SyntheticDatasetConfig:
    """Planted-signal video generator settings.

    Positive clips carry each of their classes' signatures on one contiguous
    block of ``ceil(signal_frame_fraction * N)`` frames. Every frame carries
    the shared background signature plus Gaussian noise.
    """

    num_videos: int = 300
    frames_per_video: int = 30
    num_classes: int = 4
    feature_dim: int = 32
    signal_frame_fraction: float = 0.3
    noise_scale: float = 1.0
    label_density: float = 1.74
    seed: int = 0
    negative_fraction: float = 0.1
    signature_scale: float = 1.0
    block_position: str = "center"
    modality: str = "features"
    image_size: int = 16

    def __post_init__(self):
        for name in ("num_videos", "frames_per_video", "num_classes", "feature_dim", "image_size"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"{name} must be positive")
        if not 0.0 < self.signal_frame_fraction <= 1.0:
            raise ContractViolation("signal_frame_fraction must lie in (0, 1]")
        if self.noise_scale < 0:
            raise ContractViolation("noise_scale must be non-negative")
        if self.label_density < 1.0:
            raise ContractViolation("label_density is the mean label count of a positive video (>= 1)")
        if not 0.0 <= self.negative_fraction < 1.0:
            raise ContractViolation("negative_fraction must lie in [0, 1)")
        if self.block_position not in ("center", "random"):
            raise ContractViolation("block_position must be 'center' or 'random'")
        if self.modality not in ("features", "pixels"):
            raise ContractViolation("modality must be 'features' or 'pixels'")


@dataclass(frozen=True)
class SyntheticSignatures:
    classes: np.ndarray  # K x D, or K x S x S x 3 for pixels
    background: np.ndarray  # D, or S x S x 3


def synthetic_signatures(config: SyntheticDatasetConfig) -> SyntheticSignatures:
    """The class and background signatures the generator plants for ``config``."""
    sig_seq, _ = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(sig_seq)
    k = config.num_classes
    if config.modality == "features":
        classes = rng.normal(size=(k, config.feature_dim)) * config.signature_scale
        background = rng.normal(size=config.feature_dim)
    else:
        s = config.image_size
        background = rng.uniform(0.2, 0.5, size=(s, s, 3))
        classes = np.zeros((k, s, s, 3))
        for c in range(k):
            # a coloured square patch at a class-specific location
            side = max(1, s // 3)
            r0, c0 = rng.integers(0, s - side + 1, size=2)
            colour = rng.uniform(0.0, 1.0, size=3)
            colour /= max(colour.max(), 1e-12)
            classes[c, r0 : r0 + side, c0 : c0 + side, :] = 0.4 * config.signature_scale * colour
    return SyntheticSignatures(classes=classes, background=background)


def _sample_label_count(rng, mean_labels, k):
    # 1 + Poisson(mean - 1), rejection-truncated to at most k labels
    lam = mean_labels - 1.0
    while True:
        n = 1 + int(rng.poisson(lam))
        if n <= k:
            return n


def signal_block(config: SyntheticDatasetConfig, rng=None) -> tuple:
    """(start, length) of the planted block for one clip."""
    n = config.frames_per_video
    length = min(n, math.ceil(config.signal_frame_fraction * n - 1e-12))
    if config.block_position == "center" or rng is None:
        start = (n - length) // 2
    else:
        start = int(rng.integers(0, n - length + 1))
    return start, length


def generate_dataset(config: SyntheticDatasetConfig) -> list:
    """Deterministic planted-signal dataset; each bag keeps its hidden frame labels."""
    sigs = synthetic_signatures(config)
    _, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(sample_seq)
    k, n = config.num_classes, config.frames_per_video
    width = len(str(config.num_videos - 1))
    bags = []
    for v in range(config.num_videos):
        if rng.random() < config.negative_fraction:
            classes = []
        else:
            count = _sample_label_count(rng, config.label_density, k)
            classes = sorted(rng.choice(k, size=count, replace=False).tolist())
        start, length = signal_block(config, rng)
        label = LabelSet(frozenset(classes), k)
        empty = LabelSet(frozenset(), k)
        frame_labels = [
            label if classes and start <= i < start + length else empty for i in range(n)
        ]
        planted = np.zeros((n,) + sigs.background.shape)
        for c in classes:
            planted[start : start + length] += sigs.classes[c]
        noise = rng.normal(size=planted.shape) * config.noise_scale
        data = sigs.background[None] + planted + noise
        vid = f"synth_{v:0{width}d}"
        if config.modality == "features":
            bag = VideoBag(vid, derive_weak_label(frame_labels), features=data, frame_labels=frame_labels)
        else:
            bag = VideoBag(
                vid, derive_weak_label(frame_labels), frames=np.clip(data, 0.0, 1.0), frame_labels=frame_labels
            )
        bags.append(bag)
    return bags


def class_histogram(bags: Iterable[VideoBag]) -> np.ndarray:
    bags = list(bags)
    if not bags:
        return np.zeros(0, dtype=int)
    hist = np.zeros(bags[0].num_classes, dtype=int)
    for bag in bags:
        for c in bag.video_label:
            hist[c] += 1
    return hist


def _covers(bags):
    return set().union(*(b.video_label.classes for b in bags)) if bags else set()


def split_train_test(bags: Sequence[VideoBag], fraction: float = 0.5, seed: int = 0, max_tries: int = 1000):
    """Random partition with every class represented in both halves.

    Re-draws permutations (deterministically from ``seed``) until the class
    coverage condition holds.
    """
    bags = list(bags)
    if not 0.0 < fraction < 1.0:
        raise ContractViolation("fraction must lie in (0, 1)")
    if len(bags) < 2:
        raise ContractViolation("need at least two bags to split")
    hist = class_histogram(bags)
    for c, count in enumerate(hist):
        if count < 2:
            raise InfeasibleSplitError(
                f"class {c} appears in {count} bag(s); at least 2 are needed", class_index=c
            )
    needed = set(np.flatnonzero(hist).tolist())
    n_train = min(len(bags) - 1, max(1, int(round(fraction * len(bags)))))
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        order = rng.permutation(len(bags))
        train = [bags[i] for i in sorted(order[:n_train])]
        test = [bags[i] for i in sorted(order[n_train:])]
        if _covers(train) >= needed and _covers(test) >= needed:
            return train, test
    raise InfeasibleSplitError(f"no covering split found in {max_tries} draws")


def carve_validation(bags: Sequence[VideoBag], fraction: float = 0.1, seed: int = 0):
    """Hold out a random ``fraction`` (at least one bag) for early stopping."""
    bags = list(bags)
    if len(bags) < 2:
        raise ContractViolation("need at least two bags to carve a validation set")
    n_val = min(len(bags) - 1, max(1, int(round(fraction * len(bags)))))
    order = np.random.default_rng(seed).permutation(len(bags))
    val_idx = set(order[:n_val].tolist())
    train = [b for i, b in enumerate(bags) if i not in val_idx]
    val = [b for i, b in enumerate(bags) if i in val_idx]
    return train, val
