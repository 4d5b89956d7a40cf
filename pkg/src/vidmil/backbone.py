"""Per-frame feature extraction.

Two extractors share one interface: :class:`SyntheticProjector`, a seeded
random projection that needs no downloads, and :class:`ResNet50Extractor`,
an adapter around torchvision's ImageNet ResNet50 with the classification
layer removed (2048-d average-pool output).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import BackboneUnavailableError, ContractViolation
from .io import safe_filename, read_matrix, write_matrix

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _check_frames(frames) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ContractViolation(f"frames must be N x H x W x C with N >= 1, got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ContractViolation("frames contain non-finite pixels")
    if frames.min() < 0 or frames.max() > 1:
        raise ContractViolation("pixel values must lie in [0, 1]")
    return frames


def resize_frames(frames: np.ndarray, size, mode="area") -> torch.Tensor:
    """N x H x W x C array -> N x C x h x w float64 tensor."""
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float64)).permute(0, 3, 1, 2)
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == "area":
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode=mode, align_corners=False)


class FeatureExtractor:
    output_dim: int

    def extract(self, frames) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    def config_hash(self) -> str:
        blob = json.dumps(self.config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class SyntheticProjector(FeatureExtractor):
    """Fixed random linear map of resized, normalised frames followed by tanh.

    Frames are area-resized to ``resize``, so any frame that is an exact
    block-upsampling of another maps to the same features.
    """

    def __init__(self, output_dim=32, resize=(8, 8), channels=3, seed=0,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD):
        if len(mean) != channels or len(std) != channels:
            raise ContractViolation("normalisation constants must match the channel count")
        self.output_dim = int(output_dim)
        self.resize = tuple(int(s) for s in resize)
        self.channels = int(channels)
        self.seed = int(seed)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        fan_in = self.channels * self.resize[0] * self.resize[1]
        rng = np.random.default_rng(self.seed)
        self.weight = rng.normal(size=(self.output_dim, fan_in)) / np.sqrt(fan_in)

    def config(self):
        return {
            "kind": "synthetic",
            "output_dim": self.output_dim,
            "resize": list(self.resize),
            "channels": self.channels,
            "seed": self.seed,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    def extract(self, frames) -> np.ndarray:
        frames = _check_frames(frames)
        if frames.shape[-1] != self.channels:
            raise ContractViolation(f"expected {self.channels} channels, got {frames.shape[-1]}")
        out = np.empty((frames.shape[0], self.output_dim))
        # one frame at a time so results never depend on batch composition
        for i in range(frames.shape[0]):
            x = resize_frames(frames[i : i + 1], self.resize)[0].numpy()
            x = (x - self.mean[:, None, None]) / self.std[:, None, None]
            out[i] = np.tanh(self.weight @ x.reshape(-1))
        return out


class ResNet50Extractor(FeatureExtractor):
    """ImageNet ResNet50 truncated after global average pooling.

    ``weights`` is ``"imagenet"`` (torchvision download/cache), a path to a
    saved state dict, or ``"random"`` for an explicitly untrained network.
    The backbone is frozen unless ``trainable=True``.
    """

    output_dim = 2048

    def __init__(self, weights="imagenet", input_size=224, trainable=False):
        try:
            import torchvision
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise BackboneUnavailableError("torchvision is not installed") from exc
        self.weights = str(weights)
        self.input_size = int(input_size)
        self.trainable = bool(trainable)
        try:
            if weights == "imagenet":
                net = torchvision.models.resnet50(weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1)
            elif weights == "random":
                net = torchvision.models.resnet50(weights=None)
            else:
                net = torchvision.models.resnet50(weights=None)
                net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        except Exception as exc:
            raise BackboneUnavailableError(f"could not load ResNet50 weights {weights!r}: {exc}") from exc
        net.fc = torch.nn.Identity()
        net.eval()
        for p in net.parameters():
            p.requires_grad_(self.trainable)
        self.net = net

    def config(self):
        return {"kind": "resnet50", "weights": self.weights, "input_size": self.input_size}

    def preprocess(self, frames) -> torch.Tensor:
        frames = _check_frames(frames)
        x = resize_frames(frames, (self.input_size, self.input_size), mode="bilinear").float()
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        return (x - mean) / std

    def forward_tensor(self, frames) -> torch.Tensor:
        """Differentiable extraction used when the backbone is trained end to end.

        BatchNorm statistics stay frozen (eval mode); only weights are updated.
        """
        return self.net(self.preprocess(frames))

    def extract(self, frames) -> np.ndarray:
        with torch.no_grad():
            out = self.forward_tensor(frames)
        return out.double().numpy()

    def parameters(self):
        return self.net.parameters()

    def state_dict(self):
        return self.net.state_dict()

    def load_state_dict(self, state):
        self.net.load_state_dict(state)


def build_extractor(kind="synthetic", **kwargs) -> FeatureExtractor:
    if kind == "synthetic":
        return SyntheticProjector(**kwargs)
    if kind == "resnet50":
        return ResNet50Extractor(**kwargs)
    raise ContractViolation(f"unknown backbone kind {kind!r}")


class FeatureCache:
    """Per-video feature files keyed by (video id, extractor config hash)."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, video_id: str, extractor: FeatureExtractor) -> Path:
        return self.directory / f"{safe_filename(video_id)}__{extractor.config_hash()}.bin"

    def get_or_compute(self, video_id: str, frames, extractor: FeatureExtractor) -> np.ndarray:
        path = self.path_for(video_id, extractor)
        if path.exists():
            return read_matrix(path)
        features = extractor.extract(frames)
        self.directory.mkdir(parents=True, exist_ok=True)
        write_matrix(path, features)
        return features
