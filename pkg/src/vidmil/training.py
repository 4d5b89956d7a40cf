"""Losses, clip preprocessing, checkpoints and the training loop."""

from __future__ import annotations

import io as _io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabelSet, VideoBag
from .errors import ContractViolation, TrainingDivergedError
from .model import ModelConfig, ModelVariant, VideoMIL, build_model
from .selfsup import PROB_CLIP, bernoulli_nll_pair, positive_mask

CHECKPOINT_VERSION = 1


@dataclass
class TrainingConfig:
    sequence_length: int = 30
    epochs: int = 500
    batch_size: int = 1
    lr_min: float = 1e-5
    lr_max: float = 1e-4
    lr_cycle_epochs: int = 10
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    lambda_ss: float = 1.0
    threshold: float = 0.5
    seed: int = 0
    patience: Optional[int] = None
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.sequence_length < 1 or self.batch_size < 1 or self.lr_cycle_epochs < 1:
            raise ContractViolation("sequence_length, batch_size and lr_cycle_epochs must be positive")
        if self.epochs < 0:
            raise ContractViolation("epochs must be non-negative")
        if not 0 < self.lr_min <= self.lr_max:
            raise ContractViolation("learning-rate bounds must satisfy 0 < lr_min <= lr_max")
        if self.weight_decay < 0 or self.lambda_ss < 0:
            raise ContractViolation("weight_decay and lambda_ss must be non-negative")
        if not 0 <= self.threshold <= 1:
            raise ContractViolation("threshold must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ContractViolation("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


def _targets(gt, like: torch.Tensor) -> torch.Tensor:
    if isinstance(gt, LabelSet):
        gt = gt.multi_hot()
    return torch.as_tensor(np.asarray(gt) if not torch.is_tensor(gt) else gt, dtype=like.dtype)


def video_loss(pred: torch.Tensor, gt) -> torch.Tensor:
    """Mean binary cross-entropy over classes (and over videos when batched)."""
    g = _targets(gt, pred)
    if g.shape != pred.shape:
        raise ContractViolation(f"prediction shape {tuple(pred.shape)} != target shape {tuple(g.shape)}")
    y = pred.clamp(PROB_CLIP, 1 - PROB_CLIP)
    return -(g * torch.log(y) + (1 - g) * torch.log1p(-y)).mean()


def total_loss(pred, gt, self_sup=None, lam: float = 1.0) -> torch.Tensor:
    """``video_loss + lam * self_sup``; with ``lam == 0`` the self-supervision term is not built."""
    loss = video_loss(pred, gt)
    if lam == 0 or self_sup is None:
        return loss
    return loss + lam * self_sup


def per_video_losses(model: VideoMIL, out, targets: torch.Tensor, lam: float):
    """(total, video, self_sup) per clip in a batch; self_sup is None when unused."""
    y = out.pred.clamp(PROB_CLIP, 1 - PROB_CLIP)
    vid = -(targets * torch.log(y) + (1 - targets) * torch.log1p(-y)).mean(dim=-1)
    if model.variant.use_self_supervision and lam != 0:
        ss = bernoulli_nll_pair(model.bag_scorer(out.z_pos), model.bag_scorer(out.z_neg))
        return vid + lam * ss, vid, ss
    return vid, vid, None


def subsample_indices(n: int, target_len: int = 30) -> np.ndarray:
    """Evenly spaced source indices ``floor(i * n / target_len + 1/2)``; identity when n <= target_len."""
    if n < 1:
        raise ContractViolation("need at least one frame")
    if n <= target_len:
        return np.arange(n)
    return np.floor(np.arange(target_len) * n / target_len + 0.5).astype(np.int64)


def subsample_uniform(video: VideoBag, target_len: int = 30) -> VideoBag:
    if video.num_frames <= target_len:
        return video
    idx = subsample_indices(video.num_frames, target_len)
    return VideoBag(
        video.id,
        video.video_label,
        frames=None if video.frames is None else video.frames[idx],
        features=None if video.features is None else video.features[idx],
        frame_labels=None if video.frame_labels is None else _keep_labels(video, idx),
    )


def _keep_labels(video, idx):
    kept = [video.frame_labels[i] for i in idx]
    # dropped frames may have carried the only instance of a class
    if set().union(*(l.classes for l in kept)) != video.video_label.classes:
        return None
    return kept


def flip(frames: np.ndarray, axis: str) -> np.ndarray:
    """Flip an N x H x W x C clip horizontally (``"h"``) or vertically (``"v"``)."""
    if axis == "h":
        return frames[:, :, ::-1, :].copy()
    if axis == "v":
        return frames[:, ::-1, :, :].copy()
    raise ContractViolation(f"unknown flip axis {axis!r}")


def zoom(frames: np.ndarray, scale: float) -> np.ndarray:
    """Centre-crop ``scale`` of each side and resize back bilinearly."""
    if not 0 < scale <= 1:
        raise ContractViolation("zoom scale must lie in (0, 1]")
    n, h, w, c = frames.shape
    ch, cw = max(1, int(round(scale * h))), max(1, int(round(scale * w)))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = np.ascontiguousarray(frames[:, top : top + ch, left : left + cw, :], dtype=np.float64)
    x = torch.from_numpy(crop).permute(0, 3, 1, 2)
    if (ch, cw) != (h, w):
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1).numpy().clip(0.0, 1.0).astype(frames.dtype, copy=False)


ZOOM_RANGE = (0.8, 1.0)


def augment(video: VideoBag, rng: np.random.Generator) -> VideoBag:
    """Random h/v flips and centre zoom, each with probability 1/2, shared by all frames."""
    if video.frames is None:
        warnings.warn(f"bag {video.id!r} has no pixel frames; augmentation skipped", stacklevel=2)
        return video
    frames = video.frames
    # always draw the same number of variates so the stream stays aligned
    u_h, u_v, u_z = rng.random(3)
    scale = rng.uniform(*ZOOM_RANGE)
    if u_h < 0.5:
        frames = flip(frames, "h")
    if u_v < 0.5:
        frames = flip(frames, "v")
    if u_z < 0.5:
        frames = zoom(frames, scale)
    return VideoBag(video.id, video.video_label, frames=frames, frame_labels=video.frame_labels)


@dataclass
class Checkpoint:
    """Model parameters plus everything needed to rebuild and audit them."""

    params: dict
    hparams: dict
    config: dict
    epoch: int
    val_loss: float
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    backbone: dict = field(default_factory=dict)

    def build_model(self) -> VideoMIL:
        hp = dict(self.hparams)
        model = VideoMIL(hp.pop("variant"), hp.pop("input_dim"), hp.pop("num_classes"), **hp)
        dtypes = {a.dtype for a in self.params.values()}
        if dtypes == {np.dtype("float64")}:
            model = model.double()
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}
        model.load_state_dict(state)
        model.eval()
        return model

    def save(self, path) -> Path:
        """Single ``.npz`` archive: ``param/<name>`` arrays, ``rng/torch`` bytes, JSON ``meta``."""
        path = Path(path)
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"backbone/{k}": v for k, v in self.backbone.items()})
        if "torch" in self.rng_state:
            arrays["rng/torch"] = np.asarray(self.rng_state["torch"], dtype=np.uint8)
        meta = {
            "version": CHECKPOINT_VERSION,
            "hparams": self.hparams,
            "config": self.config,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "numpy_rng": self.rng_state.get("numpy"),
            "history": self.history,
            "extra": self.extra,
        }
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        buf = _io.BytesIO()
        np.savez(buf, **arrays)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ContractViolation(f"unsupported checkpoint version {meta.get('version')}")
            params = {k[len("param/"):]: archive[k].copy() for k in archive.files if k.startswith("param/")}
            backbone = {k[len("backbone/"):]: archive[k].copy() for k in archive.files if k.startswith("backbone/")}
            rng = {}
            if "rng/torch" in archive.files:
                rng["torch"] = archive["rng/torch"].copy()
        if meta.get("numpy_rng") is not None:
            rng["numpy"] = meta["numpy_rng"]
        return cls(
            params=params,
            hparams=meta["hparams"],
            config=meta["config"],
            epoch=meta["epoch"],
            val_loss=float(meta["val_loss"]),
            rng_state=rng,
            history=meta["history"],
            extra=meta.get("extra", {}),
            backbone=backbone,
        )


def _snapshot(model, config, epoch, val_loss, history, np_rng, extractor=None) -> Checkpoint:
    backbone = {}
    if getattr(extractor, "trainable", False):
        backbone = {k: v.detach().cpu().numpy().copy() for k, v in extractor.state_dict().items()}
    return Checkpoint(
        params={k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()},
        hparams=dict(model.hparams),
        config=config_to_dict(config),
        epoch=epoch,
        val_loss=float(val_loss),
        rng_state={"torch": torch.get_rng_state().numpy().copy(), "numpy": np_rng.bit_generator.state},
        history=_history_for_checkpoint(history),
        backbone=backbone,
    )


def _history_for_checkpoint(history):
    # wall-clock time would make checkpoints differ between identical runs
    return [{k: v for k, v in h.items() if k != "wall_time"} for h in history]


def config_to_dict(config) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class FeaturePipeline:
    """Turns bags into model-ready (N, D) tensors: subsample, optional augment, extract."""

    def __init__(self, config: TrainingConfig, extractor=None):
        self.config = config
        self.extractor = extractor
        self._cache = {}
        self._warned = False

    @property
    def trainable_backbone(self) -> bool:
        return bool(getattr(self.extractor, "trainable", False))

    def __call__(self, bag: VideoBag, rng=None) -> torch.Tensor:
        bag = subsample_uniform(bag, self.config.sequence_length)
        if bag.features is not None:
            if rng is not None and self.config.augment and not self._warned:
                warnings.warn("feature-only bags: augmentation skipped", stacklevel=2)
                self._warned = True
            key = (bag.id, bag.num_frames)
            if key not in self._cache:
                self._cache[key] = torch.as_tensor(bag.features, dtype=self.config.torch_dtype)
            return self._cache[key]
        if self.extractor is None:
            raise ContractViolation(f"bag {bag.id!r} has pixel frames but no feature extractor was given")
        training = rng is not None
        if training and self.config.augment:
            bag = augment(bag, rng)
        if self.trainable_backbone:
            # weights change every step, so nothing is cached
            if training:
                return self.extractor.forward_tensor(bag.frames).to(self.config.torch_dtype)
            return torch.as_tensor(self.extractor.extract(bag.frames), dtype=self.config.torch_dtype)
        if training and self.config.augment:
            return torch.as_tensor(self.extractor.extract(bag.frames), dtype=self.config.torch_dtype)
        key = (bag.id, bag.num_frames)
        if key not in self._cache:
            self._cache[key] = torch.as_tensor(self.extractor.extract(bag.frames), dtype=self.config.torch_dtype)
        return self._cache[key]


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def batch_losses(model, pipeline, bags, lam, rng=None):
    """Per-clip losses for a list of bags, stacking clips of equal length."""
    feats = [pipeline(b, rng) for b in bags]
    totals, vids, sss = [None] * len(bags), [None] * len(bags), [None] * len(bags)
    groups = {}
    for i, f in enumerate(feats):
        groups.setdefault(tuple(f.shape), []).append(i)
    for idx in groups.values():
        x = torch.stack([feats[i] for i in idx])
        targets = torch.stack(
            [torch.as_tensor(bags[i].video_label.multi_hot(), dtype=x.dtype) for i in idx]
        )
        out = model(x)
        tot, vid, ss = per_video_losses(model, out, targets, lam)
        for j, i in enumerate(idx):
            totals[i], vids[i] = tot[j], vid[j]
            sss[i] = None if ss is None else ss[j]
    return torch.stack(totals), torch.stack(vids), (None if sss[0] is None else torch.stack(sss))


def evaluate_loss(model, pipeline, bags, lam=0.0, batch_size=64) -> float:
    """Mean video-level BCE over ``bags`` in eval mode (the early-stopping criterion)."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for chunk in _batches(list(bags), batch_size):
            _, vid, _ = batch_losses(model, pipeline, chunk, 0.0)
            total += float(vid.double().sum())
    return total / len(bags)


def train(config: TrainingConfig, variant, train_set, val_set, model_config: Optional[ModelConfig] = None,
          extractor=None, log=None) -> Checkpoint:
    """Adam + triangular cyclic LR; returns the checkpoint with the lowest validation loss.

    ``log`` is called with one dict per epoch ``{epoch, train_loss, val_loss, lr, wall_time}``.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise ContractViolation("train and validation sets must be non-empty")
    if isinstance(variant, ModelVariant):
        variant = variant.name
    model_config = model_config or ModelConfig(variant=variant)
    if model_config.variant != variant:
        model_config = ModelConfig(**{**asdict(model_config), "variant": variant})
    ks = {b.num_classes for b in train_set + val_set}
    if len(ks) != 1:
        raise ContractViolation("bags disagree on the class count")
    pipeline = FeaturePipeline(config, extractor)
    input_dim = int(pipeline(train_set[0]).shape[-1])

    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = build_model(model_config, input_dim, ks.pop())
        if config.dtype == "float64":
            model = model.double()
        np_rng = np.random.default_rng(config.seed)
        lam = config.lambda_ss if model.variant.use_self_supervision else 0.0

        params = list(model.parameters())
        if pipeline.trainable_backbone:
            params += [p for p in extractor.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(
            params, lr=config.lr_max, betas=config.betas, weight_decay=config.weight_decay
        )
        steps_per_epoch = -(-len(train_set) // config.batch_size)
        half_cycle = max(1, (config.lr_cycle_epochs * steps_per_epoch) // 2)
        scheduler = torch.optim.lr_scheduler.CyclicLR(
            optimizer, base_lr=config.lr_min, max_lr=config.lr_max, step_size_up=half_cycle,
            mode="triangular", cycle_momentum=False,
        )

        start = time.perf_counter()
        model.eval()
        with torch.no_grad():
            init_train = evaluate_loss(model, pipeline, train_set)
        best_val = evaluate_loss(model, pipeline, val_set)
        history = [{
            "epoch": 0, "train_loss": init_train, "val_loss": best_val,
            "lr": scheduler.get_last_lr()[0], "wall_time": time.perf_counter() - start,
        }]
        if log:
            log(history[-1])
        best = _snapshot(model, config, 0, best_val, history, np_rng, extractor)
        stale = 0
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = np_rng.permutation(len(train_set))
            running, count = 0.0, 0
            for chunk in _batches([train_set[i] for i in order], config.batch_size):
                tot, vid, ss = batch_losses(model, pipeline, chunk, lam, rng=np_rng)
                loss = tot.mean()
                if not torch.isfinite(loss):
                    comps = {"video": float(vid.detach().mean())}
                    if ss is not None:
                        comps["self_sup"] = float(ss.detach().mean())
                    raise TrainingDivergedError(epoch, [b.id for b in chunk], comps)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                scheduler.step()
                running += float(tot.detach().double().sum())
                count += len(chunk)
            val = evaluate_loss(model, pipeline, val_set)
            history.append({
                "epoch": epoch, "train_loss": running / count, "val_loss": val,
                "lr": scheduler.get_last_lr()[0], "wall_time": time.perf_counter() - start,
            })
            if log:
                log(history[-1])
            if val < best_val:
                best_val, stale = val, 0
                best = _snapshot(model, config, epoch, val, history, np_rng, extractor)
            else:
                stale += 1
                if config.patience is not None and stale >= config.patience:
                    break
        best.history = _history_for_checkpoint(history)
    return best


def predict_records(model: VideoMIL, bags, config: Optional[TrainingConfig] = None, extractor=None) -> list:
    """Eval-mode predictions as :class:`~vidmil.metrics.PredictionRecord` objects."""
    from .metrics import PredictionRecord

    config = config or TrainingConfig()
    pipeline = FeaturePipeline(config, extractor)
    model.eval()
    dtype = next(model.parameters()).dtype
    records = []
    with torch.no_grad():
        for bag in bags:
            out = model(pipeline(bag).to(dtype))
            mask = out.positive_mask if out.positive_mask is not None else positive_mask(out.alpha)
            records.append(PredictionRecord.from_probabilities(
                bag.id,
                out.pred[0].double().numpy(),
                out.alpha[0].double().numpy(),
                bag.video_label,
                threshold=config.threshold,
                positive_indices=np.flatnonzero(mask[0].numpy()).tolist(),
                frame_labels=subsample_uniform(bag, config.sequence_length).frame_labels,
            ))
    return records
