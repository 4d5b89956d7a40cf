"""The five attention/recurrence wirings and the composed video MIL network."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

from .attention import ClassifierHead, TemporalAttention, pool
from .errors import ContractViolation
from .selfsup import BagScorer, bag_embeddings
from .temporal import ResidualBiLSTM

CONV = "conv_features"
LSTM = "lstm_hidden"


@dataclass(frozen=True)
class ModelVariant:
    name: str
    attention_input: str
    aggregation_target: str
    use_residual_block: bool
    use_self_supervision: bool
    use_final_state_classifier: bool

    def __post_init__(self):
        allowed = VARIANTS.get(self.name)
        if allowed is None or self._flags() != allowed._flags():
            raise ContractViolation(f"not one of the five supported wirings: {self}")

    def _flags(self):
        d = asdict(self)
        d.pop("name")
        return tuple(d.values())

    @classmethod
    def from_name(cls, name: str) -> "ModelVariant":
        try:
            return VARIANTS[name]
        except KeyError:
            raise ContractViolation(
                f"unknown variant {name!r}; choose from {', '.join(VARIANT_NAMES)}"
            ) from None


def _variant(*args):
    v = object.__new__(ModelVariant)
    for key, value in zip(
        ("name", "attention_input", "aggregation_target", "use_residual_block",
         "use_self_supervision", "use_final_state_classifier"),
        args,
    ):
        object.__setattr__(v, key, value)
    return v


VARIANTS = {
    v.name: v
    for v in (
        _variant("AttenConv", CONV, CONV, False, False, True),
        _variant("AttenConvLSTM", CONV, LSTM, False, False, False),
        _variant("AttenLSTM", LSTM, LSTM, False, False, False),
        _variant("GuidedLSTM", LSTM, LSTM, False, True, False),
        _variant("PS-DeVCEM", LSTM, LSTM, True, True, False),
    )
}
VARIANT_NAMES = tuple(VARIANTS)


@dataclass
class ModelConfig:
    variant: str = "PS-DeVCEM"
    hidden_dim: int = 512
    num_layers: int = 2
    attention_dim: int = 256
    bag_scorer_hidden: Optional[int] = None

    def __post_init__(self):
        ModelVariant.from_name(self.variant)
        for name in ("hidden_dim", "num_layers", "attention_dim"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"{name} must be positive")


@dataclass
class ForwardOutput:
    pred: torch.Tensor  # (B, K) probabilities
    alpha: torch.Tensor  # (B, N)
    h: torch.Tensor  # (B, N, M) recurrent embeddings
    z: torch.Tensor  # (B, M) representation fed to the classifier
    z_pos: Optional[torch.Tensor] = None
    z_neg: Optional[torch.Tensor] = None
    positive_mask: Optional[torch.Tensor] = None


class VideoMIL(nn.Module):
    """Frame features -> recurrence -> attention pooling -> multi-label sigmoid head."""

    def __init__(self, variant, input_dim, num_classes, hidden_dim=512, num_layers=2,
                 attention_dim=256, bag_scorer_hidden=None):
        super().__init__()
        if isinstance(variant, str):
            variant = ModelVariant.from_name(variant)
        self.variant = variant
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.temporal = ResidualBiLSTM(
            input_dim, hidden_dim, num_layers, residual=variant.use_residual_block
        )
        m = self.temporal.output_dim
        att_dim_in = self.input_dim if variant.attention_input == CONV else m
        self.attention = TemporalAttention(att_dim_in, attention_dim)
        self.classifier = ClassifierHead(m, num_classes)
        self.bag_scorer = BagScorer(m, bag_scorer_hidden) if variant.use_self_supervision else None
        self.hparams = {
            "variant": variant.name,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dim": int(hidden_dim),
            "num_layers": int(num_layers),
            "attention_dim": int(attention_dim),
            "bag_scorer_hidden": bag_scorer_hidden,
        }

    @property
    def embedding_dim(self) -> int:
        return self.temporal.output_dim

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        """``x``: (N, D) or (B, N, D) frame features; outputs are always batched."""
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[-1] != self.input_dim:
            raise ContractViolation(f"expected (B, N, {self.input_dim}) features, got {tuple(x.shape)}")
        v = self.variant
        if v.use_final_state_classifier:
            alpha = self.attention(x)
            h = self.temporal(x * alpha.unsqueeze(-1))
            z = self.temporal.final_state(h)
        else:
            h = self.temporal(x)
            alpha = self.attention(x if v.attention_input == CONV else h)
            z = pool(h, alpha)
        out = ForwardOutput(pred=self.classifier(z), alpha=alpha, h=h, z=z)
        if v.use_self_supervision:
            out.z_pos, out.z_neg, out.positive_mask = bag_embeddings(h, alpha)
        return out


def forward_variant(model: VideoMIL, x) -> ForwardOutput:
    return model(torch.as_tensor(x))


def build_model(config: ModelConfig, input_dim: int, num_classes: int) -> VideoMIL:
    return VideoMIL(
        config.variant,
        input_dim,
        num_classes,
        hidden_dim=config.hidden_dim,
        num_layers=config.num_layers,
        attention_dim=config.attention_dim,
        bag_scorer_hidden=config.bag_scorer_hidden,
    )
