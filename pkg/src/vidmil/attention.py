"""Temporal attention MIL pooling and the multi-label video classifier."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ContractViolation

LOGIT_CLIP = 30.0


class TemporalAttention(nn.Module):
    """alpha_n = softmax_n( w^T tanh(V h_n) ) with V: L x M and w: L."""

    def __init__(self, input_dim=1024, attention_dim=256):
        super().__init__()
        self.V = nn.Linear(input_dim, attention_dim, bias=False)
        self.w = nn.Linear(attention_dim, 1, bias=False)

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        return self.w(torch.tanh(self.V(h))).squeeze(-1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """``h``: (N, M) or (B, N, M) -> weights over the frame axis."""
        if h.shape[-2] < 1:
            raise ContractViolation("need at least one frame")
        if not torch.isfinite(h).all():
            raise ContractViolation("attention input contains non-finite values")
        return stable_softmax(self.logits(h), dim=-1)


def stable_softmax(logits: torch.Tensor, dim=-1) -> torch.Tensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def attention_weights(h, params: TemporalAttention) -> torch.Tensor:
    return params(torch.as_tensor(h))


def pool(h: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Z = sum_n alpha_n h_n; batched over any leading axes."""
    if h.shape[:-1] != alpha.shape:
        raise ContractViolation(
            f"attention length {tuple(alpha.shape)} does not match embeddings {tuple(h.shape)}"
        )
    return (alpha.unsqueeze(-1) * h).sum(dim=-2)


class ClassifierHead(nn.Module):
    """Linear M -> K followed by an independent sigmoid per class."""

    def __init__(self, input_dim=1024, num_classes=14):
        super().__init__()
        self.linear = nn.Linear(input_dim, num_classes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        logits = self.linear(z).clamp(-LOGIT_CLIP, LOGIT_CLIP)
        return torch.sigmoid(logits)


def classify(z, head: ClassifierHead) -> torch.Tensor:
    return head(torch.as_tensor(z))
