"""Attention-threshold self-supervision.

Frames whose attention exceeds the uniform level 1/N form the positive bag,
the rest the negative bag. Each bag is summarised by the plain sum of its
member embeddings and scored by a small network trained towards 1 for the
positive bag and 0 for the negative one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import LOGIT_CLIP
from .errors import ContractViolation

PROB_CLIP = 1e-7


@dataclass
class BagSplit:
    positive_indices: np.ndarray
    negative_indices: np.ndarray
    z_pos: torch.Tensor
    z_neg: torch.Tensor

    @property
    def b_pos(self) -> int:
        return len(self.positive_indices)

    @property
    def b_neg(self) -> int:
        return len(self.negative_indices)


def positive_mask(alpha: torch.Tensor) -> torch.Tensor:
    """Boolean mask of alpha > 1/N along the last axis.

    When no frame clears the threshold (exactly uniform attention) the
    argmax frame, lowest index on ties, is made positive.
    """
    n = alpha.shape[-1]
    mask = alpha > (1.0 / n)
    empty = ~mask.any(dim=-1)
    if empty.any():
        first_max = torch.argmax(alpha, dim=-1)  # first occurrence on ties
        fix = torch.nn.functional.one_hot(first_max, n).bool() & empty.unsqueeze(-1)
        mask = mask | fix
    return mask


def bag_embeddings(h: torch.Tensor, alpha: torch.Tensor):
    """(Z_pos, Z_neg, mask) for (..., N, M) embeddings and (..., N) attention."""
    mask = positive_mask(alpha.detach())
    m = mask.unsqueeze(-1).to(h.dtype)
    return (m * h).sum(dim=-2), ((1 - m) * h).sum(dim=-2), mask


def split_bags(h, alpha) -> BagSplit:
    h = torch.as_tensor(h)
    alpha = torch.as_tensor(alpha)
    if h.dim() != 2 or alpha.dim() != 1 or alpha.shape[0] != h.shape[0]:
        raise ContractViolation("split_bags expects H: N x M and alpha of length N")
    z_pos, z_neg, mask = bag_embeddings(h, alpha)
    mask = mask.cpu().numpy()
    return BagSplit(
        positive_indices=np.flatnonzero(mask),
        negative_indices=np.flatnonzero(~mask),
        z_pos=z_pos,
        z_neg=z_neg,
    )


class BagScorer(nn.Module):
    """Sigmoid score of a bag embedding; linear by default, optional tanh hidden layer."""

    def __init__(self, input_dim=1024, hidden_dim=None):
        super().__init__()
        if hidden_dim:
            self.net = nn.Sequential(nn.Linear(input_dim, hidden_dim), nn.Tanh(), nn.Linear(hidden_dim, 1))
        else:
            self.net = nn.Linear(input_dim, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z).squeeze(-1).clamp(-LOGIT_CLIP, LOGIT_CLIP))


def bag_score(z, params: BagScorer) -> torch.Tensor:
    return params(torch.as_tensor(z))


def bernoulli_nll_pair(score_pos: torch.Tensor, score_neg: torch.Tensor) -> torch.Tensor:
    """-(log s_pos + log(1 - s_neg)) / 2 with probabilities clipped to [1e-7, 1 - 1e-7]."""
    sp = score_pos.clamp(PROB_CLIP, 1 - PROB_CLIP)
    sn = score_neg.clamp(PROB_CLIP, 1 - PROB_CLIP)
    return -(torch.log(sp) + torch.log1p(-sn)) / 2


def self_sup_loss(split: BagSplit, params: BagScorer) -> torch.Tensor:
    return bernoulli_nll_pair(params(split.z_pos), params(split.z_neg))
