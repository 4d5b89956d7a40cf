"""Residual bidirectional LSTM over per-frame features.

The forward and backward hidden states of the top layer are concatenated
(M = 2 * hidden_dim) and summed with a per-frame linear projection of the
input features, i.e. a 1x1 convolution over the frame axis.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ContractViolation
from .gradcheck import GradCheckReport, check_gradients


class ResidualBiLSTM(nn.Module):
    def __init__(self, input_dim, hidden_dim=512, num_layers=2, residual=True):
        super().__init__()
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.num_layers = int(num_layers)
        self.residual = bool(residual)
        self.lstm = nn.LSTM(
            self.input_dim,
            self.hidden_dim,
            num_layers=self.num_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.projection = nn.Linear(self.input_dim, self.output_dim) if self.residual else None
        self.reset_parameters()

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    def reset_parameters(self):
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
        h = self.hidden_dim
        for name, param in self.lstm.named_parameters():
            with torch.no_grad():
                if name.startswith("weight"):
                    bound = 1.0 / math.sqrt(param.shape[1])
                    param.uniform_(-bound, bound)
                else:
                    param.zero_()
                    if name.startswith("bias_ih"):
                        # gate order is (input, forget, cell, output)
                        param[h : 2 * h] = 1.0
        if self.projection is not None:
            bound = 1.0 / math.sqrt(self.input_dim)
            with torch.no_grad():
                self.projection.weight.uniform_(-bound, bound)
                self.projection.bias.zero_()

    def project(self, x: torch.Tensor) -> torch.Tensor:
        if self.projection is None:
            return torch.zeros(*x.shape[:-1], self.output_dim, dtype=x.dtype, device=x.device)
        return self.projection(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: (N, D) or (B, N, D) -> (N, M) or (B, N, M)."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[-1] != self.input_dim:
            raise ContractViolation(
                f"expected (..., N, {self.input_dim}) input, got {tuple(x.shape)}"
            )
        if x.shape[1] < 1:
            raise ContractViolation("need at least one frame")
        # zero initial (h, c) for both directions is the nn.LSTM default
        temporal, _ = self.lstm(x)
        out = temporal + self.project(x) if self.residual else temporal
        return out[0] if squeeze else out

    def final_state(self, h: torch.Tensor) -> torch.Tensor:
        """Last-step forward state concatenated with first-step backward state."""
        k = self.hidden_dim
        return torch.cat([h[..., -1, :k], h[..., 0, k:]], dim=-1)

    def zero_recurrence_(self):
        """Zero every LSTM weight and bias, leaving only the residual branch."""
        with torch.no_grad():
            for p in self.lstm.parameters():
                p.zero_()
        return self


def gradient_check(module: nn.Module, x: torch.Tensor, loss_probe, eps=1e-5) -> GradCheckReport:
    """Central-difference check of ``loss_probe(module(x))`` for every parameter."""
    return check_gradients(module, lambda: loss_probe(module(x)), eps=eps)
