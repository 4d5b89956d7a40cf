"""Analytic-vs-central-difference gradient comparison for torch modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class GradCheckReport:
    """Per-tensor relative errors ``|a - n|_inf / max(|a|_inf, |n|_inf, floor)``."""

    errors: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    def passed(self, tol=1e-4) -> bool:
        return self.max_error < tol


def _params(module, names=None):
    items = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if names is not None:
        items = [(n, p) for n, p in items if n in names]
    return items


def analytic_gradients(module, closure, names=None) -> dict:
    module.zero_grad(set_to_none=True)
    loss = closure()
    loss.backward()
    out = {}
    for name, p in _params(module, names):
        g = p.grad
        out[name] = np.zeros(tuple(p.shape)) if g is None else g.detach().cpu().numpy().astype(np.float64)
    module.zero_grad(set_to_none=True)
    return out


def numerical_gradients(module, closure, eps=1e-5, names=None) -> dict:
    out = {}
    with torch.no_grad():
        for name, p in _params(module, names):
            flat = p.view(-1)
            grad = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = closure().item()
                flat[i] = orig - eps
                minus = closure().item()
                flat[i] = orig
                grad[i] = (plus - minus) / (2 * eps)
            out[name] = grad.reshape(tuple(p.shape))
    return out


def compare_gradients(analytic: dict, numeric: dict, floor=1e-6) -> GradCheckReport:
    errors = {}
    for name, a in analytic.items():
        n = numeric[name]
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
        errors[name] = float(np.abs(a - n).max(initial=0.0) / scale)
    return GradCheckReport(errors)


def check_gradients(module, closure, eps=1e-5, names=None, floor=1e-6) -> GradCheckReport:
    """``closure()`` must rebuild the scalar loss from the module's current parameters."""
    analytic = analytic_gradients(module, closure, names)
    numeric = numerical_gradients(module, closure, eps, names)
    return compare_gradients(analytic, numeric, floor)
