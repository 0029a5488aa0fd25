"""Adaptive-moment optimizer with decoupled weight decay and two parameter
groups: backbone parameters step at their own (lower) rate, everything else
at the main rate. Updates are deterministic given gradients and state."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class OptimizerError(RuntimeError):
    """Raised when a step cannot proceed (e.g., non-finite gradient)."""


class AdamW:
    def __init__(
        self,
        params: list[Parameter],
        lr: float = 2e-4,
        backbone_lr: float | None = None,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        backbone_prefix: str = "spatial.backbone",
    ):
        self.params = [p for p in params if p.trainable]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise OptimizerError("duplicate parameter names in optimizer")
        self.lr = lr
        self.backbone_lr = lr if backbone_lr is None else backbone_lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.backbone_prefix = backbone_prefix
        self.lr_scale = 1.0
        self.step_count = 0
        self.moment1 = [np.zeros_like(p.value) for p in self.params]
        self.moment2 = [np.zeros_like(p.value) for p in self.params]

    def _group_lr(self, name: str) -> float:
        base = self.backbone_lr if name.startswith(self.backbone_prefix) else self.lr
        return base * self.lr_scale

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters."""
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for p, m, v in zip(self.params, self.moment1, self.moment2):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {p.name}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            lr = self._group_lr(p.name)
            p.node.value = p.node.value - lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.node.value
            )

    def zero_grad(self) -> None:
        for p in self.params:
            p.node.grad = None
