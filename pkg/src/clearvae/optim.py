"""Stochastic optimizers for leaf tensors.

Only Adam is provided; the bias-corrected update is the standard one with
(0.9, 0.999, 1e-8) defaults.  State lives next to each parameter in the
optimizer, and ``step`` consumes whatever gradients the last backward pass
accumulated.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractViolation, Tensor


class Adam:
    """Adaptive-moment optimizer over a list of parameter tensors."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if not all(isinstance(p, Tensor) and p.requires_grad for p in self.params):
            raise ContractViolation("Adam expects tensors with requires_grad set")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one bias-corrected update; parameters without grads are skipped."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ContractViolation(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        """Moment buffers and counter, for checkpointing or inspection."""
        return {"m": self._m, "v": self._v, "t": self.step_count}


def adam_step(params, grads, state: Adam) -> None:
    """Functional form: write `grads` onto `params` and advance `state`."""
    if len(params) != len(grads):
        raise ContractViolation("params/grads length mismatch")
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=np.float64)
    state.step()
