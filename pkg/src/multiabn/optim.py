"""Adam optimizer over a named parameter dict.

Defaults follow the training recipe this model ships with: learning rate
5e-4 with beta1=0.99 and beta2=0.9.  That beta ordering is unusual (most
setups run beta2 > beta1) but it is what the recipe prints, so it is kept
as the default and both constants are plain constructor arguments for
anyone who wants the conventional (0.9, 0.999).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

DEFAULT_LR = 5e-4
DEFAULT_BETA1 = 0.99
DEFAULT_BETA2 = 0.9
DEFAULT_EPS = 1e-8


class OptimizerError(RuntimeError):
    """Raised when a step cannot be applied (e.g. non-finite gradient)."""


class AdamState:
    """First/second moment buffers plus the shared step counter ``t``."""

    __slots__ = ("m", "v", "t")

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


class Adam:
    """Adam with bias correction, updating parameters in place.

    The whole step is validated before any parameter is touched: a NaN/Inf
    gradient rejects the step with a diagnostic naming the offending
    parameter, leaving parameters, moments and the step counter unchanged.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = DEFAULT_LR,
        beta1: float = DEFAULT_BETA1,
        beta2: float = DEFAULT_BETA2,
        eps: float = DEFAULT_EPS,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(params)

    def step(self, grad_scale: float = 1.0) -> None:
        """Apply one Adam update using each parameter's accumulated ``grad``.

        ``grad_scale`` multiplies every gradient first (e.g. ``1/batch`` to
        turn per-sample sums into a batch mean).
        """
        grads = {}
        for name, p in self.params.items():
            g = p.grad * grad_scale if grad_scale != 1.0 else p.grad
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}; step rejected")
            grads[name] = g
        self.state.t += 1
        t = self.state.t
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m = self.state.m[name]
            v = self.state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
