"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from fc2n.autograd import Parameter


@dataclass
class AdamHyper:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def adam_step(params: Iterable[Parameter], hyper: AdamHyper) -> None:
    """Apply one Adam update in place and zero the gradients.

    ``hyper.step_count`` is incremented first, so the first call uses t = 1
    in the bias correction.
    """
    hyper.step_count += 1
    t = hyper.step_count
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        dt = p.data.dtype
        p.adam_m *= dt.type(b1)
        p.adam_m += dt.type(1.0 - b1) * g
        p.adam_v *= dt.type(b2)
        p.adam_v += dt.type(1.0 - b2) * g * g
        m_hat = p.adam_m / dt.type(c1)
        v_hat = p.adam_v / dt.type(c2)
        p.data -= dt.type(hyper.lr) * m_hat / (np.sqrt(v_hat) + dt.type(hyper.eps))
        p.grad.fill(0)
