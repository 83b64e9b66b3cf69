"""Adam optimisation of a coupling field on scene-flow samples."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NonFiniteLoss
from ..flow_lift import stack_samples
from .coupling import CouplingField
from .objective import loss_and_gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    iterations: int = 2000
    batch_size: int = 1024
    lambda_flow: float = 1.0
    lambda_rad: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_final: float | None = None  # exponential decay target; None keeps the rate constant

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_final is not None and not self.lr_final > 0:
            raise ValueError("lr_final must be positive")
        if self.lambda_flow < 0 or self.lambda_rad < 0:
            raise ValueError("loss weights must be non-negative")
        if int(self.iterations) < 0 or int(self.batch_size) < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, it: int) -> float:
        if self.lr_final is None or self.iterations <= 1:
            return self.learning_rate
        return self.learning_rate * (self.lr_final / self.learning_rate) ** (it / (self.iterations - 1))


class Adam:
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        """Return updated parameters (the input array is not modified)."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit(field: CouplingField, samples, cfg: TrainConfig = TrainConfig(), callback=None):
    """Train a copy of ``field``; returns ``(trained_field, loss_history)``.

    Each iteration draws a seeded mini-batch without replacement (the whole
    set when it is smaller than ``batch_size``) and records the batch loss
    before the update.
    """
    arr = stack_samples(samples)
    if len(arr) == 0:
        raise ValueError("fit needs at least one sample")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(field.n_params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    params = field.params.copy()
    history = np.empty(int(cfg.iterations))
    n, bs = len(arr), int(cfg.batch_size)
    for it in range(int(cfg.iterations)):
        batch = arr if n <= bs else arr.subset(np.sort(rng.choice(n, bs, replace=False)))
        loss, grad = loss_and_gradient(field, batch, cfg.lambda_flow, cfg.lambda_rad, params)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NonFiniteLoss(f"non-finite loss or gradient at iteration {it} (loss={loss})")
        history[it] = loss
        opt.lr = cfg.lr_at(it)
        params = opt.step(params, grad)
        if callback is not None:
            callback(it, loss)
        if it % 500 == 0:
            log.debug("iteration %d loss %.6g", it, loss)
    return field.copy(params), history
