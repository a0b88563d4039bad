"""DP-SGD machinery: Poisson subsampling, clipping, Gaussian noise, SGD/Adam steps."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericalFault
from . import nn
from .nn import ParamVector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DpConfig:
    clip: float = 1.0
    noise_multiplier: float = 1.0
    batch_size: int = 250
    enabled: bool = True
    # divide by the expected batch size instead of the realized one
    fixed_denominator: bool = False

    def __post_init__(self):
        if not self.clip > 0:
            raise ConfigError(f"dp.clip must be positive, got {self.clip}")
        if self.noise_multiplier < 0:
            raise ConfigError(f"dp.noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.batch_size < 1:
            raise ConfigError(f"dp.batch_size must be positive, got {self.batch_size}")


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        if not self.learning_rate > 0:
            raise ConfigError(f"optimizer.learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("optimizer Adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("optimizer.adam_eps must be positive")


class PoissonSampler:
    """Includes each of ``n`` indices independently with probability ``batch_size / n``.

    An empty draw is redrawn; ``resamples`` counts how often that happened.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1 or batch_size < 1:
            raise ConfigError("dataset size and batch size must be positive")
        if batch_size > n:
            raise ConfigError(f"sampling rate {batch_size}/{n} exceeds 1")
        self.n = n
        self.rate = batch_size / n
        self.rng = rng
        self.resamples = 0

    def sample(self) -> np.ndarray:
        while True:
            idx = np.flatnonzero(self.rng.random(self.n) < self.rate)
            if idx.size:
                return idx
            self.resamples += 1
            log.debug("empty Poisson batch, resampling (%d so far)", self.resamples)


def poisson_sample(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return PoissonSampler(n, batch_size, rng).sample()


def clip_gradient(g, clip: float) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    return g / max(1.0, float(np.linalg.norm(g)) / clip)


def noisy_mean(clipped_sum: np.ndarray, batch_size: int, cfg: DpConfig,
               rng: np.random.Generator) -> np.ndarray:
    """(sum + N(0, sigma^2 C^2 I)) / denominator."""
    total = clipped_sum
    if cfg.noise_multiplier > 0:
        total = total + rng.normal(0.0, cfg.noise_multiplier * cfg.clip, size=total.shape)
    denom = cfg.batch_size if cfg.fixed_denominator else batch_size
    return total / denom


def privatize_batch(per_example_grads: Sequence[np.ndarray], cfg: DpConfig,
                    rng: np.random.Generator) -> np.ndarray:
    grads = np.asarray(per_example_grads, dtype=np.float64)
    if grads.ndim != 2 or len(grads) == 0:
        raise ValueError("privatize_batch needs a nonempty list of equal-length gradients")
    norms = np.linalg.norm(grads, axis=1)
    clipped = grads / np.maximum(1.0, norms / cfg.clip)[:, None]
    return noisy_mean(clipped.sum(axis=0), len(grads), cfg, rng)


def dp_gradient(params: ParamVector, inputs, labels, cfg: DpConfig, rng: np.random.Generator,
                peer_probs: Optional[np.ndarray] = None, mix: float = 0.0) -> np.ndarray:
    """Privatized batch gradient, or the plain batch-mean gradient when DP is off.

    Produces the same value as ``privatize_batch(per_example_gradients(...))``
    without building the per-example matrix.
    """
    if not cfg.enabled:
        return nn.batch_gradient(params, inputs, labels, peer_probs, mix)
    clipped_sum, _ = nn.clipped_gradient_sum(params, inputs, labels, cfg.clip, peer_probs, mix)
    return noisy_mean(clipped_sum, len(labels), cfg, rng)


@dataclass
class OptimizerState:
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def apply_update(params: ParamVector, grad: np.ndarray, opt: OptimizerConfig,
                 state: Optional[OptimizerState] = None) -> Tuple[ParamVector, OptimizerState]:
    """One optimizer step. Weight decay is decoupled: it is added to the step,
    after any privatization, and never passes through the Adam moments."""
    grad = np.asarray(grad, dtype=np.float64)
    theta = params.values
    if grad.shape != theta.shape:
        raise ValueError(f"gradient length {grad.size} != parameter length {theta.size}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NumericalFault(
            f"non-finite gradient at {bad.size} coordinates (first index {bad[0]}) "
            f"for {params.spec.describe()}")
    state = state if state is not None else OptimizerState()
    if opt.kind is OptimizerKind.SGD:
        step = grad
        new_state = OptimizerState(state.step + 1)
    else:
        t = state.step + 1
        m = grad * (1 - opt.adam_beta1) if state.m is None else \
            opt.adam_beta1 * state.m + (1 - opt.adam_beta1) * grad
        v = grad * grad * (1 - opt.adam_beta2) if state.v is None else \
            opt.adam_beta2 * state.v + (1 - opt.adam_beta2) * grad * grad
        m_hat = m / (1 - opt.adam_beta1 ** t)
        v_hat = v / (1 - opt.adam_beta2 ** t)
        step = m_hat / (np.sqrt(v_hat) + opt.adam_eps)
        new_state = OptimizerState(t, m, v)
    if opt.weight_decay:
        step = step + opt.weight_decay * theta
    with np.errstate(over="ignore", invalid="ignore"):
        new_theta = theta - opt.learning_rate * step
    if not np.all(np.isfinite(new_theta)):
        raise NumericalFault(
            f"update overflowed for {params.spec.describe()} "
            f"(learning rate {opt.learning_rate:g}, step {new_state.step})")
    return params.replace(new_theta), new_state


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
