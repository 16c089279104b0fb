"""Feature-jitter augmentation, InfoNCE, uncertainty regularization and the gamma schedule.

Loss functions accept plain arrays or autograd ``Tensor``s. With arrays they
return floats; with any ``Tensor`` input they return a ``Tensor`` that can be
back-propagated.
"""
import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .numeric import EPSILON_FLOOR, BatchStats, as_features, whiten

HALF_LOG_HALF = 0.5 * math.log(0.5)
SIGMA_UNIFIED = 1.0 / math.sqrt(2.0)


class AugmentTarget(str, Enum):
    TARGET = "target"
    SOURCE = "source"


class GammaMode(str, Enum):
    EXPONENTIAL = "exponential"
    FIXED = "fixed"


@dataclass(frozen=True)
class NoiseConfig:
    w1: float = 1.0
    w2: float = 1.0
    target: AugmentTarget = AugmentTarget.TARGET
    seed: int = 0

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError(f"noise scales must be nonnegative, got w1={self.w1}, w2={self.w2}")
        object.__setattr__(self, "target", AugmentTarget(self.target))


@dataclass(frozen=True)
class GammaSchedule:
    """``gamma0=math.inf`` turns the uncertainty term off (plain InfoNCE baseline)."""

    gamma0: float = 1.0
    mode: GammaMode = GammaMode.EXPONENTIAL
    fixed_value: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", GammaMode(self.mode))
        if self.mode is GammaMode.EXPONENTIAL and not self.gamma0 > 0:
            raise ValueError(f"gamma0 must be positive, got {self.gamma0}")
        if self.mode is GammaMode.FIXED and not 0.0 <= self.fixed_value <= 1.0:
            raise ValueError(f"fixed gamma must lie in [0, 1], got {self.fixed_value}")

    @property
    def is_baseline(self):
        return self.mode is GammaMode.EXPONENTIAL and math.isinf(self.gamma0)

    @classmethod
    def baseline(cls):
        return cls(gamma0=math.inf)

    @classmethod
    def fixed(cls, value):
        return cls(mode=GammaMode.FIXED, fixed_value=value)


@dataclass
class LossBreakdown:
    info: float
    u: float
    total: float
    gamma: float
    sigma_scalar: float

    def to_dict(self):
        return asdict(self)


def gamma_at(schedule, epoch, total_epochs):
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if schedule.mode is GammaMode.FIXED:
        return float(schedule.fixed_value)
    if math.isinf(schedule.gamma0):
        return 0.0
    return math.exp(-schedule.gamma0 * epoch / total_epochs)


# augmentation ---------------------------------------------------------------


def sample_noise(shape, rng):
    """Standard-normal draws for the scale (``eps1``) and shift (``eps2``) jitter."""
    eps1 = rng.standard_normal(shape)
    eps2 = rng.standard_normal(shape)
    return eps1, eps2


def jitter(whitened, mu, sigma, eps1, eps2, w1=1.0, w2=1.0):
    """Reparameterized jitter ``alpha * whitened + beta``.

    ``alpha = 1 + w1*sigma*eps1`` and ``beta = mu + w2*sigma*eps2``. Works on
    arrays or tensors, so gradients can flow into ``mu`` and ``sigma``.
    """
    alpha = 1.0 + (w1 * sigma) * eps1
    beta = mu + (w2 * sigma) * eps2
    return alpha * whitened + beta


def augment(features, stats, cfg, rng):
    feats = as_features(features)
    if feats.shape[1] != stats.dim:
        raise ValueError(f"dimension mismatch: features D={feats.shape[1]}, stats D={stats.dim}")
    eps1, eps2 = sample_noise(feats.shape, rng)
    return jitter(whiten(feats, stats), stats.mu, stats.sigma, eps1, eps2, cfg.w1, cfg.w2)


def batch_stats_graph(f, eps=EPSILON_FLOOR, stop_grad_sigma=False, frozen_sigma=None):
    """Differentiable counterpart of ``compute_stats``: (mu, sigma, sigma_scalar) tensors.

    ``frozen_sigma`` substitutes a constant per-dimension std (what
    ``stop_grad_sigma`` amounts to, pinned at a given value).
    """
    if f.shape[0] < 2:
        raise ValueError("degenerate batch: need at least 2 rows for batch statistics")
    mu = ag.mean(f, axis=0, keepdims=True)
    if frozen_sigma is not None:
        sigma = ag.Tensor(np.reshape(frozen_sigma, (1, -1)))
        return mu, sigma, ag.mean(sigma)
    centered = f - mu
    var = ag.mean(centered * centered, axis=0, keepdims=True)
    sigma = ag.sqrt(ag.maximum(var, eps * eps))
    if stop_grad_sigma:
        sigma = sigma.detach()
    return mu, sigma, ag.mean(sigma)


def augment_graph(f, eps1, eps2, w1=1.0, w2=1.0, stop_grad_sigma=False, frozen_sigma=None):
    """Jitter a feature tensor with its own batch statistics; returns (f_hat, sigma_scalar)."""
    mu, sigma, sigma_scalar = batch_stats_graph(f, stop_grad_sigma=stop_grad_sigma, frozen_sigma=frozen_sigma)
    f_hat = jitter((f - mu) / sigma, mu, sigma, eps1, eps2, w1, w2)
    return f_hat, sigma_scalar


def dropout_keep_mask(shape, rate, rng):
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_mask(features, rate, rng, training=True):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return features
    return features * dropout_keep_mask(features.shape, rate, rng)


# losses -----------------------------------------------------------------------


def _finish(out, *inputs):
    if any(isinstance(x, ag.Tensor) for x in inputs):
        return out
    return out.item()


def info_nce(f_s, f_t, temperature=1.0):
    """Mean over rows of ``-log softmax_j(cos(f_s[i], f_t[j]) / temperature)[i]``."""
    a, b = ag.lift(f_s), ag.lift(f_t)
    if a.shape != b.shape or len(a.shape) != 2:
        raise ValueError(f"shape mismatch: f_s {a.shape} vs f_t {b.shape}")
    if a.shape[0] == 1:
        return _finish(ag.Tensor(0.0), f_s, f_t)
    sims = ag.cosine_matrix(a, b)
    if temperature != 1.0:
        sims = sims * (1.0 / temperature)
    logp = ag.log_softmax(sims, axis=1)
    out = -ag.mean(ag.take_diagonal(logp))
    return _finish(out, f_s, f_t)


def _check_sigma(sigma):
    value = sigma.data if isinstance(sigma, ag.Tensor) else np.asarray(sigma, dtype=np.float64)
    if value.size != 1 or not float(value) > 0.0:
        raise ValueError(f"sigma must be a positive scalar, got {value}")


def weight_by_sigma(info, sigma):
    """``info / (2 sigma^2) + 0.5 log sigma^2`` for an already evaluated InfoNCE value."""
    _check_sigma(sigma)
    var = ag.lift(sigma) * sigma
    out = info / (2.0 * var) + 0.5 * ag.log(var)
    return _finish(out, info, sigma)


def uncertainty_loss(f_s, f_t_hat, sigma, temperature=1.0):
    _check_sigma(sigma)
    info = info_nce(ag.lift(f_s), ag.lift(f_t_hat), temperature)
    return _finish(weight_by_sigma(info, ag.lift(sigma)), f_s, f_t_hat, sigma)


def _check_gamma(gamma):
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")


def total_loss_graph(f_s, f_t, f_t_hat, sigma_t, gamma, temperature=1.0, f_s_hat=None):
    """Weighted sum of the jittered-pair uncertainty loss and the clean InfoNCE.

    ``f_s_hat`` replaces ``f_s`` in the uncertainty term when the source side
    was augmented instead of the target. Returns ``(total_tensor, LossBreakdown)``.
    """
    _check_gamma(gamma)
    f_s, f_t, f_t_hat = ag.lift(f_s), ag.lift(f_t), ag.lift(f_t_hat)
    sigma_t = ag.lift(sigma_t)
    _check_sigma(sigma_t)
    info = info_nce(f_s, f_t, temperature)
    u_query = f_s if f_s_hat is None else ag.lift(f_s_hat)
    u = weight_by_sigma(info_nce(u_query, f_t_hat, temperature), sigma_t)
    total = gamma * u + (1.0 - gamma) * info
    parts = LossBreakdown(
        info=info.item(),
        u=u.item(),
        total=total.item(),
        gamma=float(gamma),
        sigma_scalar=sigma_t.item(),
    )
    return total, parts


def total_loss(f_s, f_t, f_t_hat, sigma_t, gamma, temperature=1.0):
    return total_loss_graph(f_s, f_t, f_t_hat, sigma_t, gamma, temperature)[1]


def unified_loss(f_s, f_t, f_t_hat, sigma_t, gamma, temperature=1.0):
    """Both terms written as uncertainty losses; the clean one at ``sigma = 1/sqrt(2)``.

    Differs from ``total_loss(...).total`` by the constant ``(1 - gamma) * 0.5 * log(0.5)``.
    """
    _check_gamma(gamma)
    fine = uncertainty_loss(f_s, f_t, SIGMA_UNIFIED, temperature)
    coarse = uncertainty_loss(f_s, f_t_hat, sigma_t, temperature)
    return _finish(gamma * ag.lift(coarse) + (1.0 - gamma) * ag.lift(fine), f_s, f_t, f_t_hat, sigma_t)


def sigma_floor(sigma, gamma):
    """Lower bound on the total loss from the log term alone (InfoNCE is nonnegative)."""
    return gamma * 0.5 * math.log(sigma * sigma)


__all__ = [
    "AugmentTarget",
    "BatchStats",
    "GammaMode",
    "GammaSchedule",
    "LossBreakdown",
    "NoiseConfig",
    "augment",
    "augment_graph",
    "batch_stats_graph",
    "dropout_keep_mask",
    "dropout_mask",
    "gamma_at",
    "info_nce",
    "jitter",
    "sample_noise",
    "total_loss",
    "total_loss_graph",
    "uncertainty_loss",
    "unified_loss",
]
