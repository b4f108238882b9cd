"""Conditional densities and the two pooling rules used to fuse them.

Parameters are held as :class:`~probmix.diffcore.Tensor` so that NLLs and
fused densities stay differentiable.  Every density is batched over leading
axes; the last axis is the response (Gaussian) or class (categorical) axis.
A fusion weight ``lam`` may be a scalar or an array matching the batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor

VARIANCE_FLOOR = 1e-6
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lam_column(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0.0) or np.any(lam > 1.0):
        raise ValueError("fusion weight must lie in [0, 1]")
    return lam[..., None]


def _is_endpoint(lam, value: float) -> bool:
    return bool(np.all(np.asarray(lam) == value))


@dataclass(frozen=True)
class GaussianDensity:
    """Diagonal Gaussian with per-dimension variance."""

    mean: Tensor
    var: Tensor

    def __post_init__(self):
        mean, var = as_tensor(self.mean), as_tensor(self.var)
        if not mean.requires_grad and mean.ndim == 0:
            mean = Tensor(np.atleast_1d(mean.value))
        if not var.requires_grad:
            v = np.broadcast_to(np.atleast_1d(var.value), mean.shape)
            if np.any(v <= 0.0):
                raise ValueError("Gaussian variance must be positive")
            var = Tensor(np.maximum(v, VARIANCE_FLOOR))
        if mean.shape != var.shape:
            raise ValueError(f"mean/variance shape mismatch: {mean.shape} vs {var.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def take(self, index) -> "GaussianDensity":
        return GaussianDensity(self.mean.take(index), self.var.take(index))

    def log_prob(self, y) -> Tensor:
        return -gaussian_nll(self, y)


@dataclass(frozen=True)
class CategoricalDensity:
    """Class distribution stored as unnormalized logits."""

    logits: Tensor

    def __post_init__(self):
        object.__setattr__(self, "logits", as_tensor(self.logits))

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(dc.log_softmax(Tensor(self.logits.value)).value)

    def log_probs(self) -> Tensor:
        return dc.log_softmax(self.logits)

    def take(self, index) -> "CategoricalDensity":
        return CategoricalDensity(self.logits.take(index))

    def log_prob(self, k) -> Tensor:
        return -categorical_nll(self, k)


Density = Union[GaussianDensity, CategoricalDensity]


@dataclass(frozen=True)
class MixtureDensity:
    """Two-component mixture ``lam * first + (1 - lam) * second``."""

    first: Density
    second: Density
    weight: np.ndarray

    def __post_init__(self):
        if type(self.first) is not type(self.second):
            raise TypeError("mixture components must be of the same kind")
        w = np.asarray(self.weight, dtype=np.float64)
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise ValueError("mixture weight must lie in [0, 1]")
        object.__setattr__(self, "weight", w)


# -- negative log-likelihoods -------------------------------------------------

def gaussian_nll(p: GaussianDensity, y) -> Tensor:
    """Per-sample NLL, summed over the response dimension."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 0:
        y = y[None]
    if y.shape[-1] != p.dim:
        raise ValueError(f"response dim {y.shape[-1]} does not match density dim {p.dim}")
    resid = y - p.mean
    terms = 0.5 * dc.log(p.var) + dc.square(resid) / (2.0 * p.var) + HALF_LOG_2PI
    return terms.sum(axis=-1)


def _one_hot(k, num_classes: int) -> np.ndarray:
    k = np.asarray(k)
    if not np.issubdtype(k.dtype, np.integer):
        if np.any(k != np.round(k)):
            raise ValueError("class index must be an integer")
        k = k.astype(np.int64)
    if np.any(k < 0) or np.any(k >= num_classes):
        raise IndexError(f"class index out of range [0, {num_classes})")
    return np.eye(num_classes)[k]


def categorical_nll(p: CategoricalDensity, k) -> Tensor:
    """``-(logits_k - logsumexp(logits))`` for class index ``k``."""
    return categorical_expected_nll(p, _one_hot(k, p.num_classes))


def categorical_expected_nll(p: CategoricalDensity, label_probs) -> Tensor:
    """NLL averaged over a label distribution, ``-sum_k q_k log pi_k``."""
    q = np.asarray(label_probs, dtype=np.float64)
    return -(dc.log_softmax(p.logits) * q).sum(axis=-1)


def _component_log_prob(p: Density, y) -> Tensor:
    if isinstance(p, GaussianDensity):
        return -gaussian_nll(p, y)
    return dc.log_softmax(p.logits) if y is None else -categorical_nll(p, y)


def mixture_log_prob(m: MixtureDensity, y=None) -> Tensor:
    """Mixture log density at ``y``.

    For categorical mixtures ``y=None`` returns the log-probabilities of
    every class (last axis).
    """
    w = m.weight
    if y is None and isinstance(m.first, CategoricalDensity):
        w = w[..., None]
    with np.errstate(divide="ignore"):
        log_w, log_1mw = np.log(w), np.log1p(-w)
    a = _component_log_prob(m.first, y)
    b = _component_log_prob(m.second, y)
    if _is_endpoint(w, 1.0):
        return a
    if _is_endpoint(w, 0.0):
        return b
    return dc.logaddexp(log_w + a, log_1mw + b)


def mixture_nll(m: MixtureDensity, y) -> Tensor:
    return -mixture_log_prob(m, y)


def mixture_expected_nll(m: MixtureDensity, label_probs) -> Tensor:
    """Categorical mixture NLL averaged over a label distribution."""
    q = np.asarray(label_probs, dtype=np.float64)
    return -(mixture_log_prob(m, None) * q).sum(axis=-1)


# -- fusion -------------------------------------------------------------------

def fuse_natural_parameters(eta_i, eta_j, lam):
    """Affine combination ``lam * eta_i + (1 - lam) * eta_j``.

    Log-linear pooling of two members of one exponential family keeps the
    sufficient statistic and mixes natural parameters this way; the log
    partition is recomputed from the result, so the normalizer never has to
    be materialized.
    """
    lam = _lam_column(lam)
    return lam * eta_i + (1.0 - lam) * eta_j


def gaussian_log_linear_fuse(p_i: GaussianDensity, p_j: GaussianDensity, lam) -> GaussianDensity:
    """Weighted geometric mean of two diagonal Gaussians, renormalized.

    Precision is the ``lam``-weighted average of the input precisions and the
    mean is the precision-weighted average of the input means.
    """
    if p_i.mean.shape[-1] != p_j.mean.shape[-1]:
        raise ValueError("Gaussian dimension mismatch")
    if _is_endpoint(lam, 1.0):
        return p_i
    if _is_endpoint(lam, 0.0):
        return p_j
    prec_i, prec_j = 1.0 / p_i.var, 1.0 / p_j.var
    precision = fuse_natural_parameters(prec_i, prec_j, lam)
    shift = fuse_natural_parameters(p_i.mean * prec_i, p_j.mean * prec_j, lam)
    var = 1.0 / precision
    return GaussianDensity(shift * var, var)


def categorical_log_linear_fuse(p_i: CategoricalDensity, p_j: CategoricalDensity,
                                lam) -> CategoricalDensity:
    """Logit-space interpolation; the normalizer is absorbed by the softmax."""
    if p_i.num_classes != p_j.num_classes:
        raise ValueError("class-count mismatch")
    if _is_endpoint(lam, 1.0):
        return p_i
    if _is_endpoint(lam, 0.0):
        return p_j
    return CategoricalDensity(fuse_natural_parameters(p_i.logits, p_j.logits, lam))


def log_linear_fuse(p_i: Density, p_j: Density, lam) -> Density:
    if isinstance(p_i, GaussianDensity):
        return gaussian_log_linear_fuse(p_i, p_j, lam)
    return categorical_log_linear_fuse(p_i, p_j, lam)


def linear_fuse(p_i: Density, p_j: Density, lam) -> MixtureDensity:
    return MixtureDensity(p_i, p_j, lam)


# -- sampling -----------------------------------------------------------------

def sample_gaussian_reparameterized(p: GaussianDensity, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1:] != p.mean.shape[-1:]:
        raise ValueError("noise dimension does not match the density")
    return p.mean + dc.sqrt(p.var) * noise


def sample_categorical(p: CategoricalDensity, rng: np.random.Generator) -> np.ndarray:
    """One class index per batch row, by inverse CDF on the softmax."""
    probs = p.probs
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None]
    idx = np.sum(cdf <= u * cdf[..., -1:], axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)
