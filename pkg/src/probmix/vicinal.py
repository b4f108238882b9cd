"""Mixing coefficients, response perturbation kernels and the mixup-family losses.

Every loss builder follows the same recipe: draw ``count`` edges from the
sampling graph, draw ``mc_samples`` mixing coefficients per edge, build the
mixed or fused prediction for each (edge, draw) row, and average NLLs.  The
rows are laid out draw-major (row ``k * count + e``).  Random draws come from
separate streams (edges, lambda, perturbation, embedding noise) so that two
builders fed the same seed see the same edges and coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .densities import (
    GaussianDensity,
    MixtureDensity,
    categorical_expected_nll,
    categorical_nll,
    gaussian_log_linear_fuse,
    gaussian_nll,
    linear_fuse,
    log_linear_fuse,
    mixture_expected_nll,
    mixture_nll,
    sample_gaussian_reparameterized,
)
from .diffcore import Tensor
from .graphs import SamplingGraph, sample_edges

FAMILIES = ("erm", "mix", "m-mix", "probmix", "m-probmix", "m-probmix-star")
METHODS = (
    "erm", "mix", "lock-mix", "m-mix", "lock-m-mix",
    "probmix", "lock-probmix", "m-probmix", "lock-m-probmix",
    "m-probmix-star", "lock-m-probmix-star",
)
NINE_METHODS = METHODS[:9]
POOLINGS = ("log-linear", "linear")
CRITERIA = ("expected-log-likelihood", "log-expected-likelihood")
LABEL_MODES = ("exact", "sampled", "onehot")


# -- randomness -----------------------------------------------------------------

@dataclass
class RngStreams:
    """Independent generators for each source of randomness in a run."""

    init: np.random.Generator
    edges: np.random.Generator
    lam: np.random.Generator
    perturb: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "RngStreams":
        children = np.random.SeedSequence(seed).spawn(5)
        return cls(*(np.random.Generator(np.random.Philox(c)) for c in children))


def as_streams(rng) -> RngStreams:
    if isinstance(rng, RngStreams):
        return rng
    if isinstance(rng, np.random.Generator):
        return RngStreams(rng, rng, rng, rng, rng)
    return RngStreams.from_seed(rng)


# -- configuration types ----------------------------------------------------------

@dataclass(frozen=True)
class MixingDistribution:
    """``lambda ~ Beta(alpha, alpha)``."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class PerturbationSpec:
    beta: float
    task: str = "regression"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class RegularizerConfig:
    method: str = "erm"
    pooling: str = "log-linear"
    alpha: float = 0.1
    beta: float = 0.01
    k_neighbors: int = 5
    mc_samples: int = 1
    mix_layer: int | None = None
    criterion: str = "expected-log-likelihood"
    label_mode: str = "exact"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.alpha <= 0 or self.beta < 0:
            raise ValueError("need alpha > 0 and beta >= 0")

    @property
    def local(self) -> bool:
        return self.method.startswith("lock-")

    @property
    def family(self) -> str:
        return self.method[len("lock-"):] if self.local else self.method

    @property
    def mixing(self) -> MixingDistribution:
        return MixingDistribution(self.alpha)


@dataclass
class FusedTarget:
    """A sampled response, or an exact distribution over class labels.

    ``value`` holds sampled responses (regression rows or class indices);
    ``label_probs`` holds per-row class probabilities for exact expectations.
    """

    value: np.ndarray | None = None
    label_probs: np.ndarray | None = None
    weights: tuple = field(default=(1.0,))

    def __post_init__(self):
        if (self.value is None) == (self.label_probs is None):
            raise ValueError("exactly one of value / label_probs must be set")


# -- elementary operations ---------------------------------------------------------

def sample_lambda(dist: MixingDistribution, rng: np.random.Generator, size=None):
    return rng.beta(dist.alpha, dist.alpha, size=size)


def mix_inputs(x_i, x_j, lam):
    """``lam * x_i + (1 - lam) * x_j``; ``lam`` broadcasts over the last axis."""
    lam = np.asarray(lam, dtype=np.float64)
    if isinstance(x_i, Tensor) or isinstance(x_j, Tensor):
        x_i, x_j = dc.as_tensor(x_i), dc.as_tensor(x_j)
        if x_i.shape != x_j.shape:
            raise ValueError("mix_inputs: shape mismatch")
        lam = lam[..., None] if lam.ndim else lam
        return lam * x_i + (1.0 - lam) * x_j
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValueError("mix_inputs: shape mismatch")
    if lam.ndim and x_i.ndim > lam.ndim:
        lam = lam[..., None]
    return lam * x_i + (1.0 - lam) * x_j


def fuse_perturbed_regression(y_i, y_j, lam, beta: float, rng: np.random.Generator,
                              pooling: str = "log-linear") -> FusedTarget:
    """Draw ``y~`` from the fusion of ``N(y_i, beta I)`` and ``N(y_j, beta I)``.

    Log-linear fusion of two equal-variance Gaussians is ``N(lam y_i + (1-lam) y_j, beta I)``;
    linear fusion is the two-component mixture.  ``beta == 0`` is the noiseless limit.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    y_i = np.atleast_1d(np.asarray(y_i, dtype=np.float64))
    y_j = np.atleast_1d(np.asarray(y_j, dtype=np.float64))
    lam = np.asarray(lam, dtype=np.float64)
    lam_col = lam[..., None] if lam.ndim else lam
    if pooling == "log-linear":
        center = lam_col * y_i + (1.0 - lam_col) * y_j
    elif pooling == "linear":
        pick = rng.random(np.shape(lam)) < lam
        pick = pick[..., None] if np.ndim(pick) else pick
        center = np.where(pick, y_i, y_j)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    if beta > 0:
        center = center + np.sqrt(beta) * rng.standard_normal(np.shape(center))
    return FusedTarget(value=center, weights=(float(np.mean(lam)), 1.0 - float(np.mean(lam))))


def perturbed_label_probs(y, beta: float, num_classes: int) -> np.ndarray:
    """``P(y~ = k | y)`` proportional to ``1[y = k] + beta``."""
    onehot = np.eye(num_classes)[np.asarray(y, dtype=np.int64)]
    return (onehot + beta) / (1.0 + num_classes * beta)


def fused_label_probs(y_i, y_j, lam, beta: float, num_classes: int,
                      pooling: str = "log-linear") -> np.ndarray:
    p_i = perturbed_label_probs(y_i, beta, num_classes)
    p_j = perturbed_label_probs(y_j, beta, num_classes)
    lam = np.asarray(lam, dtype=np.float64)
    lam_col = lam[..., None] if lam.ndim else lam
    if pooling == "linear":
        return lam_col * p_i + (1.0 - lam_col) * p_j
    if pooling != "log-linear":
        raise ValueError(f"unknown pooling {pooling!r}")
    with np.errstate(divide="ignore"):
        log_i, log_j = np.log(p_i), np.log(p_j)
    # a zero weight on a zero probability contributes nothing
    a = np.where(lam_col == 0.0, 0.0, lam_col * log_i)
    b = np.where(lam_col == 1.0, 0.0, (1.0 - lam_col) * log_j)
    logits = a + b
    top = np.max(logits, axis=-1, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise ValueError("log-linear label fusion has empty support; beta must be > 0 "
                         "when mixing distinct labels")
    q = np.exp(logits - top)
    return q / q.sum(axis=-1, keepdims=True)


def fuse_perturbed_classification(y_i, y_j, lam, beta: float, num_classes: int,
                                  rng: np.random.Generator | None = None,
                                  pooling: str = "log-linear", exact: bool = True) -> FusedTarget:
    """Fuse the two perturbed one-hot labels; return the distribution or one draw from it."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    q = fused_label_probs(y_i, y_j, lam, beta, num_classes, pooling)
    lam_mean = float(np.mean(lam))
    if exact:
        return FusedTarget(label_probs=q, weights=(lam_mean, 1.0 - lam_mean))
    if rng is None:
        raise ValueError("sampled label mode needs an rng")
    cdf = np.cumsum(q, axis=-1)
    u = rng.random(q.shape[:-1])[..., None]
    k = np.minimum(np.sum(cdf <= u * cdf[..., -1:], axis=-1), num_classes - 1)
    return FusedTarget(value=k, weights=(lam_mean, 1.0 - lam_mean))


# -- shared pieces of the loss builders ------------------------------------------------

@dataclass
class PairDraw:
    edges: np.ndarray  # (rows, 2); row k * count + e
    lam: np.ndarray  # (rows,)
    count: int
    mc_samples: int


def draw_pairs(n: int, graph: SamplingGraph | None, dist: MixingDistribution, rng,
               count: int | None = None, mc_samples: int = 1, lam=None) -> PairDraw:
    """Sample ``count`` edges and ``mc_samples`` coefficients per edge.

    ``lam`` pins every coefficient to a fixed value (edges are still drawn).
    """
    streams = as_streams(rng)
    count = n if count is None else count
    if graph is None:
        from .graphs import fully_connected
        graph = fully_connected(n)
    if graph.n != n:
        raise ValueError(f"graph has {graph.n} nodes but the batch has {n} samples")
    edges = sample_edges(graph, count, streams.edges)
    if lam is None:
        lam_draw = sample_lambda(dist, streams.lam, size=(mc_samples, count)).reshape(-1)
    else:
        lam_draw = np.full(mc_samples * count, float(lam))
    return PairDraw(np.tile(edges, (mc_samples, 1)), lam_draw, count, mc_samples)


def _num_classes(model) -> int:
    return model.spec.output_dim


def _mixed_targets(model, batch, draw: PairDraw, label_mode: str, rng) -> FusedTarget:
    """Targets of the classical mixup family."""
    i, j = draw.edges[:, 0], draw.edges[:, 1]
    y = np.asarray(batch.y)
    if model.task == "regression":
        return FusedTarget(value=mix_inputs(y[i], y[j], draw.lam))
    lam = draw.lam
    if label_mode == "sampled":
        pick = as_streams(rng).perturb.random(len(lam)) < lam
        return FusedTarget(value=np.where(pick, y[i], y[j]))
    return FusedTarget(label_probs=fused_label_probs(y[i], y[j], lam, 0.0, _num_classes(model), "linear"))


def _fused_targets(model, batch, draw: PairDraw, pert: PerturbationSpec, pooling: str,
                   label_mode: str, rng) -> FusedTarget:
    """Targets of the probabilistic family, drawn from ``g_lambda^y``."""
    streams = as_streams(rng)
    i, j = draw.edges[:, 0], draw.edges[:, 1]
    y = np.asarray(batch.y)
    if model.task == "regression":
        return fuse_perturbed_regression(y[i], y[j], draw.lam, pert.beta, streams.perturb, pooling)
    if label_mode == "onehot":
        return FusedTarget(label_probs=fused_label_probs(y[i], y[j], draw.lam, 0.0,
                                                         _num_classes(model), "linear"))
    return fuse_perturbed_classification(y[i], y[j], draw.lam, pert.beta, _num_classes(model),
                                         streams.perturb, pooling, exact=label_mode == "exact")


def target_nll(density, target) -> Tensor:
    """Per-row NLL of a (possibly fused or mixture) density at a target."""
    if isinstance(target, FusedTarget):
        if target.label_probs is not None:
            if isinstance(density, MixtureDensity):
                return mixture_expected_nll(density, target.label_probs)
            return categorical_expected_nll(density, target.label_probs)
        target = target.value
    if isinstance(density, MixtureDensity):
        return mixture_nll(density, target)
    if isinstance(density, GaussianDensity):
        return gaussian_nll(density, target)
    return categorical_nll(density, target)


def _aggregate(nll: Tensor, draw: PairDraw, criterion: str) -> Tensor:
    if criterion == "expected-log-likelihood" or draw.mc_samples == 1:
        return nll.mean()
    if criterion != "log-expected-likelihood":
        raise ValueError(f"unknown criterion {criterion!r}")
    table = nll.reshape(draw.mc_samples, draw.count)
    per_edge = np.log(draw.mc_samples) - dc.logsumexp(-table, axis=0)
    return per_edge.mean()


def _fuse(p_i, p_j, lam, pooling: str):
    if pooling == "log-linear":
        return log_linear_fuse(p_i, p_j, lam)
    if pooling == "linear":
        return linear_fuse(p_i, p_j, lam)
    raise ValueError(f"unknown pooling {pooling!r}")


# -- loss builders ------------------------------------------------------------------------

def erm_loss(model, batch) -> Tensor:
    if len(batch.x) == 0:
        raise ValueError("empty batch")
    return target_nll(model.forward(batch.x), np.asarray(batch.y)).mean()


def mixup_loss(model, batch, graph, dist: MixingDistribution, rng, label_mode: str = "exact",
               *, count=None, mc_samples: int = 1, lam=None) -> Tensor:
    """Input mixup; locality enters only through the graph weights."""
    draw = draw_pairs(len(batch.x), graph, dist, rng, count, mc_samples, lam)
    x = np.asarray(batch.x, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    x_mix = mix_inputs(x[draw.edges[:, 0]], x[draw.edges[:, 1]], draw.lam)
    target = _mixed_targets(model, batch, draw, label_mode, rng)
    return target_nll(model.forward(x_mix), target).mean()


def manifold_mixup_loss(model, batch, graph, dist: MixingDistribution, mix_layer: int | None,
                        rng, label_mode: str = "exact", *, count=None, mc_samples: int = 1,
                        lam=None) -> Tensor:
    """Mixup of the hidden features at ``mix_layer``."""
    layer = model.spec.mix_layer if mix_layer is None else mix_layer
    draw = draw_pairs(len(batch.x), graph, dist, rng, count, mc_samples, lam)
    z = model.features(batch.x, layer)
    z_mix = mix_inputs(z.take(draw.edges[:, 0]), z.take(draw.edges[:, 1]), draw.lam)
    target = _mixed_targets(model, batch, draw, label_mode, rng)
    return target_nll(model.decode(z_mix, layer), target).mean()


def probmix_loss(model, batch, graph, dist: MixingDistribution, pert: PerturbationSpec,
                 pooling: str, mc_samples: int, rng,
                 criterion: str = "expected-log-likelihood", label_mode: str = "exact",
                 *, count=None, lam=None) -> Tensor:
    """Fuse ``p(y|x_i)`` and ``p(y|x_j)`` and score the fused density at ``y~``."""
    draw = draw_pairs(len(batch.x), graph, dist, rng, count, mc_samples, lam)
    dens = model.forward(batch.x)
    fused = _fuse(dens.take(draw.edges[:, 0]), dens.take(draw.edges[:, 1]), draw.lam, pooling)
    target = _fused_targets(model, batch, draw, pert, pooling, label_mode, rng)
    return _aggregate(target_nll(fused, target), draw, criterion)


def _embedding_sample(q_i: GaussianDensity, q_j: GaussianDensity, lam, pooling: str,
                      noise_rng: np.random.Generator, propagate_mean: bool) -> Tensor:
    if pooling == "log-linear":
        q = gaussian_log_linear_fuse(q_i, q_j, lam)
        if propagate_mean:
            return q.mean
        return sample_gaussian_reparameterized(q, noise_rng.standard_normal(q.mean.shape))
    if pooling != "linear":
        raise ValueError(f"unknown pooling {pooling!r}")
    lam = np.asarray(lam, dtype=np.float64)
    pick = (noise_rng.random(lam.shape) < lam).astype(np.float64)[:, None]
    if propagate_mean:
        return q_i.mean * pick + q_j.mean * (1.0 - pick)
    mean = q_i.mean * pick + q_j.mean * (1.0 - pick)
    var = q_i.var * pick + q_j.var * (1.0 - pick)
    return sample_gaussian_reparameterized(GaussianDensity(mean, var),
                                           noise_rng.standard_normal(mean.shape))


def m_probmix_loss(model, batch, graph, dist: MixingDistribution, pert: PerturbationSpec,
                   pooling: str, mc_samples: int, rng,
                   criterion: str = "expected-log-likelihood", label_mode: str = "exact",
                   *, count=None, lam=None, propagate_mean: bool = False) -> Tensor:
    """Fuse embedding densities ``q(z|x_i)``, ``q(z|x_j)``; decode one ``z`` per draw.

    With a separate variance network the main term propagates fused means and
    an auxiliary term, whose gradients reach only the variance network, scores
    decoded samples drawn with that variance.
    """
    if model.spec.embedding is None:
        raise ValueError("m_probmix_loss needs a model with an embedding head")
    streams = as_streams(rng)
    draw = draw_pairs(len(batch.x), graph, dist, streams, count, mc_samples, lam)
    i, j = draw.edges[:, 0], draw.edges[:, 1]
    target = _fused_targets(model, batch, draw, pert, pooling, label_mode, streams)
    separate = model.spec.embedding == "separate"
    q = model.encode_distribution(batch.x)
    z = _embedding_sample(q.take(i), q.take(j), draw.lam, pooling, streams.noise,
                          propagate_mean or separate)
    loss = _aggregate(target_nll(model.decode(z), target), draw, criterion)
    if separate and not propagate_mean:
        qv = model.encode_distribution(batch.x, frozen_mean=True)
        zv = _embedding_sample(qv.take(i), qv.take(j), draw.lam, pooling, streams.noise, False)
        loss = loss + _aggregate(target_nll(model.decode(zv, frozen=True), target), draw, criterion)
    return loss


def regularized_loss(model, batch, graph, config: RegularizerConfig, rng, *, count=None,
                     lam=None) -> Tensor:
    """Dispatch on ``config.method``; ``lam`` pins every mixing coefficient."""
    family = config.family
    if family == "erm":
        return erm_loss(model, batch)
    dist = config.mixing
    pert = PerturbationSpec(config.beta, model.task)
    if family == "mix":
        return mixup_loss(model, batch, graph, dist, rng, config.label_mode,
                          count=count, mc_samples=config.mc_samples, lam=lam)
    if family == "m-mix":
        return manifold_mixup_loss(model, batch, graph, dist, config.mix_layer, rng,
                                   config.label_mode, count=count, mc_samples=config.mc_samples,
                                   lam=lam)
    if family == "probmix":
        return probmix_loss(model, batch, graph, dist, pert, config.pooling, config.mc_samples, rng,
                            config.criterion, config.label_mode, count=count, lam=lam)
    return m_probmix_loss(model, batch, graph, dist, pert, config.pooling, config.mc_samples, rng,
                          config.criterion, config.label_mode, count=count, lam=lam)
