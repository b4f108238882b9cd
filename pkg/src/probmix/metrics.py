"""Evaluation metrics and cross-seed aggregation."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .densities import GaussianDensity, sample_gaussian_reparameterized
from .vicinal import target_nll


@dataclass(frozen=True)
class ExperimentRecord:
    method: str
    alpha: float
    beta: float
    k_neighbors: int
    seed: int
    split: str
    metric: str
    value: float
    pooling: str = "log-linear"
    run_id: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite metric value for {self.metric}")

    @property
    def group(self) -> tuple:
        return (self.method, self.pooling, self.alpha, self.beta, self.k_neighbors,
                self.split, self.metric)


def _per_sample_nll(model, ds, mode: str, samples: int, rng) -> np.ndarray:
    if mode == "deterministic" or model.spec.embedding is None:
        return target_nll(model.forward(ds.x), ds.y).value
    if mode != "mc":
        raise ValueError(f"unknown evaluation mode {mode!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    q = model.encode_distribution(ds.x)
    q = GaussianDensity(dc.Tensor(q.mean.value), dc.Tensor(q.var.value))
    logs = []
    for _ in range(samples):
        z = sample_gaussian_reparameterized(q, rng.standard_normal(q.mean.shape))
        logs.append(-target_nll(model.decode(z), ds.y).value)
    logs = np.stack(logs)
    top = logs.max(axis=0)
    return -(top + np.log(np.mean(np.exp(logs - top), axis=0)))


def mean_nll(model, ds, mode: str = "deterministic", samples: int = 32, rng=None) -> float:
    """Average per-sample NLL.

    ``deterministic`` propagates the embedding mean through embedding models;
    ``mc`` averages likelihoods over ``samples`` embedding draws before the log.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(_per_sample_nll(model, ds, mode, samples, rng)))


def _require(model, ds, task: str) -> None:
    if model.task != task:
        raise ValueError(f"metric needs a {task} model, got {model.task}")
    if ds.task != task:
        raise ValueError(f"metric needs a {task} dataset, got {ds.task}")


def mse(model, ds) -> float:
    _require(model, ds, "regression")
    pred = model.forward(ds.x).mean.value
    return float(np.mean(np.sum((pred - ds.y) ** 2, axis=-1)))


def rmse(model, ds) -> float:
    return math.sqrt(mse(model, ds))


def accuracy(model, ds) -> float:
    _require(model, ds, "classification")
    logits = model.forward(ds.x).logits.value
    return float(np.mean(np.argmax(logits, axis=-1) == ds.y))


def aggregate(records: Iterable[ExperimentRecord]) -> dict:
    """Group by configuration/split/metric; ``{group: (mean, sample std, count)}``."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for rec in records:
        groups[rec.group].append(rec.value)
    out = {}
    for key in sorted(groups, key=repr):
        vals = np.sort(np.asarray(groups[key]))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[key] = (float(np.mean(vals)), std, len(vals))
    return out
