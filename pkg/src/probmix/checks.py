"""Executable equivalence and golden-value checks behind ``probmix selftest``.

Each check returns a :class:`CheckResult` carrying the worst observed
discrepancy, so callers can print it or assert on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .densities import (
    CategoricalDensity,
    GaussianDensity,
    gaussian_log_linear_fuse,
    gaussian_nll,
    linear_fuse,
    log_linear_fuse,
    mixture_log_prob,
    sample_gaussian_reparameterized,
)
from .graphs import fully_connected, knn_graph
from .models import Mlp, MlpSpec, build_affine_model, init_params
from .vicinal import (
    NINE_METHODS,
    MixingDistribution,
    PerturbationSpec,
    RegularizerConfig,
    RngStreams,
    draw_pairs,
    erm_loss,
    fused_label_probs,
    manifold_mixup_loss,
    m_probmix_loss,
    probmix_loss,
    regularized_loss,
    target_nll,
)

THEOREM_TOL = 1e-10


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: worst={self.worst:.3e} {self.detail}".rstrip()


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def random_mlp(rng: np.random.Generator, task: str, input_dim: int = 3, hidden=(6, 5),
               head: str | None = None, embedding: str | None = None, mix_layer: int = 1,
               activation: str = "tanh", num_classes: int = 3) -> Mlp:
    if head is None:
        head = "softmax" if task == "classification" else "gaussian-heteroscedastic"
    out = num_classes if head == "softmax" else 2
    spec = MlpSpec(input_dim=input_dim, hidden=tuple(hidden), activation=activation, head=head,
                   output_dim=out, embedding=embedding, mix_layer=mix_layer, variance_hidden=4,
                   embedding_init_var=0.5)
    model = Mlp(spec, init_params(spec, rng))
    # non-zero biases and variances so no symmetry hides a mistake
    for p in model.params.values():
        p.value = p.value + 0.3 * rng.standard_normal(p.value.shape)
    return model


class Batch:
    """Minimal batch object with ``x``, ``y`` and ``task``."""

    def __init__(self, x, y, task):
        self.x, self.y, self.task = x, y, task

    def __len__(self):
        return len(self.x)


def random_batch(rng: np.random.Generator, task: str, n: int = 8, input_dim: int = 3,
                 num_classes: int = 3, output_dim: int = 2) -> Batch:
    x = rng.standard_normal((n, input_dim))
    if task == "classification":
        y = rng.integers(0, num_classes, size=n)
    else:
        y = rng.standard_normal((n, output_dim))
    return Batch(x, y, task)


# -- golden numbers --------------------------------------------------------------------

def golden_values() -> CheckResult:
    """Cubic mean, variance ``(0.5 x^2 + 1)^2``, samples (5, 130), (-5, -120), lambda 0.8."""
    mu = lambda x: x ** 3
    var = lambda x: (0.5 * x ** 2 + 1.0) ** 2
    lam, (x1, y1), (x2, y2) = 0.8, (5.0, 130.0), (-5.0, -120.0)
    fused = gaussian_log_linear_fuse(GaussianDensity(mu(x1), var(x1)),
                                     GaussianDensity(mu(x2), var(x2)), lam)
    x_mix = lam * x1 + (1 - lam) * x2
    mixed = GaussianDensity(mu(x_mix), var(x_mix))
    y_mix = lam * y1 + (1 - lam) * y2
    nll_mix = float(gaussian_nll(mixed, [y_mix]).value)
    nll_fused = float(gaussian_nll(fused, [y_mix]).value)
    errs = [abs(fused.mean.value[0] - 75.0), abs(fused.var.value[0] - 182.25),
            abs(mixed.mean.value[0] - 27.0), abs(mixed.var.value[0] - 30.25)]
    nll_errs = [abs(nll_mix - 49.05), abs(nll_fused - 3.59)]
    ok = max(errs) <= 1e-9 and max(nll_errs) <= 0.01 and y_mix == 80.0
    return CheckResult("golden values", ok, max(errs + nll_errs),
                       f"fused=N({fused.mean.value[0]:g},{fused.var.value[0]:g}) "
                       f"mixed=N({mixed.mean.value[0]:g},{mixed.var.value[0]:g}) "
                       f"nll_mix={nll_mix:.4f} nll_fused={nll_fused:.4f}")


# -- theorem equivalences ---------------------------------------------------------

def logit_mixing(trials: int = 100, seed: int = 1) -> CheckResult:
    """Log-linear categorical ProbMix equals the loss on interpolated logits."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        model = random_mlp(rng, "classification")
        batch = random_batch(rng, "classification", n=int(rng.integers(2, 10)))
        beta = float(rng.uniform(0.001, 0.5))
        dist = MixingDistribution(float(rng.uniform(0.05, 2.0)))
        graph = fully_connected(len(batch))
        loss = probmix_loss(model, batch, graph, dist, PerturbationSpec(beta, "classification"),
                            "log-linear", 1, [seed, t]).value
        draw = draw_pairs(len(batch), graph, dist, RngStreams.from_seed([seed, t]))
        i, j = draw.edges[:, 0], draw.edges[:, 1]
        logits = model.forward(batch.x).logits.value
        lam = draw.lam[:, None]
        mixed = lam * logits[i] + (1 - lam) * logits[j]
        log_p = mixed - np.log(np.sum(np.exp(mixed - mixed.max(1, keepdims=True)), 1, keepdims=True)) \
            - mixed.max(1, keepdims=True)
        q = fused_label_probs(batch.y[i], batch.y[j], draw.lam, beta, 3, "log-linear")
        ref = float(np.mean(-np.sum(q * log_p, axis=1)))
        worst = max(worst, _rel(loss, ref))
    return CheckResult("logit mixing", worst <= THEOREM_TOL, worst, f"trials={trials}")


def homoscedastic_means(trials: int = 100, seed: int = 2) -> CheckResult:
    """Equal-variance Gaussian heads fuse to the interpolated mean, same variance."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        model = random_mlp(rng, "regression", head="gaussian-homoscedastic")
        x = rng.standard_normal((2, 3))
        lam = float(rng.uniform())
        d = model.forward(x)
        fused = gaussian_log_linear_fuse(d.take(np.array([0])), d.take(np.array([1])), lam)
        mu = d.mean.value
        worst = max(worst, _rel(fused.mean.value[0], lam * mu[0] + (1 - lam) * mu[1]),
                    _rel(fused.var.value[0], d.var.value[0]))
    return CheckResult("homoscedastic mean mixing", worst <= THEOREM_TOL, worst, f"trials={trials}")


def softmax_affine(trials: int = 100, seed: int = 3) -> CheckResult:
    """Softmax-affine model: fused class distribution equals the one at the mixed input."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        c, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        model = build_affine_model(rng.standard_normal((c, d)), rng.standard_normal(c), "softmax")
        xi, xj = rng.standard_normal((2, d))
        lam = float(rng.uniform())
        fused = log_linear_fuse(model.forward(xi[None]), model.forward(xj[None]), lam)
        direct = model.forward((lam * xi + (1 - lam) * xj)[None])
        worst = max(worst, float(np.max(np.abs(fused.probs - direct.probs))))
    return CheckResult("softmax-affine input mixing", worst <= THEOREM_TOL, worst, f"trials={trials}")


def affine_gaussian(trials: int = 100, seed: int = 4) -> CheckResult:
    """Affine homoscedastic Gaussian: fused density equals the one at the mixed input."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        k, d = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        model = build_affine_model(rng.standard_normal((k, d)), rng.standard_normal(k),
                                   "gaussian-homoscedastic", float(rng.uniform(0.1, 3.0)))
        xi, xj = rng.standard_normal((2, d))
        lam = float(rng.uniform())
        fused = log_linear_fuse(model.forward(xi[None]), model.forward(xj[None]), lam)
        direct = model.forward((lam * xi + (1 - lam) * xj)[None])
        worst = max(worst, _rel(fused.mean.value, direct.mean.value),
                    _rel(fused.var.value, direct.var.value))
    return CheckResult("affine Gaussian input mixing", worst <= THEOREM_TOL, worst, f"trials={trials}")


def embedding_mean_propagation(trials: int = 100, seed: int = 5) -> CheckResult:
    """Homoscedastic embedding fusion with mean propagation equals manifold mixup."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        task = ("regression", "classification")[t % 2]
        layer = int(rng.integers(1, 3))
        model = random_mlp(rng, task, embedding="homoscedastic", mix_layer=layer)
        batch = random_batch(rng, task, n=int(rng.integers(2, 10)))
        dist = MixingDistribution(float(rng.uniform(0.05, 2.0)))
        graph = fully_connected(len(batch))
        # beta = 0 regression targets and one-hot labels are the classical mixup targets
        a = m_probmix_loss(model, batch, graph, dist, PerturbationSpec(0.0, task), "log-linear", 1,
                           [seed, t], label_mode="onehot", propagate_mean=True).value
        b = manifold_mixup_loss(model, batch, graph, dist, layer, [seed, t]).value
        worst = max(worst, _rel(a, b))
    return CheckResult("embedding mean propagation", worst <= THEOREM_TOL, worst, f"trials={trials}")


def theorem_suite(trials: int = 100) -> list[CheckResult]:
    return [logit_mixing(trials), homoscedastic_means(trials), softmax_affine(trials),
            affine_gaussian(trials), embedding_mean_propagation(trials)]


# -- closure ----------------------------------------------------------------------

def _trapezoid(y, x) -> float:
    integrate = getattr(np, "trapezoid", None) or np.trapz
    return float(integrate(y, x))


def closure(trials: int = 50, seed: int = 6) -> CheckResult:
    """Fusion formulas against their written-out forms; fused densities carry unit mass."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        mi, mj = rng.normal(0, 3, 2)
        vi, vj = rng.uniform(0.2, 4.0, 2)
        lam = float(rng.uniform())
        fused = gaussian_log_linear_fuse(GaussianDensity(mi, vi), GaussianDensity(mj, vj), lam)
        prec = lam / vi + (1 - lam) / vj
        mean = (lam * mi / vi + (1 - lam) * mj / vj) / prec
        worst = max(worst, _rel(fused.var.value, 1 / prec), _rel(fused.mean.value, mean))
        grid = np.linspace(min(mi, mj) - 40, max(mi, mj) + 40, 40001)
        col = np.ones((len(grid), 1))
        dens = np.exp(-gaussian_nll(GaussianDensity(fused.mean.value[0] * col, fused.var.value[0] * col),
                                    grid[:, None]).value)
        worst = max(worst, abs(_trapezoid(dens, grid) - 1.0))
        coarse = grid[::20]
        ones = np.ones((len(coarse), 1))
        mix = linear_fuse(GaussianDensity(mi * ones, vi * ones), GaussianDensity(mj * ones, vj * ones), lam)
        mix_dens = np.exp(mixture_log_prob(mix, coarse[:, None]).value)
        worst = max(worst, abs(_trapezoid(mix_dens, coarse) - 1.0))
        li, lj = rng.standard_normal((2, 4))
        cat = log_linear_fuse(CategoricalDensity(li), CategoricalDensity(lj), lam)
        worst = max(worst, _rel(cat.logits.value, lam * li + (1 - lam) * lj),
                    abs(float(cat.probs.sum()) - 1.0))
    return CheckResult("fusion closure", worst <= 1e-6, worst, f"trials={trials}")


# -- endpoints and criteria ---------------------------------------------------------

def _graph_for(method: str, batch):
    return knn_graph(batch.x, 3) if method.startswith("lock-") else fully_connected(len(batch))


def _loss_at(model, batch, method, pooling, lam, seed):
    cfg = RegularizerConfig(method=method, pooling=pooling, beta=0.0,
                            label_mode="onehot" if model.task == "classification" else "exact")
    return regularized_loss(model, batch, _graph_for(method, batch), cfg, seed, lam=lam)


def _endpoint_reference(model, batch, method, pooling, lam, seed):
    streams = RngStreams.from_seed(seed)
    draw = draw_pairs(len(batch), _graph_for(method, batch), MixingDistribution(1.0), streams)
    idx = draw.edges[:, 0 if lam == 1.0 else 1]
    sub = Batch(batch.x[idx], batch.y[idx], batch.task)
    if "m-probmix" not in method:
        return erm_loss(model, sub)
    # the latent model's single-sample likelihood with the same embedding noise
    q = model.encode_distribution(sub.x)
    if pooling == "linear":
        streams.noise.random(len(idx))
    z = sample_gaussian_reparameterized(q, streams.noise.standard_normal(q.mean.shape))
    return target_nll(model.decode(z), sub.y).mean()


def endpoint_reduction(seed: int = 7) -> CheckResult:
    """With lambda pinned to 1 (or 0) each mixup-family loss is the endpoint ERM loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for task in ("regression", "classification"):
        for method in NINE_METHODS[1:]:
            for pooling in ("log-linear", "linear"):
                emb = "heteroscedastic" if "m-probmix" in method else None
                model = random_mlp(rng, task, embedding=emb)
                batch = random_batch(rng, task)
                for lam in (1.0, 0.0):
                    ref = _endpoint_reference(model, batch, method, pooling, lam, [seed, cases])
                    got = _loss_at(model, batch, method, pooling, lam, [seed, cases])
                    worst = max(worst, abs(float(got.value) - float(ref.value)))
                    cases += 1
    return CheckResult("endpoint reduction", worst == 0.0, worst, f"cases={cases}")


def jensen_ordering(batches: int = 1000, mc: int = 4, seed: int = 8) -> CheckResult:
    """Log-expected likelihood never exceeds expected log likelihood on shared draws."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    violations = 0
    for b in range(batches):
        task = ("regression", "classification")[b % 2]
        method = ("probmix", "m-probmix", "lock-probmix", "mix")[b % 4]
        emb = "heteroscedastic" if method == "m-probmix" else None
        model = random_mlp(rng, task, embedding=emb)
        batch = random_batch(rng, task, n=int(rng.integers(6, 12)))
        cfg = dict(method=method, beta=0.05, mc_samples=mc)
        graph = _graph_for(method, batch)
        lel = regularized_loss(model, batch, graph,
                               RegularizerConfig(criterion="log-expected-likelihood", **cfg),
                               [seed, b]).value
        ell = regularized_loss(model, batch, graph,
                               RegularizerConfig(criterion="expected-log-likelihood", **cfg),
                               [seed, b]).value
        gap = float(lel - ell)
        worst = max(worst, gap)
        violations += gap > 1e-12
    return CheckResult("criterion ordering", violations == 0, worst,
                       f"batches={batches} violations={violations}")


def selftest() -> list[CheckResult]:
    return [golden_values(), *theorem_suite(), closure(), endpoint_reduction(),
            jensen_ordering(batches=200)]
