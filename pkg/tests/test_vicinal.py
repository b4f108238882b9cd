import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probmix import diffcore as dc
from probmix.checks import Batch, random_batch, random_mlp
from probmix.graphs import fully_connected, knn_graph
from probmix.vicinal import (
    NINE_METHODS,
    MixingDistribution,
    PerturbationSpec,
    RegularizerConfig,
    RngStreams,
    draw_pairs,
    fuse_perturbed_classification,
    fuse_perturbed_regression,
    fused_label_probs,
    m_probmix_loss,
    mix_inputs,
    mixup_loss,
    perturbed_label_probs,
    probmix_loss,
    regularized_loss,
    sample_lambda,
)


def _model_for(method, task, rng):
    emb = "heteroscedastic" if "m-probmix" in method else None
    return random_mlp(rng, task, embedding=emb)


def _cfg(method, task, pooling="log-linear", **kw):
    kw.setdefault("label_mode", "exact")
    return RegularizerConfig(method=method, pooling=pooling, **kw)


def test_beta_sampler_moments():
    for alpha in (0.1, 0.5, 2.0):
        lam = sample_lambda(MixingDistribution(alpha), np.random.default_rng(0), size=100_000)
        assert abs(lam.mean() - 0.5) < 0.01
        assert abs(lam.var() - 1 / (4 * (2 * alpha + 1))) < 0.01


def test_mixing_distribution_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        MixingDistribution(0.0)


def test_mix_inputs():
    np.testing.assert_allclose(mix_inputs([[1.0, 2.0]], [[3.0, 6.0]], [0.25]), [[2.5, 5.0]])
    with pytest.raises(ValueError):
        mix_inputs(np.zeros((1, 2)), np.zeros((1, 3)), [0.5])


def test_regression_perturbation_noiseless():
    t = fuse_perturbed_regression([[1.0]], [[3.0]], [0.25], 0.0, np.random.default_rng(0))
    np.testing.assert_allclose(t.value, [[2.5]])


def test_regression_perturbation_variance():
    n = 50_000
    t = fuse_perturbed_regression(np.zeros((n, 1)), np.ones((n, 1)), np.full(n, 0.5), 0.04,
                                  np.random.default_rng(1))
    assert abs(t.value.mean() - 0.5) < 0.005
    assert abs(t.value.var() - 0.04) < 0.002


def test_linear_regression_perturbation_picks_endpoints():
    n = 20_000
    t = fuse_perturbed_regression(np.zeros((n, 1)), np.ones((n, 1)), np.full(n, 0.3), 0.0,
                                  np.random.default_rng(2), pooling="linear")
    assert set(np.unique(t.value)) == {0.0, 1.0}
    assert abs(t.value.mean() - 0.7) < 0.015


def test_label_kernel():
    q = perturbed_label_probs([1], 0.01, 3)
    np.testing.assert_allclose(q, [[0.01 / 1.03, 1.01 / 1.03, 0.01 / 1.03]])


def test_fused_labels_by_hand():
    beta, lam = 0.1, 0.3
    pi, pj = np.array([1.1, 0.1, 0.1]) / 1.3, np.array([0.1, 1.1, 0.1]) / 1.3
    geo = pi ** lam * pj ** (1 - lam)
    np.testing.assert_allclose(fused_label_probs([0], [1], [lam], beta, 3), [geo / geo.sum()])
    np.testing.assert_allclose(fused_label_probs([0], [1], [lam], beta, 3, "linear"),
                               [lam * pi + (1 - lam) * pj])


def test_log_linear_labels_need_positive_beta_for_distinct_labels():
    with pytest.raises(ValueError):
        fused_label_probs([0], [1], [0.5], 0.0, 3)
    np.testing.assert_allclose(fused_label_probs([2], [2], [0.5], 0.0, 3), [[0, 0, 1.0]])


def test_sampled_labels_follow_fused_distribution():
    n = 30_000
    t = fuse_perturbed_classification(np.zeros(n, int), np.ones(n, int), np.full(n, 0.5), 0.2, 3,
                                      np.random.default_rng(3), exact=False)
    q = fused_label_probs([0], [1], [0.5], 0.2, 3)[0]
    np.testing.assert_allclose(np.bincount(t.value, minlength=3) / n, q, atol=0.01)


def test_draw_pairs_layout():
    draw = draw_pairs(6, fully_connected(6), MixingDistribution(0.5), 0, count=4, mc_samples=3)
    assert draw.edges.shape == (12, 2)
    np.testing.assert_array_equal(draw.edges[:4], draw.edges[4:8])
    assert len(np.unique(draw.lam)) == 12


def test_draw_pairs_graph_size_mismatch():
    with pytest.raises(ValueError):
        draw_pairs(5, fully_connected(4), MixingDistribution(0.5), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        RegularizerConfig(method="cutmix")
    with pytest.raises(ValueError):
        RegularizerConfig(method="mix", pooling="geometric")
    cfg = RegularizerConfig(method="lock-m-probmix")
    assert cfg.local and cfg.family == "m-probmix"


def test_m_probmix_requires_embedding():
    rng = np.random.default_rng(0)
    model = random_mlp(rng, "regression")
    with pytest.raises(ValueError):
        m_probmix_loss(model, random_batch(rng, "regression"), None, MixingDistribution(1.0),
                       PerturbationSpec(0.0, "regression"), "log-linear", 1, 0)


def test_mixup_regression_by_hand():
    """Rebuild the mixup loss from the same draws with plain numpy."""
    rng = np.random.default_rng(4)
    model = random_mlp(rng, "regression")
    batch = random_batch(rng, "regression", n=6)
    dist = MixingDistribution(0.7)
    loss = float(mixup_loss(model, batch, fully_connected(6), dist, 11).value)
    draw = draw_pairs(6, fully_connected(6), dist, RngStreams.from_seed(11))
    i, j, lam = draw.edges[:, 0], draw.edges[:, 1], draw.lam[:, None]
    dens = model.forward(lam * batch.x[i] + (1 - lam) * batch.x[j])
    mu, var = dens.mean.value, dens.var.value
    y = lam * batch.y[i] + (1 - lam) * batch.y[j]
    ref = np.mean(np.sum(0.5 * np.log(2 * np.pi * var) + (y - mu) ** 2 / (2 * var), axis=1))
    assert loss == pytest.approx(ref, rel=1e-12)


def test_probmix_regression_by_hand():
    rng = np.random.default_rng(5)
    model = random_mlp(rng, "regression")
    batch = random_batch(rng, "regression", n=7)
    dist, beta = MixingDistribution(0.4), 0.05
    loss = float(probmix_loss(model, batch, fully_connected(7), dist, PerturbationSpec(beta, "regression"),
                              "log-linear", 1, 12).value)
    streams = RngStreams.from_seed(12)
    draw = draw_pairs(7, fully_connected(7), dist, streams)
    i, j, lam = draw.edges[:, 0], draw.edges[:, 1], draw.lam[:, None]
    d = model.forward(batch.x)
    mu, var = d.mean.value, d.var.value
    prec = lam / var[i] + (1 - lam) / var[j]
    v = 1 / prec
    m = v * (lam * mu[i] / var[i] + (1 - lam) * mu[j] / var[j])
    y = lam * batch.y[i] + (1 - lam) * batch.y[j] + np.sqrt(beta) * streams.perturb.standard_normal((7, 2))
    ref = np.mean(np.sum(0.5 * np.log(2 * np.pi * v) + (y - m) ** 2 / (2 * v), axis=1))
    assert loss == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("method", NINE_METHODS)
@pytest.mark.parametrize("task", ["regression", "classification"])
def test_losses_are_deterministic_given_seed(method, task):
    rng = np.random.default_rng(6)
    model = _model_for(method, task, rng)
    batch = random_batch(rng, task)
    cfg = _cfg(method, task)
    graph = knn_graph(batch.x, 3) if cfg.local else fully_connected(len(batch))
    a = regularized_loss(model, batch, graph, cfg, 99).value
    b = regularized_loss(model, batch, graph, cfg, 99).value
    assert a == b


@pytest.mark.parametrize("method", NINE_METHODS)
@pytest.mark.parametrize("pooling", ["log-linear", "linear"])
@pytest.mark.parametrize("task", ["regression", "classification"])
def test_loss_gradients_match_finite_differences(method, pooling, task):
    rng = np.random.default_rng(zlib.crc32(f"{method}{pooling}{task}".encode()))
    model = _model_for(method, task, rng)
    batch = random_batch(rng, task, n=6)
    cfg = _cfg(method, task, pooling, beta=0.05, alpha=0.5, mc_samples=2)
    graph = knn_graph(batch.x, 3) if cfg.local else fully_connected(len(batch))
    err = dc.finite_difference_check(model.params,
                                     lambda p, b: regularized_loss(model, b, graph, cfg, 5), batch)
    assert err < 1e-4


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**31), method=st.sampled_from(["probmix", "m-probmix", "lock-probmix"]),
       task=st.sampled_from(["regression", "classification"]))
def test_log_expected_likelihood_is_smaller(seed, method, task):
    rng = np.random.default_rng(seed)
    model = _model_for(method, task, rng)
    batch = random_batch(rng, task, n=8)
    graph = knn_graph(batch.x, 3) if method.startswith("lock") else fully_connected(8)
    vals = [float(regularized_loss(model, batch, graph,
                                   _cfg(method, task, beta=0.05, mc_samples=4, criterion=c), seed).value)
            for c in ("log-expected-likelihood", "expected-log-likelihood")]
    assert vals[0] <= vals[1] + 1e-12


def test_criteria_agree_for_single_draw():
    rng = np.random.default_rng(7)
    model = random_mlp(rng, "regression")
    batch = random_batch(rng, "regression")
    vals = {c: float(regularized_loss(model, batch, fully_connected(8),
                                      _cfg("probmix", "regression", criterion=c), 3).value)
            for c in ("log-expected-likelihood", "expected-log-likelihood")}
    assert vals["log-expected-likelihood"] == vals["expected-log-likelihood"]


def test_identical_pair_matches_encode_decode():
    """x_i = x_j with almost no embedding noise gives the plain encode-decode NLL."""
    rng = np.random.default_rng(8)
    model = random_mlp(rng, "regression", embedding="homoscedastic")
    model.params["raw_zvar"].value[:] = -60.0  # variance at the floor
    x = np.repeat(rng.standard_normal((1, 3)), 4, axis=0)
    y = np.repeat(rng.standard_normal((1, 2)), 4, axis=0)
    batch = Batch(x, y, "regression")
    loss = float(m_probmix_loss(model, batch, fully_connected(4), MixingDistribution(1.0),
                                PerturbationSpec(0.0, "regression"), "log-linear", 1, 0).value)
    from probmix.vicinal import erm_loss
    assert loss == pytest.approx(float(erm_loss(model, batch).value), abs=1e-2)


def test_separate_variance_network_receives_gradient_only_from_auxiliary_term():
    rng = np.random.default_rng(9)
    model = random_mlp(rng, "regression", embedding="separate")
    batch = random_batch(rng, "regression")
    cfg = _cfg("m-probmix-star", "regression")
    _, grads = dc.evaluate_with_gradients(
        model.params, lambda p, b: regularized_loss(model, b, fully_connected(8), cfg, 1), batch)
    assert np.any(grads["V1"] != 0)
    assert np.any(grads["W0"] != 0)
