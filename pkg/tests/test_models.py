import numpy as np
import pytest

from probmix.checks import random_mlp
from probmix.densities import CategoricalDensity, GaussianDensity
from probmix.models import (
    Mlp,
    MlpSpec,
    build_affine_model,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


def test_default_architecture_shapes():
    spec = MlpSpec(input_dim=1)
    model = Mlp(spec, seed=0)
    assert model.params["W0"].shape == (1, 128)
    assert model.params["W1"].shape == (128, 64)
    d = model.forward(np.linspace(-1, 1, 5))
    assert isinstance(d, GaussianDensity)
    assert d.mean.shape == (5, 1) and np.all(d.var.value > 0)


def test_softmax_head():
    spec = MlpSpec(input_dim=2, head="softmax", output_dim=3, activation="relu")
    d = Mlp(spec, seed=1).forward(np.zeros((4, 2)))
    assert isinstance(d, CategoricalDensity)
    np.testing.assert_allclose(d.probs.sum(axis=1), 1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(input_dim=1, activation="gelu")
    with pytest.raises(ValueError):
        MlpSpec(input_dim=1, head="poisson")
    with pytest.raises(ValueError):
        MlpSpec(input_dim=1, mix_layer=3)
    with pytest.raises(ValueError):
        MlpSpec(input_dim=1, embedding_init_var=0.0)


def test_input_dim_mismatch():
    with pytest.raises(ValueError):
        Mlp(MlpSpec(input_dim=2), seed=0).forward(np.zeros((3, 3)))


@pytest.mark.parametrize("layer", [0, 1, 2])
def test_split_forward_recomposes(layer):
    rng = np.random.default_rng(layer)
    model = random_mlp(rng, "regression", mix_layer=layer)
    x = rng.standard_normal((5, 3))
    z, decode = model.split_forward(x, layer)
    np.testing.assert_array_equal(decode(z).mean.value, model.forward(x).mean.value)


def test_embedding_mean_is_feature_activation():
    rng = np.random.default_rng(2)
    for emb in ("heteroscedastic", "homoscedastic", "separate"):
        model = random_mlp(rng, "regression", embedding=emb)
        x = rng.standard_normal((4, 3))
        q = model.encode_distribution(x)
        np.testing.assert_array_equal(q.mean.value, model.features(x, 1).value)
        assert q.var.shape == q.mean.shape and np.all(q.var.value > 0)


def test_embedding_init_variance():
    spec = MlpSpec(input_dim=2, hidden=(4,), embedding="homoscedastic", embedding_init_var=0.01)
    model = Mlp(spec, init_params(spec, np.random.default_rng(0)))
    np.testing.assert_allclose(model.encode_distribution(np.zeros((1, 2))).var.value, 0.01)


def test_affine_model():
    A, b = np.array([[1.0, -2.0]]), np.array([0.5])
    model = build_affine_model(A, b, variance=2.0)
    d = model.forward(np.array([[3.0, 1.0]]))
    assert d.mean.value[0, 0] == pytest.approx(1.5)
    assert d.var.value[0, 0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        build_affine_model(np.ones((2, 2)), np.ones(3))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    model = random_mlp(rng, "classification", embedding="separate")
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == model.spec
    for k, p in model.params.items():
        np.testing.assert_array_equal(loaded.params[k].value, p.value)
    x = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(loaded.forward(x).logits.value, model.forward(x).logits.value)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_state_round_trip():
    model = random_mlp(np.random.default_rng(4), "regression")
    state = model.state()
    before = model.params["W0"].value.copy()
    model.params["W0"].value = model.params["W0"].value + 1.0
    model.load_state(state)
    np.testing.assert_array_equal(model.params["W0"].value, before)
