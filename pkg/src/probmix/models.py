"""MLP conditional-density estimators.

The trunk is a stack of dense layers.  Cutting it at ``mix_layer`` gives a
feature extractor (layers ``< mix_layer``) and a predictor (the rest plus the
head); ``mix_layer=0`` means the features are the raw inputs.  An optional
embedding head turns the features at the cut into a diagonal Gaussian.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .densities import VARIANCE_FLOOR, CategoricalDensity, GaussianDensity
from .diffcore import Tensor

HEADS = ("gaussian-heteroscedastic", "gaussian-homoscedastic", "softmax")
ACTIVATIONS = ("tanh", "relu")
EMBEDDINGS = (None, "heteroscedastic", "homoscedastic", "separate")

# softplus(0): initial embedding variance when raw offsets start at zero
INITIAL_EMBEDDING_VAR = float(np.log(2.0))


def inverse_softplus(v: float) -> float:
    return float(np.log(np.expm1(v)))


@dataclass
class MlpSpec:
    input_dim: int
    hidden: tuple = (128, 64)
    activation: str = "tanh"
    head: str = "gaussian-heteroscedastic"
    output_dim: int = 1
    embedding: str | None = None
    mix_layer: int = 1
    variance_hidden: int = 64  # width of the separate variance network
    embedding_init_var: float = INITIAL_EMBEDDING_VAR

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"unknown embedding head {self.embedding!r}")
        if not 0 <= self.mix_layer <= len(self.hidden):
            raise ValueError(f"mix_layer must lie in [0, {len(self.hidden)}]")
        if self.embedding_init_var <= VARIANCE_FLOOR:
            raise ValueError("embedding_init_var must exceed the variance floor")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dims must be positive")

    @property
    def task(self) -> str:
        return "classification" if self.head == "softmax" else "regression"

    def width(self, layer: int) -> int:
        """Feature width after ``layer`` hidden layers."""
        return self.input_dim if layer == 0 else self.hidden[layer - 1]

    @property
    def embedding_dim(self) -> int:
        return self.width(self.mix_layer)


def _activate(kind: str, x: Tensor) -> Tensor:
    return dc.tanh(x) if kind == "tanh" else dc.relu(x)


class Mlp:
    """Parametric conditional density ``p_theta(y | x)``."""

    def __init__(self, spec: MlpSpec, params: dict | None = None, seed: int | None = 0):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, np.random.default_rng(seed))

    # -- plumbing -------------------------------------------------------------
    def copy(self) -> "Mlp":
        return Mlp(self.spec, {k: Tensor(p.value.copy(), requires_grad=True)
                               for k, p in self.params.items()})

    def state(self) -> dict:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            self.params[k].value = np.array(v, dtype=np.float64)

    def _p(self, name: str, frozen: bool) -> Tensor:
        p = self.params[name]
        return dc.stop_gradient(p) if frozen else p

    @property
    def task(self) -> str:
        return self.spec.task

    # -- trunk ----------------------------------------------------------------
    def features(self, x, mix_layer: int | None = None) -> Tensor:
        """Activations after ``mix_layer`` hidden layers."""
        layer = self.spec.mix_layer if mix_layer is None else mix_layer
        self._check_layer(layer)
        h = self._input(x)
        for k in range(layer):
            h = _activate(self.spec.activation, h @ self.params[f"W{k}"] + self.params[f"b{k}"])
        return h

    def decode(self, z, mix_layer: int | None = None, frozen: bool = False):
        """Remaining hidden layers and head applied to features ``z``."""
        layer = self.spec.mix_layer if mix_layer is None else mix_layer
        self._check_layer(layer)
        h = dc.as_tensor(z)
        if h.shape[-1] != self.spec.width(layer):
            raise ValueError(f"features of width {h.shape[-1]} do not fit layer {layer}")
        for k in range(layer, len(self.spec.hidden)):
            h = _activate(self.spec.activation,
                          h @ self._p(f"W{k}", frozen) + self._p(f"b{k}", frozen))
        return self._head(h, frozen)

    def split_forward(self, x, mix_layer: int | None = None) -> tuple[Tensor, Callable]:
        layer = self.spec.mix_layer if mix_layer is None else mix_layer
        z = self.features(x, layer)
        return z, lambda zz: self.decode(zz, layer)

    def forward(self, x):
        return self.decode(self.features(x, 0), 0)

    __call__ = forward

    def _head(self, h: Tensor, frozen: bool = False):
        spec = self.spec
        if spec.head == "softmax":
            return CategoricalDensity(h @ self._p("W_out", frozen) + self._p("b_out", frozen))
        mean = h @ self._p("W_mean", frozen) + self._p("b_mean", frozen)
        if spec.head == "gaussian-heteroscedastic":
            raw = h @ self._p("W_var", frozen) + self._p("b_var", frozen)
            var = dc.softplus(raw) + VARIANCE_FLOOR
        else:
            raw = self._p("raw_var", frozen)
            var = (dc.softplus(raw) + VARIANCE_FLOOR) * np.ones((len(h.value), spec.output_dim))
        return GaussianDensity(mean, var)

    def _input(self, x) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None] if self.spec.input_dim == 1 else x[None, :]
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"input dim {x.shape[-1]} != {self.spec.input_dim}")
        return Tensor(x)

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer <= len(self.spec.hidden):
            raise ValueError(f"invalid mix layer {layer}")

    # -- embedding distribution -----------------------------------------------
    def encode_distribution(self, x, frozen_mean: bool = False) -> GaussianDensity:
        """Diagonal Gaussian ``q(z | x)`` at the mix layer."""
        spec = self.spec
        if spec.embedding is None:
            raise ValueError("model has no embedding head")
        layer = spec.mix_layer
        below = self.features(x, layer - 1) if layer > 0 else self._input(x)
        k = layer - 1
        if layer > 0:
            pre = below @ self.params[f"W{k}"] + self.params[f"b{k}"]
            mean = _activate(spec.activation, pre)
        else:
            mean = below
        if frozen_mean:
            mean = dc.stop_gradient(mean)
        n = len(mean.value)
        if spec.embedding == "heteroscedastic":
            var = dc.softplus(below @ self.params["W_zvar"] + self.params["b_zvar"]) + VARIANCE_FLOOR
        elif spec.embedding == "homoscedastic":
            var = (dc.softplus(self.params["raw_zvar"]) + VARIANCE_FLOOR) * np.ones((n, spec.embedding_dim))
        else:
            h = dc.tanh(self._input(x) @ self.params["V0"] + self.params["c0"])
            var = dc.softplus(h @ self.params["V1"] + self.params["c1"]) + VARIANCE_FLOOR
        return GaussianDensity(mean, var)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights, zero biases and output raw variances.

    Embedding variance offsets start at ``spec.embedding_init_var``.
    """
    params: dict[str, np.ndarray] = {}
    widths = (spec.input_dim,) + spec.hidden
    for k in range(len(spec.hidden)):
        params[f"W{k}"] = dc.glorot_uniform(rng, widths[k], widths[k + 1])
        params[f"b{k}"] = np.zeros(widths[k + 1])
    last = widths[-1]
    if spec.head == "softmax":
        params["W_out"] = dc.glorot_uniform(rng, last, spec.output_dim)
        params["b_out"] = np.zeros(spec.output_dim)
    else:
        params["W_mean"] = dc.glorot_uniform(rng, last, spec.output_dim)
        params["b_mean"] = np.zeros(spec.output_dim)
        if spec.head == "gaussian-heteroscedastic":
            params["W_var"] = dc.glorot_uniform(rng, last, spec.output_dim)
            params["b_var"] = np.zeros(spec.output_dim)
        else:
            params["raw_var"] = np.zeros(1)
    dz = spec.embedding_dim
    z_offset = inverse_softplus(spec.embedding_init_var - VARIANCE_FLOOR)
    if spec.embedding == "heteroscedastic":
        below = spec.width(spec.mix_layer - 1) if spec.mix_layer > 0 else spec.input_dim
        params["W_zvar"] = dc.glorot_uniform(rng, below, dz)
        params["b_zvar"] = np.full(dz, z_offset)
    elif spec.embedding == "homoscedastic":
        params["raw_zvar"] = np.full(dz, z_offset)
    elif spec.embedding == "separate":
        params["V0"] = dc.glorot_uniform(rng, spec.input_dim, spec.variance_hidden)
        params["c0"] = np.zeros(spec.variance_hidden)
        params["V1"] = dc.glorot_uniform(rng, spec.variance_hidden, dz)
        params["c1"] = np.full(dz, z_offset)
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def build_affine_model(A, b, head: str = "gaussian-homoscedastic", variance: float | None = None) -> Mlp:
    """No-hidden-layer model ``x -> A x + b`` followed by ``head``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if A.shape[0] != b.shape[0]:
        raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
    spec = MlpSpec(input_dim=A.shape[1], hidden=(), head=head, output_dim=A.shape[0], mix_layer=0)
    model = Mlp(spec, seed=0)
    key = "out" if head == "softmax" else "mean"
    model.params[f"W_{key}"].value = A.T.copy()
    model.params[f"b_{key}"].value = b.copy()
    if head == "gaussian-homoscedastic" and variance is not None:
        model.params["raw_var"].value = np.array([inverse_softplus(variance - VARIANCE_FLOOR)])
    return model


# -- checkpoint format ---------------------------------------------------------
# Text header, one line per array "name<TAB>shape<TAB>byte offset", closed by a
# line "end"; then the raw little-endian float64 payload.

_MAGIC = "probmix-checkpoint 1"


def save_checkpoint(model: Mlp, path) -> None:
    lines = [_MAGIC, "spec\t" + json.dumps(asdict(model.spec))]
    blobs, offset = [], 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.value, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Mlp:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(_MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}: not a probmix checkpoint")
    header = raw[:cut].decode("utf-8").split("\n")
    payload = raw[cut + len(marker):]
    spec = MlpSpec(**json.loads(header[1].split("\t", 1)[1]))
    params = {}
    for line in header[2:]:
        name, shape, offset = line.split("\t")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=int(offset))
        params[name] = Tensor(arr.reshape(dims).astype(np.float64), requires_grad=True)
    return Mlp(spec, params)
