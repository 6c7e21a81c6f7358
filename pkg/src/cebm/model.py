"""Conjugate energy-based models.

A CEBM pairs an encoder ``t(x) = (t1, t2)`` with a diagonal Gaussian bias
``lam``.  Because the bias is conjugate to the statistics, the posterior over
``z`` is the Gaussian ``lam + t(x)`` and the marginal energy is available in
closed form,

    E(x) = -B(lam + t(x)) + B(lam).

The GMM variant replaces the single bias with L Gaussian components and sums
the assignment out with a logsumexp.  ``BaselineEbm`` shares the encoder trunk
but ends in a scalar energy head.

Every model exposes ``energy_graph(x, params)``, which builds the per-example
energy on the active tape; the numpy-level helpers below wrap it.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .expfam import (
    GaussianNaturalParams,
    log_normalizer_terms,
    natural_to_mean,
    posterior_params,
)

__all__ = [
    "LayerSpec",
    "EncoderConfig",
    "encoder_template",
    "EnergyModel",
    "CebmModel",
    "GmmCebmModel",
    "BaselineEbm",
    "log_normalizer_graph",
    "conjugate_energy",
    "efh_energy",
    "efh_as_cebm_energy",
    "MODEL_KINDS",
]

ACTIVATIONS = {
    "swish": ad.swish,
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "softplus": ad.softplus,
    "none": None,
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "dense"
    width: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    activation: str = "swish"

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.width < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid layer extents {self}")


@dataclass(frozen=True)
class EncoderConfig:
    """Trunk layers plus latent size.  The 2K-way statistics head is implicit."""

    input_shape: tuple
    layers: tuple
    latent_dim: int = 16

    def __post_init__(self):
        shape = tuple(int(s) for s in self.input_shape)
        if len(shape) not in (1, 3) or min(shape) < 1:
            raise ValueError(f"input_shape must be (D,) or (C, H, W), got {shape}")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "layers", tuple(self.layers))
        if not 1 <= self.latent_dim <= 128:
            raise ValueError("latent_dim must lie in [1, 128]")
        self.trunk_shapes()

    def trunk_shapes(self) -> list:
        """Output shape after each trunk layer (validates the stack)."""
        shape = self.input_shape
        shapes = []
        for spec in self.layers:
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise ValueError("conv layer after a dense layer")
                c, h, w = shape
                ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                if ho < 1 or wo < 1:
                    raise ValueError(f"conv layer {spec} collapses input {shape}")
                shape = (spec.width, ho, wo)
            else:
                shape = (spec.width,)
            shapes.append(shape)
        return shapes

    @property
    def feature_dim(self) -> int:
        shapes = self.trunk_shapes()
        last = shapes[-1] if shapes else self.input_shape
        return int(np.prod(last))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "latent_dim": self.latent_dim,
            "layers": [vars(spec).copy() for spec in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**s) for s in d["layers"]), d["latent_dim"])


def encoder_template(name: str, input_shape, latent_dim: int = 16) -> EncoderConfig:
    """Named encoder stacks.

    ``mnist-28`` is the published 28x28 encoder at full width; ``desk-conv``
    keeps its layer pattern (3x3 stride-1 conv, then 4x4 stride-2 convs, then
    a dense layer) at a fraction of the width; ``mlp`` is a two-layer
    perceptron for flat or tiny inputs.
    """
    if name == "mnist-28":
        layers = (
            LayerSpec("conv", 64, 3, 1, 1),
            LayerSpec("conv", 64, 4, 2, 1),
            LayerSpec("conv", 32, 4, 2, 1),
            LayerSpec("conv", 32, 4, 2, 1),
            LayerSpec("dense", 128),
        )
    elif name == "desk-conv":
        layers = (
            LayerSpec("conv", 8, 3, 1, 1),
            LayerSpec("conv", 16, 4, 2, 1),
            LayerSpec("conv", 16, 4, 2, 1),
            LayerSpec("dense", 64),
        )
    elif name == "mlp":
        layers = (LayerSpec("dense", 64), LayerSpec("dense", 64))
    elif name == "linear":
        layers = ()
    else:
        raise ValueError(f"unknown encoder template {name!r}")
    return EncoderConfig(tuple(input_shape), layers, latent_dim)


def _init_trunk(cfg: EncoderConfig, rng: np.random.Generator, prefix="layer") -> dict:
    params = {}
    shape = cfg.input_shape
    for i, spec in enumerate(cfg.layers):
        if spec.kind == "conv":
            fan_in = shape[0] * spec.kernel * spec.kernel
            wshape = (spec.width, shape[0], spec.kernel, spec.kernel)
        else:
            fan_in = int(np.prod(shape))
            wshape = (fan_in, spec.width)
        bound = 1.0 / math.sqrt(fan_in)
        params[f"{prefix}{i}.w"] = rng.uniform(-bound, bound, size=wshape)
        params[f"{prefix}{i}.b"] = np.zeros(spec.width)
        shape = cfg.trunk_shapes()[i]
    return params


def _dense_init(rng, fan_in, width):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, width)), np.zeros(width)


def _trunk_graph(cfg: EncoderConfig, p: dict, x: Tensor, prefix="layer") -> Tensor:
    h = x
    for i, spec in enumerate(cfg.layers):
        w, b = p[f"{prefix}{i}.w"], p[f"{prefix}{i}.b"]
        if spec.kind == "conv":
            h = ad.conv2d(h, w, stride=spec.stride, padding=spec.padding)
            h = ad.add(h, ad.reshape(b, (1, spec.width, 1, 1)))
        else:
            if len(h.shape) != 2:
                h = ad.reshape(h, (h.shape[0], -1))
            h = ad.add(ad.matmul(h, w), b)
        act = ACTIVATIONS[spec.activation]
        if act is not None:
            h = act(h)
    if len(h.shape) != 2:
        h = ad.reshape(h, (h.shape[0], -1))
    return h


def log_normalizer_graph(lam1: Tensor, lam2: Tensor) -> Tensor:
    """Per-dimension B(lam) = -lam1**2 / (4 lam2) - 0.5 log(-2 lam2) on the tape."""
    quad = ad.negate(ad.div(ad.square(lam1), ad.scale(lam2, 4.0)))
    return ad.sub(quad, ad.scale(ad.log(ad.scale(lam2, -2.0)), 0.5))


def conjugate_energy(stats, eta_z, bias_energy) -> np.ndarray:
    """E(x, z) = -<t(x), eta(z)> + E_bias(z), batched over leading axes."""
    stats = np.asarray(stats, dtype=np.float64)
    eta_z = np.asarray(eta_z, dtype=np.float64)
    return -np.sum(stats * eta_z, axis=-1) + bias_energy


def efh_energy(x, z, theta_x, theta_z, theta_xz) -> float:
    """Harmonium energy -<x^T W, z> - <x, theta_x> - <z, theta_z> (identity statistics)."""
    x, z = np.asarray(x, float), np.asarray(z, float)
    theta_x, theta_z, theta_xz = (np.asarray(a, float) for a in (theta_x, theta_z, theta_xz))
    if theta_xz.shape != (x.shape[-1], z.shape[-1]) or theta_x.shape != x.shape[-1:] \
            or theta_z.shape != z.shape[-1:]:
        raise ad.ShapeError(
            f"efh_energy: x {x.shape}, z {z.shape}, theta_x {theta_x.shape}, "
            f"theta_z {theta_z.shape}, theta_xz {theta_xz.shape}"
        )
    return float(-(x @ theta_xz) @ z - x @ theta_x - z @ theta_z)


def efh_as_cebm_energy(x, z, theta_x, theta_z, theta_xz) -> float:
    """The harmonium written as a CEBM with linear statistics.

    t(x) = [x^T W, <theta_x, x>], eta(z) = [z, 1], E_bias(z) = -<z, theta_z>.
    """
    x, z = np.asarray(x, float), np.asarray(z, float)
    stats = np.concatenate([x @ np.asarray(theta_xz, float), [x @ np.asarray(theta_x, float)]])
    eta = np.concatenate([z, [1.0]])
    return float(conjugate_energy(stats, eta, -(z @ np.asarray(theta_z, float))))


# --------------------------------------------------------------------------


class EnergyModel:
    """Shared plumbing: parameter table, input checks, numpy wrappers."""

    kind = "abstract"

    def __init__(self, config: EncoderConfig, params: dict):
        self.config = config
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    # subclasses implement
    def energy_graph(self, x: Tensor, p: dict) -> Tensor:
        raise NotImplementedError

    def meta(self) -> dict:
        return {"kind": self.kind, "encoder": self.config.to_dict()}

    @property
    def trainable(self) -> list:
        return list(self.params)

    def copy(self):
        return copy.deepcopy(self)

    def bind(self, requires_grad: bool = True) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad and k in self.trainable, _check=False)
                for k, v in self.params.items()}

    def check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        shape = self.config.input_shape
        if x.shape == shape:
            x = x[None]
        if x.shape[1:] != shape:
            raise ad.ShapeError(f"input shape {x.shape[1:]} does not match encoder input {shape}")
        if not np.all(np.isfinite(x)):
            raise ad.NonFiniteError("non-finite model input")
        return x

    def energy(self, x) -> np.ndarray:
        """Per-example energies, shape (N,)."""
        x = self.check_input(x)
        return self.energy_graph(Tensor(x, _check=False), self.bind(False)).data.copy()

    def energy_and_input_grad(self, x):
        """Energies (N,) and dE/dx per example (same shape as x)."""
        x = self.check_input(x)
        leaf = Tensor(x, requires_grad=True, _check=False)
        tape = Tape()
        with tape:
            e = self.energy_graph(leaf, self.bind(False))
            total = ad.sum(e)
        g = backward(tape, total, wrt=[leaf])[leaf]
        return e.data.copy(), g

    def energy_and_param_grads(self, x, weights=None):
        """Sum of (optionally weighted) energies and its parameter gradients."""
        x = self.check_input(x)
        p = self.bind(True)
        tape = Tape()
        with tape:
            e = self.energy_graph(Tensor(x, _check=False), p)
            total = ad.sum(e if weights is None else ad.mul(e, Tensor(weights)))
        grads = backward(tape, total, wrt=[p[k] for k in self.trainable])
        return e.data.copy(), {k: grads[p[k]] for k in self.trainable}


class CebmModel(EnergyModel):
    """Spherical-Gaussian bias CEBM.  The bias is a fixed hyperparameter."""

    kind = "cebm"

    def __init__(self, config: EncoderConfig, params: dict, bias: GaussianNaturalParams | None = None,
                 stat_head_scale: float = 1.0):
        super().__init__(config, params)
        self.bias = bias if bias is not None else GaussianNaturalParams.standard(config.latent_dim)
        if self.bias.dim != config.latent_dim:
            raise ValueError("bias dimension does not match latent_dim")
        if not stat_head_scale > 0:
            raise ValueError("stat_head_scale must be positive")
        self.stat_head_scale = float(stat_head_scale)

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator, **kw) -> "CebmModel":
        params = _init_trunk(config, rng)
        params["head.w"], params["head.b"] = _dense_init(rng, config.feature_dim, 2 * config.latent_dim)
        return cls(config, params, **kw)

    @classmethod
    def zeros(cls, config: EncoderConfig, **kw) -> "CebmModel":
        """All-zero weights: t1 = 0 and t2 = -softplus(0) * scale for every input."""
        m = cls.init(config, np.random.default_rng(0), **kw)
        m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
        return m

    @classmethod
    def zero_statistics(cls, config: EncoderConfig, **kw) -> "CebmModel":
        """Encoder emitting t = (0, -0.0) exactly, so every posterior equals the bias."""
        m = cls.zeros(config, **kw)
        m.params["head.b"][config.latent_dim:] = -1000.0  # softplus underflows to exactly 0
        return m

    def meta(self) -> dict:
        d = super().meta()
        d["bias"] = {"lam1": self.bias.lam1.tolist(), "lam2": self.bias.lam2.tolist()}
        d["stat_head_scale"] = self.stat_head_scale
        return d

    def statistics_graph(self, x: Tensor, p: dict):
        k = self.config.latent_dim
        h = _trunk_graph(self.config, p, x)
        out = ad.add(ad.matmul(h, p["head.w"]), p["head.b"])
        t1 = ad.slice_last(out, 0, k)
        t2 = ad.scale(ad.softplus(ad.slice_last(out, k, 2 * k)), -self.stat_head_scale)
        return t1, t2

    def energy_graph(self, x: Tensor, p: dict) -> Tensor:
        t1, t2 = self.statistics_graph(x, p)
        lam1 = ad.add(t1, Tensor(self.bias.lam1, _check=False))
        lam2 = ad.add(t2, Tensor(self.bias.lam2, _check=False))
        b_post = ad.sum(log_normalizer_graph(lam1, lam2), axis=-1)
        b_bias = float(log_normalizer_terms(self.bias).sum())
        return ad.add(ad.negate(b_post), Tensor(b_bias))

    def encode(self, x):
        """Sufficient statistics (t1, t2), each (N, K)."""
        x = self.check_input(x)
        t1, t2 = self.statistics_graph(Tensor(x, _check=False), self.bind(False))
        return t1.data.copy(), t2.data.copy()

    def posterior(self, x) -> GaussianNaturalParams:
        return posterior_params(self.bias, *self.encode(x))

    def energy_marginal(self, x) -> np.ndarray:
        return self.energy(x)

    def bias_energy(self, z) -> np.ndarray:
        """E_lam(z) = -sum_k (<(z_k, z_k**2), lam> - B(lam))."""
        z = np.asarray(z, dtype=np.float64)
        b = log_normalizer_terms(self.bias)
        return -np.sum(self.bias.lam1 * z + self.bias.lam2 * z * z - b, axis=-1)

    def energy_joint(self, x, z) -> np.ndarray:
        """E(x, z) = -<t(x), (z, z**2)> + E_lam(z); z broadcasts against the batch."""
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ad.NonFiniteError("non-finite latent z")
        t1, t2 = self.encode(x)
        stats = np.concatenate([t1, t2], axis=-1)
        eta = np.concatenate([z, z * z], axis=-1)
        return conjugate_energy(stats, eta, self.bias_energy(z))


class GmmCebmModel(EnergyModel):
    """CEBM with a trainable mixture-of-Gaussians bias over L components.

    Component precisions are kept valid by parameterizing lam2 = -softplus(raw).
    """

    kind = "gmm-cebm"

    def __init__(self, config: EncoderConfig, params: dict, stat_head_scale: float = 1.0):
        super().__init__(config, params)
        # L = 1 is allowed so the single-Gaussian reduction can be checked directly
        if self.num_components < 1:
            raise ValueError("GMM-CEBM needs at least one component")
        self.stat_head_scale = float(stat_head_scale)

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator, components: int = 10,
             **kw) -> "GmmCebmModel":
        k = config.latent_dim
        params = _init_trunk(config, rng)
        params["head.w"], params["head.b"] = _dense_init(rng, config.feature_dim, 2 * k)
        # unit variances, means spread over [-1, 1]
        means = np.linspace(-1.0, 1.0, components)
        params["mix.lam1"] = np.repeat(means[:, None], k, axis=1)
        params["mix.raw2"] = np.full((components, k), math.log(math.expm1(0.5)))
        return cls(config, params, **kw)

    @property
    def num_components(self) -> int:
        return self.params["mix.lam1"].shape[0]

    def meta(self) -> dict:
        d = super().meta()
        d["components"] = self.num_components
        d["stat_head_scale"] = self.stat_head_scale
        return d

    def components(self) -> GaussianNaturalParams:
        raw = self.params["mix.raw2"]
        return GaussianNaturalParams(self.params["mix.lam1"], -np.logaddexp(0.0, raw))

    statistics_graph = CebmModel.statistics_graph

    def _gaps_graph(self, x: Tensor, p: dict) -> Tensor:
        """(N, L) matrix of sum_k B(lam~_{l,k}) - B(lam_{l,k})."""
        t1, t2 = self.statistics_graph(x, p)
        n, k = t1.shape
        lam1 = p["mix.lam1"]
        lam2 = ad.negate(ad.softplus(p["mix.raw2"]))
        post1 = ad.add(ad.reshape(t1, (n, 1, k)), lam1)
        post2 = ad.add(ad.reshape(t2, (n, 1, k)), lam2)
        b_post = ad.sum(log_normalizer_graph(post1, post2), axis=-1)
        b_prior = ad.sum(log_normalizer_graph(lam1, lam2), axis=-1)
        return ad.sub(b_post, b_prior)

    def energy_graph(self, x: Tensor, p: dict) -> Tensor:
        return ad.negate(ad.logsumexp(self._gaps_graph(x, p), axis=-1))

    def encode(self, x):
        x = self.check_input(x)
        t1, t2 = self.statistics_graph(Tensor(x, _check=False), self.bind(False))
        return t1.data.copy(), t2.data.copy()

    def gmm_energy_marginal(self, x) -> np.ndarray:
        return self.energy(x)

    def component_posterior(self, x):
        """Responsibilities (N, L) and per-component posteriors with lam shape (N, L, K)."""
        x = self.check_input(x)
        gaps = self._gaps_graph(Tensor(x, _check=False), self.bind(False)).data
        probs = np.exp(gaps - gaps.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        t1, t2 = self.encode(x)
        comp = self.components()
        post = posterior_params(comp, t1[:, None, :], t2[:, None, :])
        return probs, post

    def posterior_mean(self, x) -> np.ndarray:
        probs, post = self.component_posterior(x)
        return np.einsum("nl,nlk->nk", probs, natural_to_mean(post).m1)


class BaselineEbm(EnergyModel):
    """Unconditional scalar-energy EBM on the same trunk; features are the trunk output."""

    kind = "baseline-ebm"

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> "BaselineEbm":
        params = _init_trunk(config, rng)
        params["energy.w"], params["energy.b"] = _dense_init(rng, config.feature_dim, 1)
        return cls(config, params)

    def features(self, x) -> np.ndarray:
        x = self.check_input(x)
        return _trunk_graph(self.config, self.bind(False), Tensor(x, _check=False)).data.copy()

    def energy_graph(self, x: Tensor, p: dict) -> Tensor:
        h = _trunk_graph(self.config, p, x)
        out = ad.add(ad.matmul(h, p["energy.w"]), p["energy.b"])
        return ad.reshape(out, (out.shape[0],))


MODEL_KINDS = {cls.kind: cls for cls in (CebmModel, GmmCebmModel, BaselineEbm)}


def build_model(meta: dict, params: dict) -> EnergyModel:
    """Reconstruct a model from ``meta()`` output and a parameter table."""
    config = EncoderConfig.from_dict(meta["encoder"])
    kind = meta["kind"]
    if kind == "cebm":
        bias = GaussianNaturalParams(meta["bias"]["lam1"], meta["bias"]["lam2"])
        return CebmModel(config, params, bias=bias, stat_head_scale=meta["stat_head_scale"])
    if kind == "gmm-cebm":
        return GmmCebmModel(config, params, stat_head_scale=meta["stat_head_scale"])
    if kind == "baseline-ebm":
        return BaselineEbm(config, params)
    raise ValueError(f"unknown model kind {kind!r}")
