"""Predictors, the Gaussian mean-field family and ensemble prediction.

Parameter vectors are flat. Functions that take a parameter ``Tensor`` accept
arbitrary leading batch axes ``(..., D)`` so that a whole meta-batch of frames,
each with an ensemble of sampled parameters, runs through one forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channels import PAM4, QAM16

RHO_MIN = -30.0
RHO_MAX = 5.0


@dataclass(frozen=True)
class ModelShape:
    in_dim: int
    hidden: tuple
    out_dim: int
    activation: Optional[str] = "relu"
    bias: bool = True

    @property
    def widths(self) -> list:
        return [self.in_dim, *self.hidden, self.out_dim]

    @property
    def dim(self) -> int:
        w = self.widths
        return sum(a * b + (b if self.bias else 0) for a, b in zip(w[:-1], w[1:]))

    def layout(self) -> list:
        """``(w_start, w_stop, b_start, b_stop, fan_in, fan_out)`` per layer."""
        out, pos = [], 0
        w = self.widths
        for a, b in zip(w[:-1], w[1:]):
            ws = pos
            pos += a * b
            bs = pos
            if self.bias:
                pos += b
            out.append((ws, ws + a * b, bs, pos, a, b))
        return out

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelShape":
        return cls(d["in_dim"], tuple(d["hidden"]), d["out_dim"], d["activation"], d["bias"])


DEMOD_SHAPE = ModelShape(2, (10, 30, 30), 16, "relu", True)
EQ_SHAPE = ModelShape(2, (), 1, None, False)


@dataclass
class ModelParams:
    theta: np.ndarray
    shape: Optional[ModelShape] = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.shape is not None and self.theta.shape[-1] != self.shape.dim:
            raise ValueError(f"expected {self.shape.dim} parameters, got {self.theta.shape[-1]}")


@dataclass
class VariationalParams:
    """Gaussian mean-field ``N(nu, diag(exp(2 rho)))``."""

    nu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.nu.shape != self.rho.shape:
            raise ValueError("nu and rho must have the same shape")

    @property
    def dim(self) -> int:
        return self.nu.shape[-1]


@dataclass
class FreqHyper:
    """Frequentist hyperparameter: the GD initialization."""

    init: np.ndarray
    shape: Optional[ModelShape] = None
    meta: dict = field(default_factory=dict)

    mode = "freq"


@dataclass
class BayesHyper:
    """Bayesian hyperparameter: a Gaussian prior over the model parameters."""

    nu: np.ndarray
    rho: np.ndarray
    shape: Optional[ModelShape] = None
    meta: dict = field(default_factory=dict)

    mode = "bayes"

    def as_variational(self) -> VariationalParams:
        return VariationalParams(self.nu, self.rho)


Hyperparams = Union[FreqHyper, BayesHyper]


def forward(shape: ModelShape, theta: Tensor, y) -> Tensor:
    """Network output for parameters ``(..., D)`` and inputs ``(..., N, in_dim)``."""
    theta = ad.as_tensor(theta)
    if theta.shape[-1] != shape.dim:
        raise ValueError(f"expected {shape.dim} parameters, got {theta.shape[-1]}")
    batch = theta.shape[:-1]
    h = ad.as_tensor(y)
    layers = shape.layout()
    for k, (ws, we, bs, be, fan_in, fan_out) in enumerate(layers):
        W = theta[..., ws:we].reshape(batch + (fan_in, fan_out))
        h = h @ W
        if shape.bias:
            h = h + theta[..., bs:be].reshape(batch + (1, fan_out))
        if k < len(layers) - 1 and shape.activation == "relu":
            h = ad.relu(h)
        elif k < len(layers) - 1 and shape.activation == "tanh":
            h = ad.tanh(h)
    return h


def _one_hot(x: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n)[np.asarray(x, dtype=np.int64)]


class Demodulator:
    """Soft demodulator: MLP logits followed by a softmax over 16 symbols."""

    kind = QAM16

    def __init__(self, shape: ModelShape = DEMOD_SHAPE):
        self.shape = shape

    @property
    def dim(self) -> int:
        return self.shape.dim

    def loss(self, theta: Tensor, y: np.ndarray, x: np.ndarray) -> Tensor:
        """Cross-entropy per parameter set.

        ``theta (T, S, D)``, ``y (T, N, 2)``, ``x (T, N)`` class indices -> ``(T, S)``.
        """
        logits = forward(self.shape, theta, np.asarray(y)[:, None])
        lse = ad.logsumexp(logits, axis=-1)
        picked = (logits * _one_hot(x, self.shape.out_dim)[:, None]).sum(axis=-1)
        return (lse - picked).mean(axis=-1)

    def predict(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Class probabilities ``(S, N, 16)`` for parameters ``(S, D)``."""
        with ad.no_grad():
            logits = forward(self.shape, np.atleast_2d(theta), np.asarray(y)[None]).data
        return _softmax(logits)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(+-1/sqrt(fan_in)) weights and biases, the usual dense-layer default."""
        theta = np.empty(self.dim)
        for ws, we, bs, be, fan_in, _ in self.shape.layout():
            bound = 1.0 / math.sqrt(fan_in)
            theta[ws:we] = rng.uniform(-bound, bound, we - ws)
            theta[bs:be] = rng.uniform(-bound, bound, be - bs)
        return theta


class Equalizer:
    """Soft linear equalizer ``p(x | y, phi) = N(x | phi^T y, 1/beta)``."""

    kind = PAM4

    def __init__(self, beta: float = 150.0, shape: ModelShape = EQ_SHAPE):
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)
        self.shape = shape

    @property
    def dim(self) -> int:
        return self.shape.dim

    def loss(self, theta: Tensor, y: np.ndarray, x: np.ndarray) -> Tensor:
        """Negative log-density per parameter set; ``x`` holds real amplitudes."""
        pred = forward(self.shape, theta, np.asarray(y)[:, None])[..., 0]
        resid = pred - np.asarray(x, dtype=np.float64)[:, None]
        const = 0.5 * math.log(self.beta / (2.0 * math.pi))
        return (resid * resid).mean(axis=-1) * (0.5 * self.beta) - const

    def predict(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Predicted means ``(S, N)``."""
        return np.atleast_2d(theta) @ np.asarray(y).T

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, 1.0, self.dim)


def model_for(kind: str, beta: float = 150.0):
    return Demodulator() if kind == QAM16 else Equalizer(beta)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mlp_logits(y, phi: ModelParams) -> np.ndarray:
    with ad.no_grad():
        return forward(phi.shape, phi.theta, np.atleast_2d(y)).data.reshape(
            np.shape(y)[:-1] + (phi.shape.out_dim,)
        )


def demod_probs(y, phi: ModelParams) -> np.ndarray:
    return _softmax(mlp_logits(y, phi))


def equalizer_logdensity(x, y, phi: ModelParams, beta: float) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be positive")
    mean = np.asarray(y, dtype=np.float64) @ phi.theta
    return 0.5 * np.log(beta / (2.0 * np.pi)) - 0.5 * beta * (np.asarray(x) - mean) ** 2


def kl_terms(nu_q, rho_q, nu_p, rho_p) -> Tensor:
    """Closed-form ``KL(q || p)`` of diagonal Gaussians, summed over the last axis."""
    nu_q, rho_q = ad.as_tensor(nu_q), ad.as_tensor(rho_q)
    diff = nu_q - nu_p
    ratio = (ad.exp(rho_q * 2.0) + diff * diff) / ad.exp(ad.as_tensor(rho_p) * 2.0)
    return ((rho_p - rho_q) * 2.0 + ratio - 1.0).sum(axis=-1) * 0.5


def kl_gaussians(q: VariationalParams, p: Union[BayesHyper, VariationalParams]) -> float:
    if q.nu.shape != p.nu.shape:
        raise ValueError("dimension mismatch between q and p")
    with ad.no_grad():
        return float(kl_terms(q.nu, q.rho, p.nu, p.rho).data)


def reparametrize(nu, rho, e) -> Tensor:
    """``nu + exp(rho) * e`` with ``nu, rho (..., D)`` and noise ``e (..., R, D)``."""
    nu, rho = ad.as_tensor(nu), ad.as_tensor(rho)
    return nu.reshape(nu.shape[:-1] + (1, nu.shape[-1])) + (
        ad.exp(rho).reshape(rho.shape[:-1] + (1, rho.shape[-1])) * e
    )


def sample_params(
    q: VariationalParams,
    rng: Optional[np.random.Generator] = None,
    e: Optional[np.ndarray] = None,
    shape: Optional[ModelShape] = None,
) -> ModelParams:
    """One reparametrized draw; pass ``e`` to fix the noise."""
    if e is None:
        e = rng.standard_normal(q.nu.shape)
    rho = np.clip(q.rho, RHO_MIN, RHO_MAX)
    return ModelParams(q.nu + np.exp(rho) * e, shape)


def estimate_expectation(
    G: Callable[[np.ndarray], float],
    q: VariationalParams,
    R: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo mean of ``G`` over ``R`` reparametrized draws from ``q``."""
    if R < 1:
        raise ValueError("R must be at least 1")
    e = rng.standard_normal((R, q.dim))
    thetas = q.nu + np.exp(np.clip(q.rho, RHO_MIN, RHO_MAX)) * e
    return float(sum(G(t) for t in thetas) / R)


@dataclass
class EqualizerPrediction:
    mean: np.ndarray
    var: np.ndarray


def ensemble_predict(y, q: VariationalParams, R: int, rng: np.random.Generator, model):
    """Ensemble predictive distribution from ``R`` posterior draws.

    Demodulator: averaged class probabilities ``(N, 16)``. Equalizer: mixture
    mean and variance (component variance ``1/beta`` included).
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    e = rng.standard_normal((R, q.dim))
    thetas = q.nu + np.exp(np.clip(q.rho, RHO_MIN, RHO_MAX)) * e
    if isinstance(model, Demodulator):
        return model.predict(thetas, y).mean(axis=0)
    means = model.predict(thetas, y)
    mix_mean = means.mean(axis=0)
    spread = np.maximum((means**2).mean(axis=0) - mix_mean**2, 0.0)
    return EqualizerPrediction(mix_mean, 1.0 / model.beta + spread)
