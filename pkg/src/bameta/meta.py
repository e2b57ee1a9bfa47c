"""Frequentist and Bayesian meta-training, and meta-test evaluation."""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adaptation import bayes_adapt_batch, burnin_adapt_batch, gd_adapt_batch, stack_part
from .autodiff import NumericalError
from .channels import FrameDataset
from .models import (
    RHO_MAX,
    RHO_MIN,
    BayesHyper,
    Demodulator,
    FreqHyper,
    VariationalParams,
    ensemble_predict,
    reparametrize,
)


class ModeMismatchError(ValueError):
    pass


@dataclass
class MetaTrainConfig:
    mode: str = "bayes"  # "freq" | "bayes"
    B: Optional[int] = 16  # None: full batch
    I: int = 2
    eta: float = 0.1
    kappa: float = 1e-3
    R: int = 100  # ensemble size for training (inner and meta-update)
    R_test: int = 100  # ensemble size at inference
    kl_coeff: float = 0.1
    I_meta: int = 200
    seed: int = 0
    n_tr: int = 4
    n_te: Optional[int] = None  # None: all remaining pilots of the frame
    I_star: int = 200
    n_star_tr: int = 8
    first_order: bool = False
    resplit: bool = True
    meta_optimizer: str = "sgd"  # "sgd" | "adam"
    nu_init_std: Optional[float] = 0.1  # None: the model's default initializer
    rho_init: float = math.log(0.1)
    frame_chunk: int = 16

    def __post_init__(self):
        if self.mode not in ("freq", "bayes"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.eta <= 0 or self.kappa < 0:
            raise ValueError("learning rates must be positive")


@dataclass
class MetaTrace:
    losses: list = field(default_factory=list)
    xi_hashes: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)

    def record(self, loss: float, xi: np.ndarray, t0: float) -> None:
        self.losses.append(float(loss))
        self.xi_hashes.append(hashlib.sha256(np.ascontiguousarray(xi).tobytes()).hexdigest()[:16])
        self.wall_times.append(time.perf_counter() - t0)


def init_hyper(mode: str, model, rng: np.random.Generator, cfg: MetaTrainConfig):
    if cfg.nu_init_std is None:
        nu = model.init_params(rng)
    else:
        nu = rng.normal(0.0, cfg.nu_init_std, model.dim)
    shape = getattr(model, "shape", None)
    if mode == "freq":
        return FreqHyper(nu, shape)
    return BayesHyper(nu, np.full(model.dim, cfg.rho_init), shape)


class _Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(g), np.zeros_like(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def _meta_step_fn(cfg: MetaTrainConfig):
    if cfg.meta_optimizer == "adam":
        opt = _Adam(cfg.kappa)
        return opt.step
    if cfg.meta_optimizer != "sgd":
        raise ValueError(f"unknown meta optimizer {cfg.meta_optimizer!r}")
    return lambda g: cfg.kappa * g


def _draw_batch(frames, cfg: MetaTrainConfig, rng: np.random.Generator) -> list:
    t = len(frames)
    if cfg.B is None or cfg.B >= t:
        idx = np.arange(t)
    else:
        idx = np.sort(rng.choice(t, cfg.B, replace=False))
    batch = []
    for i in idx:
        f = frames[i].resplit(rng, cfg.n_tr) if cfg.resplit else frames[i]
        if cfg.n_te is not None and f.n_test > cfg.n_te:
            f = FrameDataset(f.kind, f.y_train, f.x_train, f.y_test[: cfg.n_te], f.x_test[: cfg.n_te], f.state, f.snr)
        if f.n_train == 0 or f.n_test == 0:
            raise ValueError("every meta-training frame needs non-empty train and test splits")
        batch.append(f)
    return batch


def _chunks(seq: list, size: int):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def freq_meta_train(
    frames: Sequence[FrameDataset],
    cfg: MetaTrainConfig,
    model,
    xi0: Optional[FreqHyper] = None,
    rng: Optional[np.random.Generator] = None,
):
    """MAML-style meta-training of the GD initialization (second order by default)."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    xi = (xi0 or init_hyper("freq", model, rng, cfg)).init.copy()
    step = _meta_step_fn(cfg)
    trace = MetaTrace()
    t0 = time.perf_counter()
    for it in range(cfg.I_meta):
        batch = _draw_batch(frames, cfg, rng)
        n_total = sum(f.n_test for f in batch)
        grad = np.zeros_like(xi)
        meta_loss = 0.0
        try:
            for chunk in _chunks(batch, cfg.frame_chunk):
                leaf = ad.Tensor(xi, requires_grad=True)
                ytr, xtr = stack_part(chunk, "train")
                yte, xte = stack_part(chunk, "test")
                phi = gd_adapt_batch(
                    model, ytr, xtr, leaf, cfg.eta, cfg.I, create_graph=True, first_order=cfg.first_order
                )
                losses = model.loss(phi.reshape(len(chunk), 1, model.dim), yte, xte)[:, 0]
                w = np.array([f.n_test for f in chunk], dtype=np.float64) / n_total
                obj = (losses * w).sum()
                (g,) = ad.gradients(obj, [leaf])
                grad += g.data
                meta_loss += float(obj.data)
        except NumericalError as exc:
            raise NumericalError(f"freq meta-training, meta-iteration {it}: {exc}", exc.node_id, exc.op) from exc
        xi = xi - step(grad)
        trace.record(meta_loss, xi, t0)
    return FreqHyper(xi, getattr(model, "shape", None), {"seed": cfg.seed}), trace


def bayes_meta_train(
    frames: Sequence[FrameDataset],
    cfg: MetaTrainConfig,
    model,
    xi0: Optional[BayesHyper] = None,
    rng: Optional[np.random.Generator] = None,
):
    """Empirical-Bayes meta-training of a Gaussian prior through variational GD."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    init = xi0 or init_hyper("bayes", model, rng, cfg)
    nu, rho = init.nu.copy(), init.rho.copy()
    step = _meta_step_fn(cfg)
    trace = MetaTrace()
    t0 = time.perf_counter()
    D = model.dim
    for it in range(cfg.I_meta):
        batch = _draw_batch(frames, cfg, rng)
        n_total = sum(f.n_test for f in batch)
        g_nu_tot, g_rho_tot = np.zeros(D), np.zeros(D)
        meta_loss = 0.0
        try:
            for chunk in _chunks(batch, cfg.frame_chunk):
                lnu = ad.Tensor(nu, requires_grad=True)
                lrho = ad.Tensor(rho, requires_grad=True)
                ytr, xtr = stack_part(chunk, "train")
                yte, xte = stack_part(chunk, "test")
                q_nu, q_rho = bayes_adapt_batch(
                    model, ytr, xtr, lnu, lrho, cfg.eta, cfg.I, cfg.R, rng, cfg.kl_coeff,
                    create_graph=True, first_order=cfg.first_order,
                )
                e = rng.standard_normal((len(chunk), cfg.R, D))
                losses = model.loss(reparametrize(q_nu, q_rho, e), yte, xte).mean(axis=-1)
                w = np.array([f.n_test for f in chunk], dtype=np.float64) / n_total
                obj = (losses * w).sum()
                g_nu, g_rho = ad.gradients(obj, [lnu, lrho])
                g_nu_tot += g_nu.data
                g_rho_tot += g_rho.data
                meta_loss += float(obj.data)
        except NumericalError as exc:
            raise NumericalError(f"bayes meta-training, meta-iteration {it}: {exc}", exc.node_id, exc.op) from exc
        upd = step(np.concatenate([g_nu_tot, g_rho_tot]))
        nu = nu - upd[:D]
        rho = np.clip(rho - upd[D:], RHO_MIN, RHO_MAX)
        trace.record(meta_loss, np.concatenate([nu, rho]), t0)
    return BayesHyper(nu, rho, getattr(model, "shape", None), {"seed": cfg.seed}), trace


def meta_train(frames, cfg: MetaTrainConfig, model, xi0=None, rng=None):
    fn = freq_meta_train if cfg.mode == "freq" else bayes_meta_train
    return fn(frames, cfg, model, xi0, rng)


@dataclass
class FramePredictions:
    """Meta-test output on one frame's payload.

    Demodulation fills ``pred``/``confidence`` (truth is a symbol index);
    equalization fills ``pred_mean`` (truth is the real amplitude).
    """

    frame_id: int
    truth: np.ndarray
    pred: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    pred_mean: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


def adapt_to_frames(hyper, frames: Sequence[FrameDataset], cfg: MetaTrainConfig, model, rng):
    """Burn-in adaptation of every meta-test frame; returns per-frame params."""
    out = burnin_adapt_batch(
        frames, hyper, model, cfg.eta, cfg.I, cfg.I_star, cfg.n_tr, rng, cfg.R_test, cfg.kl_coeff
    )
    if isinstance(hyper, FreqHyper):
        return list(out[0])
    return [VariationalParams(n, r) for n, r in zip(out[0], out[1])]


def predict_frame(params, frame: FrameDataset, model, R: int, rng, frame_id: int = 0, keep_probs=False):
    y = frame.y_test
    truth = frame.targets("test")
    if isinstance(model, Demodulator):
        if isinstance(params, VariationalParams):
            probs = ensemble_predict(y, params, R, rng, model)
        else:
            probs = model.predict(params, y)[0]
        pred = probs.argmax(axis=-1)
        conf = probs.max(axis=-1)
        return FramePredictions(frame_id, truth, pred, conf, probs=probs if keep_probs else None)
    if isinstance(params, VariationalParams):
        mean = ensemble_predict(y, params, R, rng, model).mean
    else:
        mean = model.predict(params, y)[0]
    return FramePredictions(frame_id, truth, pred_mean=mean)


def meta_test_eval(
    hyper,
    test_frames: Sequence[FrameDataset],
    cfg: MetaTrainConfig,
    model,
    rng: Optional[np.random.Generator] = None,
) -> list:
    """Adapt to each meta-test frame's pilots, then predict its payload."""
    if hyper.mode != cfg.mode:
        raise ModeMismatchError(f"checkpoint is {hyper.mode!r} but evaluation mode is {cfg.mode!r}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = adapt_to_frames(hyper, test_frames, cfg, model, rng)
    return [predict_frame(p, f, model, cfg.R_test, rng, i) for i, (p, f) in enumerate(zip(params, test_frames))]
