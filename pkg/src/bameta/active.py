"""Active meta-learning for the equalizer: score, select, invert, simulate.

The score of a model parameter is the negative log of the mixture of the
per-frame variational posteriors, so it is high where no observed frame put
posterior mass. The next channel state is the one whose optimal equalizer is
the maximizer of the score over the unit disk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adaptation import bayes_adapt_batch
from .channels import EqChannelState, FrameDataset, generate_frame, pam4, sample_eq_state
from .meta import MetaTrainConfig, bayes_meta_train, init_hyper, meta_test_eval
from .metrics import mse
from .models import BayesHyper, Equalizer, ModelParams, VariationalParams

DEGENERATE_NORM = 1e-9


class DegenerateParameterError(ValueError):
    pass


def _as_vec(phi) -> np.ndarray:
    return np.asarray(phi.theta if isinstance(phi, ModelParams) else phi, dtype=np.float64)


def _stack_posts(posts: Sequence[VariationalParams]) -> tuple:
    if len(posts) == 0:
        raise ValueError("at least one posterior is required")
    nu = np.stack([np.asarray(p.nu, dtype=np.float64) for p in posts])
    rho = np.stack([np.asarray(p.rho, dtype=np.float64) for p in posts])
    return nu, rho


def log_component_densities(phis: np.ndarray, nu: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``log N(phi | nu_t, diag exp(2 rho_t))`` for ``phis (K, D)`` -> ``(K, T)``."""
    z = (phis[:, None, :] - nu[None]) * np.exp(-rho)[None]
    D = nu.shape[1]
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(rho, axis=-1)[None] - 0.5 * D * math.log(2 * math.pi)


def score_many(phis, posts: Sequence[VariationalParams]) -> np.ndarray:
    """Score of each row of ``phis (K, D)``."""
    nu, rho = _stack_posts(posts)
    phis = np.atleast_2d(np.asarray(phis, dtype=np.float64))
    if phis.shape[1] != nu.shape[1]:
        raise ValueError(f"parameter dimension {phis.shape[1]} != posterior dimension {nu.shape[1]}")
    logd = log_component_densities(phis, nu, rho)
    m = logd.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.mean(np.exp(logd - m), axis=1))
    return -lse


def score(phi, posts: Sequence[VariationalParams]) -> float:
    return float(score_many(_as_vec(phi)[None], posts)[0])


def score_gradient(phi: np.ndarray, posts: Sequence[VariationalParams]) -> np.ndarray:
    """Gradient of the score: responsibility-weighted ``(phi - nu_t) / sigma_t^2``."""
    nu, rho = _stack_posts(posts)
    logd = log_component_densities(phi[None], nu, rho)[0]
    w = np.exp(logd - logd.max())
    w /= w.sum()
    return np.sum(w[:, None] * (phi[None] - nu) * np.exp(-2 * rho), axis=0)


def polar_grid(n_radius: int = 64, n_angle: int = 256) -> tuple:
    """Radii ``k / n_radius`` (k = 1..n_radius) and angles ``2 pi j / n_angle``."""
    radii = np.arange(1, n_radius + 1) / n_radius
    angles = 2 * np.pi * np.arange(n_angle) / n_angle
    return radii, angles


def grid_points(radii: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Cartesian points ``(n_radius * n_angle, 2)``, radius-major."""
    r, a = np.meshgrid(radii, angles, indexing="ij")
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=-1).reshape(-1, 2)


def _project_disk(phi: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(phi)
    return phi / n if n > 1.0 else phi


@dataclass
class Selection:
    phi: np.ndarray
    score: float
    grid_phi: np.ndarray
    grid_score: float


def select_next_param(
    posts: Sequence[VariationalParams],
    n_radius: int = 64,
    n_angle: int = 256,
    n_refine: int = 50,
    tie_tol: float = 1e-12,
) -> Selection:
    """Maximize the score over the unit disk: polar grid, then projected ascent.

    Grid ties (within ``tie_tol`` relative) go to the smallest angle, then the
    smallest radius. Ascent steps are accepted only if they do not lower the
    score, so the refined score is never below the grid optimum.
    """
    nu, _ = _stack_posts(posts)
    if nu.shape[1] != 2:
        raise ValueError("selection over the unit disk needs a two-parameter model")
    radii, angles = polar_grid(n_radius, n_angle)
    pts = grid_points(radii, angles)
    s = score_many(pts, posts)
    best = s.max()
    ties = np.flatnonzero(s >= best - tie_tol * max(1.0, abs(best)))
    ri, ai = np.divmod(ties, n_angle)
    pick = ties[np.lexsort((ri, ai))[0]]
    phi, cur = pts[pick].copy(), float(s[pick])
    grid_phi, grid_score = phi.copy(), cur

    step = 0.5 / n_radius
    for _ in range(n_refine):
        g = score_gradient(phi, posts)
        gn = np.linalg.norm(g)
        if gn == 0.0:
            break
        while step > 1e-14:
            cand = _project_disk(phi + step * g / gn)
            sc = float(score_many(cand[None], posts)[0])
            if sc >= cur:
                phi, cur = cand, sc
                step *= 1.5
                break
            step *= 0.5
        else:
            break
    return Selection(phi, cur, grid_phi, grid_score)


def invert_channel_equalizer(phi) -> EqChannelState:
    """Minimum-norm channel ``c`` with ``phi^T c = 1``: ``c = phi / |phi|^2``."""
    v = _as_vec(phi)
    n2 = float(v @ v)
    if math.sqrt(n2) <= DEGENERATE_NORM:
        raise DegenerateParameterError("cannot invert a (near-)zero equalizer")
    return EqChannelState(tuple(float(a) for a in v / n2))


def invert_channel_sgd(
    phi,
    model: Equalizer,
    snr: float,
    rng: np.random.Generator,
    n_steps: int = 200,
    lr: float = 0.5,
    n_samples: int = 256,
) -> EqChannelState:
    """Channel search by GD on a sampled estimate of the expected log-loss.

    Symbols and noise are drawn once (common random numbers). Starting from
    ``c = 0`` the iterates stay in the span of ``phi`` and approach the
    minimum-norm solution.
    """
    v = _as_vec(phi)
    n2 = float(v @ v)
    if math.sqrt(n2) <= DEGENERATE_NORM:
        raise DegenerateParameterError("cannot invert a (near-)zero equalizer")
    const = pam4()
    x = const.points[rng.integers(0, const.size, n_samples)]
    z = rng.normal(0.0, math.sqrt(1.0 / (2.0 * snr)), size=(n_samples, 2))
    c = np.zeros(2)
    for _ in range(n_steps):
        leaf = ad.Tensor(c, requires_grad=True)
        y = ad.as_tensor(x[:, None]) * leaf.reshape(1, 2) + z
        pred = (y @ v.reshape(2, 1)).reshape(n_samples)
        r = pred - x
        loss = (r * r).mean() * (0.5 * model.beta)
        (g,) = ad.gradients(loss, [leaf])
        c = c - (lr / n2) * g.data / model.beta
    return EqChannelState(tuple(float(a) for a in c))


# the acquisition loop


@dataclass
class AcquisitionRound:
    t: int
    c: tuple
    phi: Optional[tuple]
    score: Optional[float]
    meta_test_mse: Optional[float]

    def to_dict(self) -> dict:
        return {"t": self.t, "c": list(self.c), "phi": None if self.phi is None else list(self.phi),
                "score": self.score, "meta_test_mse": self.meta_test_mse}


@dataclass
class AcquisitionHistory:
    mode: str
    t_init: int
    rounds: List[AcquisitionRound] = field(default_factory=list)
    mse_by_t: dict = field(default_factory=dict)

    def append(self, rnd: AcquisitionRound) -> None:
        expected = self.t_init + len(self.rounds)
        if rnd.t != expected:
            raise ValueError(f"round index {rnd.t} breaks the sequence (expected {expected})")
        self.rounds.append(rnd)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "t_init": self.t_init,
                "rounds": [r.to_dict() for r in self.rounds],
                "mse_by_t": {str(k): v for k, v in sorted(self.mse_by_t.items())}}


@dataclass
class ActiveConfig:
    mode: str = "active"  # "active" | "passive"
    budget: int = 10
    t_init: int = 3
    snr: float = 10 ** 0.6
    n_tr: int = 4
    n_te: int = 4
    n_star_tr: int = 4
    n_star_te: int = 1000
    n_test_frames: int = 100
    beta: float = 150.0
    meta: MetaTrainConfig = field(default_factory=lambda: MetaTrainConfig(
        mode="bayes", B=None, I=2, eta=2e-3, kappa=5e-2, R=100, R_test=100, kl_coeff=1.0,
        I_meta=0, n_tr=4, I_star=2, n_star_tr=4, nu_init_std=None, rho_init=math.log(0.1),
    ))
    meta_iters: Optional[int] = None  # None: one meta-update per available frame
    posterior_data: str = "all"  # "all" | "train": pilots used to re-adapt q_tau for scoring
    n_radius: int = 64
    n_angle: int = 256
    n_refine: int = 50

    def __post_init__(self):
        if self.mode not in ("active", "passive"):
            raise ValueError(f"unknown acquisition mode {self.mode!r}")
        if self.t_init < 1:
            raise ValueError("t_init must be at least 1")
        if self.budget < self.t_init:
            raise ValueError("budget must be at least t_init")


def frame_posteriors(frames: Sequence[FrameDataset], hyper: BayesHyper, cfg: ActiveConfig, model, rng) -> list:
    """Variational posteriors ``q_tau`` of every frame under prior ``hyper``."""
    posts = []
    for f in frames:
        y, x = f.all_pairs() if cfg.posterior_data == "all" else (f.y_train, f.x_train)
        tgt = f.constellation.points[x]
        nu, rho = bayes_adapt_batch(
            model, y[None], tgt[None], hyper.nu, hyper.rho, cfg.meta.eta, cfg.meta.I,
            cfg.meta.R, rng, cfg.meta.kl_coeff,
        )
        posts.append(VariationalParams(nu.data[0].copy(), rho.data[0].copy()))
    return posts


def _default_streams(seed: int) -> Callable:
    from .config import stream

    return lambda tag, idx=0: stream(seed, tag, idx)


def active_loop(
    cfg: ActiveConfig,
    seed: int = 0,
    test_frames: Optional[Sequence[FrameDataset]] = None,
    streams: Optional[Callable] = None,
    on_round: Optional[Callable] = None,
) -> tuple:
    """Run one acquisition run; returns the final prior and the history.

    With ``test_frames`` the meta-test MSE is recorded for every frame count
    ``t = t_init .. budget``. ``on_round(t, hyper, posts, selection)`` is
    called after each active selection.
    """
    streams = streams or _default_streams(seed)
    model = Equalizer(cfg.beta)
    init_rng = streams("initial-frames")
    frames = [
        generate_frame(sample_eq_state(init_rng), cfg.n_tr, cfg.n_te, cfg.snr, init_rng)
        for _ in range(cfg.t_init)
    ]
    hist = AcquisitionHistory(cfg.mode, cfg.t_init)
    hyper = None
    while True:
        t = len(frames)
        mcfg = replace(cfg.meta, I_meta=cfg.meta_iters if cfg.meta_iters is not None else t, seed=seed)
        xi0 = init_hyper("bayes", model, streams("xi-init", t), mcfg)
        hyper, _ = bayes_meta_train(frames, mcfg, model, xi0, rng=streams("meta-train", t))
        test_mse = None
        if test_frames is not None:
            tcfg = replace(mcfg, I=cfg.meta.I, I_star=cfg.meta.I_star, n_tr=min(cfg.n_tr, cfg.n_star_tr))
            preds = meta_test_eval(hyper, test_frames, tcfg, model, rng=streams("meta-test", t))
            test_mse = mse(np.concatenate([p.pred_mean for p in preds]), np.concatenate([p.truth for p in preds]))
            hist.mse_by_t[t] = test_mse
        if t >= cfg.budget:
            break
        phi = sel_score = None
        if cfg.mode == "active":
            posts = frame_posteriors(frames, hyper, cfg, model, streams("posteriors", t))
            sel = select_next_param(posts, cfg.n_radius, cfg.n_angle, cfg.n_refine)
            phi, sel_score = tuple(float(a) for a in sel.phi), sel.score
            if on_round is not None:
                on_round(t, hyper, posts, sel)
            state = invert_channel_equalizer(sel.phi)
        else:
            state = sample_eq_state(streams("passive-channel", t))
        hist.append(AcquisitionRound(t, state.c, phi, sel_score, test_mse))
        frames.append(generate_frame(state, cfg.n_tr, cfg.n_te, cfg.snr, streams("acquired-frame", t)))
    return hyper, hist
