"""Experiment configuration, per-task defaults and seeded random streams."""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

EXPERIMENTS = (
    "demod_ser_vs_t",
    "demod_ece_vs_t",
    "demod_reliability",
    "eq_scoring_map",
    "eq_active_vs_passive",
)
PROFILES = ("desk", "paper")


def stream(master_seed: int, tag: str, idx: int = 0) -> np.random.Generator:
    """Independent generator for one (stage, index) pair.

    Streams for different tags or indices never share state, so reseeding one
    stage leaves every other stage's draws unchanged.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(zlib.crc32(tag.encode()), int(idx)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class TaskParams:
    """Per-task parameters, named after the usual symbols."""

    snr_db: float
    eta: float
    kappa: float
    n_tr: int
    n_te: int
    n_star_tr: int
    n_star_te: int
    I: int
    I_star: int
    I_meta: Optional[int]  # None: equal to the number of available frames t
    R: int
    beta: Optional[float]
    t_init: Optional[int]
    B: Optional[int]  # None: full batch
    meta_iterations: int
    meta_test_frames: int
    kl_coeff: float
    M_bins: int = 10


DEMOD_DEFAULTS = TaskParams(
    snr_db=18.0, eta=0.1, kappa=1e-3, n_tr=4, n_te=3000, n_star_tr=8, n_star_te=4000,
    I=2, I_star=200, I_meta=200, R=100, beta=None, t_init=None, B=16,
    meta_iterations=200, meta_test_frames=50, kl_coeff=0.1,
)

EQ_DEFAULTS = TaskParams(
    snr_db=6.0, eta=2e-3, kappa=5e-2, n_tr=4, n_te=4, n_star_tr=4, n_star_te=1000,
    I=2, I_star=2, I_meta=None, R=100, beta=150.0, t_init=3, B=None,
    meta_iterations=100, meta_test_frames=100, kl_coeff=1.0,
)


def task_of(experiment: str) -> str:
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    return "demod" if experiment.startswith("demod") else "eq"


@dataclass
class ExperimentConfig:
    experiment: str = "demod_ser_vs_t"
    profile: str = "paper"
    master_seed: int = 0
    seeds: int = 1  # repetitions, seeds master_seed .. master_seed + seeds - 1

    snr_db: float = 18.0
    eta: float = 0.1
    kappa: float = 1e-3
    n_tr: int = 4
    n_te: int = 3000
    n_star_tr: int = 8
    n_star_te: int = 4000
    I: int = 2
    I_star: int = 200
    I_meta: Optional[int] = 200
    R: int = 100
    beta: Optional[float] = None
    t_init: Optional[int] = None
    B: Optional[int] = 16
    kl_coeff: float = 0.1
    M_bins: int = 10
    meta_test_frames: int = 50
    meta_iterations: int = 200

    t_grid: list = field(default_factory=lambda: [2, 4, 8, 16, 32])
    budget: int = 10
    modes: list = field(default_factory=lambda: ["freq", "bayes", "lmmse", "conventional"])

    # compute shortcuts; the paper profile leaves them off
    R_train: Optional[int] = None  # ensemble size during meta-training (None: R)
    n_te_meta: Optional[int] = None  # cap on test symbols per frame in meta-updates
    meta_optimizer: str = "sgd"
    nu_init_std: Optional[float] = 0.1  # None: the model's own initializer
    rho_init: float = math.log(0.1)
    first_order: bool = False

    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        task_of(self.experiment)
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.seeds < 1:
            raise ValueError("seeds must be at least 1")

    @property
    def task(self) -> str:
        return task_of(self.experiment)

    @property
    def snr(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


# desk-scale shortcuts per task; see the README for what they trade off
_DESK = {
    # 50 plain SGD updates at kappa=1e-3 barely move a 1786-dim xi; Adam with
    # a small training ensemble and a capped query set fits the time budget
    "demod": dict(
        n_star_te=1000, meta_test_frames=10, t_grid=[16], seeds=5,
        I_meta=500, meta_optimizer="adam", kappa=1e-2, R_train=5, n_te_meta=300, nu_init_std=None,
    ),
    # plain SGD at kappa=5e-2 diverges on the equalizer (the meta-gradient
    # carries a factor beta), and t updates per round leave xi near its init
    "eq": dict(
        meta_test_frames=100, seeds=20, budget=10, meta_optimizer="adam", I_meta=100,
    ),
}


def _base(experiment: str) -> dict:
    p = DEMOD_DEFAULTS if task_of(experiment) == "demod" else EQ_DEFAULTS
    d = {f.name: getattr(p, f.name) for f in fields(TaskParams)}
    d.pop("meta_test_frames")
    d.pop("meta_iterations")
    d["meta_test_frames"] = p.meta_test_frames
    d["meta_iterations"] = p.meta_iterations
    if task_of(experiment) == "eq":
        d.update(modes=["active", "passive"], nu_init_std=None, t_grid=list(range(3, 11)))
    if experiment == "demod_reliability":
        d.update(t_grid=[16])
    return d


def make_config(
    experiment: str,
    profile: str = "desk",
    master_seed: int = 0,
    overrides: Optional[dict] = None,
) -> ExperimentConfig:
    """Resolve defaults for an experiment and profile, then apply overrides.

    Overrides are kept in the config so that every output records them.
    """
    d = _base(experiment)
    if profile == "desk":
        d.update(_DESK[task_of(experiment)])
    elif profile != "paper":
        raise ValueError(f"unknown profile {profile!r}")
    overrides = dict(overrides or {})
    d.update(overrides)
    d.update(experiment=experiment, profile=profile, master_seed=master_seed, overrides=overrides)
    return ExperimentConfig.from_dict(d)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    ov = dict(cfg.overrides)
    ov.update(kw)
    return replace(cfg, overrides=ov, **kw)
