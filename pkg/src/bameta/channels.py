"""Constellations, channel states and frame generation.

Complex baseband values are carried as real pairs ``(..., 2)`` everywhere: the
last axis is (in-phase, quadrature). Symbols inside a frame are stored as
constellation indices so that demodulation labels and equalization targets use
the same container.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

QAM16 = "QAM16"
PAM4 = "PAM4"

DEMOD_DELTA_MAX_DEG = 15.0
DEMOD_EPS_MAX = 0.15


@dataclass(frozen=True)
class Constellation:
    kind: str
    points: np.ndarray  # (M, 2) for QAM16, (M,) for PAM4

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def energy(self) -> float:
        pts = np.asarray(self.points)
        return float(np.mean(np.sum(pts.reshape(len(pts), -1) ** 2, axis=1)))


def qam16() -> Constellation:
    levels = np.array([-3.0, -1.0, 1.0, 3.0])
    pts = np.array([(i, q) for i in levels for q in levels]) / math.sqrt(10.0)
    return Constellation(QAM16, pts)


def pam4() -> Constellation:
    return Constellation(PAM4, np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(5.0))


CONSTELLATIONS = {QAM16: qam16(), PAM4: pam4()}


def db_to_linear(snr_db: float) -> float:
    return 10.0 ** (snr_db / 10.0)


@dataclass(frozen=True)
class DemodChannelState:
    """Amplitude imbalance, phase imbalance (radians) and fading coefficient."""

    eps: float
    delta: float
    h: tuple  # (re, im)

    kind = QAM16

    def to_dict(self) -> dict:
        return {"eps": self.eps, "delta": self.delta, "h": list(self.h)}

    @classmethod
    def from_dict(cls, d: dict) -> "DemodChannelState":
        return cls(float(d["eps"]), float(d["delta"]), tuple(float(v) for v in d["h"]))


@dataclass(frozen=True)
class EqChannelState:
    c: tuple  # real 2-vector

    kind = PAM4

    def to_dict(self) -> dict:
        return {"c": list(self.c)}

    @classmethod
    def from_dict(cls, d: dict) -> "EqChannelState":
        return cls(tuple(float(v) for v in d["c"]))


ChannelState = Union[DemodChannelState, EqChannelState]


def state_from_dict(d: dict) -> ChannelState:
    return EqChannelState.from_dict(d) if "c" in d else DemodChannelState.from_dict(d)


def sample_demod_state(rng: np.random.Generator) -> DemodChannelState:
    eps = DEMOD_EPS_MAX * rng.beta(5.0, 2.0)
    delta = math.radians(DEMOD_DELTA_MAX_DEG) * rng.beta(5.0, 2.0)
    h = rng.normal(0.0, math.sqrt(0.5), size=2)
    return DemodChannelState(float(eps), float(delta), (float(h[0]), float(h[1])))


def sample_eq_state(rng: np.random.Generator) -> EqChannelState:
    c = rng.normal(0.0, 1.0, size=2)
    return EqChannelState((float(c[0]), float(c[1])))


def apply_iq_imbalance(x: np.ndarray, eps: float, delta: float) -> np.ndarray:
    """Transmitter I/Q imbalance on real-pair symbols ``(..., 2)``."""
    x = np.asarray(x, dtype=np.float64)
    cd, sd = math.cos(delta), math.sin(delta)
    xi, xq = x[..., 0], x[..., 1]
    out = np.empty_like(x)
    out[..., 0] = (1.0 + eps) * (cd * xi - sd * xq)
    out[..., 1] = (1.0 - eps) * (-sd * xi + cd * xq)
    return out


def complex_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    re = a[..., 0] * b[..., 0] - a[..., 1] * b[..., 1]
    im = a[..., 0] * b[..., 1] + a[..., 1] * b[..., 0]
    return np.stack([re, im], axis=-1)


def demod_channel(
    x: np.ndarray,
    state: DemodChannelState,
    snr: float,
    rng: Optional[np.random.Generator] = None,
    noiseless: bool = False,
) -> np.ndarray:
    """``y = h * f_IQ(x) + z`` with ``z ~ CN(0, 1/snr)``."""
    if snr <= 0:
        raise ValueError("snr must be positive (linear scale)")
    y = complex_mul(np.asarray(state.h), apply_iq_imbalance(x, state.eps, state.delta))
    if not noiseless:
        y = y + rng.normal(0.0, math.sqrt(0.5 / snr), size=y.shape)
    return y


def eq_channel(
    x: np.ndarray,
    state: EqChannelState,
    snr: float,
    rng: Optional[np.random.Generator] = None,
    noiseless: bool = False,
) -> np.ndarray:
    """``y = c x + z`` with ``z ~ N(0, I_2 / (2 snr))``; returns ``(..., 2)``."""
    if snr <= 0:
        raise ValueError("snr must be positive (linear scale)")
    x = np.asarray(x, dtype=np.float64)
    y = x[..., None] * np.asarray(state.c)
    if not noiseless:
        y = y + rng.normal(0.0, math.sqrt(0.5 / snr), size=y.shape)
    return y


@dataclass
class FrameDataset:
    """Pilots of one frame, split into an adaptation part and a held-out part."""

    kind: str
    y_train: np.ndarray  # (n_tr, 2)
    x_train: np.ndarray  # (n_tr,) constellation indices
    y_test: np.ndarray
    x_test: np.ndarray
    state: Optional[ChannelState] = None
    snr: float = float("inf")
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.x_train)

    @property
    def n_test(self) -> int:
        return len(self.x_test)

    @property
    def constellation(self) -> Constellation:
        return CONSTELLATIONS[self.kind]

    def targets(self, part: str = "train") -> np.ndarray:
        """Labels as the models consume them: class indices or real PAM amplitudes."""
        idx = self.x_train if part == "train" else self.x_test
        if self.kind == PAM4:
            return self.constellation.points[idx]
        return idx

    def all_pairs(self) -> tuple:
        return (
            np.concatenate([self.y_train, self.y_test]),
            np.concatenate([self.x_train, self.x_test]),
        )

    def resplit(self, rng: np.random.Generator, n_train: Optional[int] = None) -> "FrameDataset":
        """Random disjoint re-division of all pilots into train/test."""
        n_train = self.n_train if n_train is None else n_train
        y, x = self.all_pairs()
        perm = rng.permutation(len(x))
        tr, te = perm[:n_train], perm[n_train:]
        return FrameDataset(self.kind, y[tr], x[tr], y[te], x[te], self.state, self.snr, dict(self.meta))


def generate_frame(
    state: ChannelState,
    n_tr: int,
    n_te: int,
    snr: float,
    rng: np.random.Generator,
    noiseless: bool = False,
    fixed_pilots: bool = False,
) -> FrameDataset:
    """Draw ``n_tr + n_te`` i.i.d. uniform symbols and pass them through the channel.

    The first ``n_tr`` pairs form the training part. ``fixed_pilots`` replaces the
    random training symbols by a cyclic sweep of the constellation (debug aid).
    """
    if n_tr < 0 or n_te < 0:
        raise ValueError("n_tr and n_te must be non-negative")
    const = CONSTELLATIONS[state.kind]
    idx = rng.integers(0, const.size, size=n_tr + n_te)
    if fixed_pilots:
        idx[:n_tr] = np.arange(n_tr) % const.size
    pts = const.points[idx]
    if state.kind == QAM16:
        y = demod_channel(pts, state, snr, rng, noiseless)
    else:
        y = eq_channel(pts, state, snr, rng, noiseless)
    return FrameDataset(
        state.kind, y[:n_tr], idx[:n_tr], y[n_tr:], idx[n_tr:], state, snr
    )


def sample_state(kind: str, rng: np.random.Generator) -> ChannelState:
    return sample_demod_state(rng) if kind == QAM16 else sample_eq_state(rng)


def frame_to_record(frame: FrameDataset) -> dict:
    """One JSON-lines record: ``{state, snr, train: [[y0, y1, x_idx], ...], test: [...]}``."""

    def rows(y, x):
        return [[float(a), float(b), int(i)] for (a, b), i in zip(y, x)]

    return {
        "kind": frame.kind,
        "state": None if frame.state is None else frame.state.to_dict(),
        "snr": frame.snr,
        "train": rows(frame.y_train, frame.x_train),
        "test": rows(frame.y_test, frame.x_test),
    }


def frame_from_record(rec: dict) -> FrameDataset:
    def unpack(rows):
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
        return arr[:, :2].copy(), arr[:, 2].astype(np.int64)

    state = None if rec.get("state") is None else state_from_dict(rec["state"])
    kind = rec.get("kind") or (PAM4 if isinstance(state, EqChannelState) else QAM16)
    ytr, xtr = unpack(rec["train"])
    yte, xte = unpack(rec["test"])
    return FrameDataset(kind, ytr, xtr, yte, xte, state, float(rec["snr"]))
