"""Receivers without meta-knowledge: conventional learning and LMMSE + ML."""
from __future__ import annotations

import numpy as np

from .adaptation import gd_adapt_batch, stack_part
from .channels import CONSTELLATIONS, QAM16, FrameDataset
from .models import ModelParams


def conventional_learn(
    frame: FrameDataset,
    model,
    eta: float,
    n_steps: int,
    rng: np.random.Generator,
) -> ModelParams:
    """GD from a random initialization on the frame's own pilots only."""
    init = model.init_params(rng)
    if frame.n_train == 0:
        return ModelParams(init, getattr(model, "shape", None))
    y, x = stack_part([frame], "train")
    phi = gd_adapt_batch(model, y, x, init, eta, n_steps)
    return ModelParams(phi.data[0].copy(), getattr(model, "shape", None))


def lmmse_channel_estimate(pilot_y: np.ndarray, pilot_x: np.ndarray, snr: float) -> np.ndarray:
    """Scalar LMMSE estimate of ``h`` under a CN(0, 1) prior, as a real pair.

    ``pilot_x`` are nominal symbols as real pairs ``(n, 2)``.
    """
    y = pilot_y[:, 0] + 1j * pilot_y[:, 1]
    x = pilot_x[:, 0] + 1j * pilot_x[:, 1]
    h = np.sum(np.conj(x) * y) / (np.sum(np.abs(x) ** 2) + 1.0 / snr)
    return np.array([h.real, h.imag])


def lmmse_ml_demod(
    pilot_y: np.ndarray,
    pilot_idx: np.ndarray,
    payload_y: np.ndarray,
    snr: float,
) -> tuple:
    """Estimate ``h`` from pilots, then ML-detect the payload ignoring I/Q imbalance.

    Returns ``(hard decisions, confidences, probabilities)``.
    """
    if len(pilot_idx) < 1:
        raise ValueError("at least one pilot is required")
    pts = CONSTELLATIONS[QAM16].points
    h = lmmse_channel_estimate(np.asarray(pilot_y), pts[np.asarray(pilot_idx)], snr)
    hc = h[0] + 1j * h[1]
    cand = hc * (pts[:, 0] + 1j * pts[:, 1])
    yc = payload_y[:, 0] + 1j * payload_y[:, 1]
    loglik = -snr * np.abs(yc[:, None] - cand[None, :]) ** 2
    loglik -= loglik.max(axis=1, keepdims=True)
    probs = np.exp(loglik)
    probs /= probs.sum(axis=1, keepdims=True)
    pred = probs.argmax(axis=1)
    return pred, probs[np.arange(len(pred)), pred], probs
