"""Symbol error rate, MSE and calibration (reliability bins, ECE)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def ser(preds, truth) -> float:
    preds, truth = np.asarray(preds), np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError("preds and truth must have the same length")
    if preds.size == 0:
        raise ValueError("SER of an empty set is undefined")
    return float(np.mean(preds != truth))


def mse(pred_means, truth) -> float:
    p, t = np.asarray(pred_means, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("pred_means and truth must have the same length")
    return float(np.mean((p - t) ** 2))


@dataclass
class CalibrationReport:
    M: int
    bin_counts: np.ndarray
    bin_acc: np.ndarray  # 0 for empty bins
    bin_conf: np.ndarray
    ece: float
    n: int

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.M + 1) / self.M

    @property
    def frequency(self) -> np.ndarray:
        return self.bin_counts / max(self.n, 1)

    def overconfident_bins(self) -> np.ndarray:
        """Mask of populated bins where confidence exceeds accuracy."""
        return (self.bin_counts > 0) & (self.bin_conf > self.bin_acc)


def bin_index(confidences, M: int) -> np.ndarray:
    """0-based bin of each confidence; bins are ``((m-1)/M, m/M]``, 0 goes to the first."""
    edges = np.arange(1, M + 1) / M
    return np.searchsorted(edges, np.asarray(confidences, dtype=np.float64), side="left")


def calibration_report(confidences, correct, M: int = 10) -> CalibrationReport:
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if M < 1:
        raise ValueError("M must be at least 1")
    if conf.shape != ok.shape:
        raise ValueError("confidences and correct flags must have the same length")
    if np.any(conf < 0.0) or np.any(conf > 1.0) or np.any(np.isnan(conf)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(conf, M)
    counts = np.bincount(idx, minlength=M).astype(np.int64)
    acc_sum = np.bincount(idx, weights=ok, minlength=M)
    conf_sum = np.bincount(idx, weights=conf, minlength=M)
    safe = np.maximum(counts, 1)
    acc = np.where(counts > 0, acc_sum / safe, 0.0)
    cf = np.where(counts > 0, conf_sum / safe, 0.0)
    n = int(conf.size)
    ece = float(np.sum(counts * np.abs(acc - cf)) / n) if n else 0.0
    return CalibrationReport(M, counts, acc, cf, ece, n)
