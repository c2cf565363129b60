"""Ensemble aggregation and split-conformal prediction sets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


def ensemble_stats(stack):
    """Per-pixel mean and population std over the leading (model) axis."""
    if isinstance(stack, (list, tuple)):
        shapes = {np.shape(s) for s in stack}
        if len(shapes) != 1:
            raise DimensionError(f"ensemble members disagree in shape: {sorted(shapes)}")
        stack = np.stack(stack)
    stack = np.asarray(stack, dtype=np.float64)
    if stack.shape[0] < 2:
        warnings.warn("ensemble of one model: standard deviation is zero", stacklevel=2)
    # deviations from the first member make identical members give exactly zero std
    dev = stack - stack[0]
    mean = stack[0] + dev.mean(axis=0)
    return mean, dev.std(axis=0)


def threshold_minus_std(mean, std, tau=0.5, foreground=None):
    """Keep pixels whose mean probability minus one std still exceeds ``tau``.

    With ``foreground`` set, ``mean``/``std`` carry a class axis at position 1
    and only that class is thresholded.
    """
    mean, std = np.asarray(mean), np.asarray(std)
    if mean.shape != std.shape:
        raise DimensionError(f"mean {mean.shape} and std {std.shape} differ")
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    if foreground is not None:
        mean, std = mean[:, foreground], std[:, foreground]
    return (mean - std) > tau


@dataclass
class ConformalCalibration:
    alpha: float
    qhat: float
    n_cal: int

    def to_dict(self):
        return {"alpha": self.alpha, "qhat": self.qhat, "n_cal": self.n_cal}


def _pixel_scores(probs, labels, mask=None):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 2:
        p, y = probs, labels.ravel()
        keep = y >= 0 if mask is None else (y >= 0) & np.asarray(mask).ravel()
        return p[keep], y[keep]
    if probs.shape[:1] + probs.shape[2:] != labels.shape:
        raise DimensionError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    keep = labels >= 0
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    p = np.moveaxis(probs, 1, -1)[keep]
    return p, labels[keep]


def min_calibration_size(alpha):
    """Smallest n for which the finite-sample quantile rank fits inside the scores."""
    return max(1, math.ceil(1.0 / alpha - 1.0 - 1e-12))


def conformal_calibrate(probs, labels, alpha, mask=None):
    """Split-conformal threshold on the score ``1 - p(true class)``.

    ``qhat`` is the ``ceil((n + 1)(1 - alpha))``-th smallest calibration score.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    p, y = _pixel_scores(probs, labels, mask)
    n = len(y)
    rank = math.ceil((n + 1) * (1 - alpha) - 1e-9)
    if n < 1 or rank > n:
        raise ConfigError(
            f"{n} calibration pixels are too few for alpha={alpha}; need at least {min_calibration_size(alpha)}"
        )
    scores = 1.0 - p[np.arange(n), y]
    qhat = float(np.partition(scores, rank - 1)[rank - 1])
    return ConformalCalibration(float(alpha), float(np.clip(qhat, 0.0, 1.0)), n)


@dataclass
class PredictionSets:
    sets: np.ndarray
    mean_size: float
    empty: int

    def bitmask(self):
        """Pack per-pixel class membership into one uint8 (class c -> bit c)."""
        c = self.sets.shape[1]
        if c > 8:
            raise ConfigError(f"bitmask export supports at most 8 classes, got {c}")
        weights = (1 << np.arange(c)).astype(np.uint8).reshape(1, c, *([1] * (self.sets.ndim - 2)))
        return (self.sets.astype(np.uint8) * weights).sum(axis=1).astype(np.uint8)


def conformal_predict(probs, cal: ConformalCalibration):
    """Per pixel, every class whose score ``1 - p`` is within ``qhat``."""
    probs = np.asarray(probs, dtype=np.float64)
    sets = (1.0 - probs) <= cal.qhat
    sizes = sets.sum(axis=1)
    return PredictionSets(sets, float(sizes.mean()), int((sizes == 0).sum()))


def coverage(sets, labels, mask=None):
    """Fraction of included pixels whose true class lies in its prediction set."""
    labels = np.asarray(labels)
    keep = labels >= 0 if mask is None else (labels >= 0) & np.asarray(mask, dtype=bool)
    if sets.ndim == 2:
        hit = sets[np.arange(len(labels)), np.where(keep, labels, 0)]
    else:
        hit = np.take_along_axis(sets, np.where(keep, labels, 0)[:, None], axis=1)[:, 0]
    return float(hit[keep].mean())
