"""Mask-aware segmentation/regression losses and evaluation metrics.

Losses are composed from :mod:`scinets.autodiff` primitives, so they are
differentiable end to end. Every loss takes an integer label map (``-1``
marks unlabeled pixels, which are always excluded) and an optional boolean
pixel mask; only pixels that are labeled *and* inside the mask contribute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, UndefinedObjectiveError

UNLABELED = -1


def _included(target, mask):
    target = np.asarray(target)
    keep = target >= 0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != target.shape:
            raise DimensionError(f"mask shape {mask.shape} != label shape {target.shape}")
        keep &= mask
    if not keep.any():
        raise UndefinedObjectiveError("no labeled pixels left after masking; objective undefined")
    return keep


def _onehot(x, target, keep):
    """Float one-hot of ``target`` over the channel axis, zeroed at excluded pixels."""
    n, c, h, w = x.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise DimensionError(f"labels of shape {target.shape} do not match predictions {x.shape}")
    if target.max() >= c:
        raise DimensionError(f"label {int(target.max())} out of range for {c} classes")
    hot = np.zeros((n, c, h, w), dtype=x.dtype)
    idx = np.where(keep, target, 0)
    np.put_along_axis(hot, idx[:, None], 1.0, axis=1)
    hot *= keep[:, None]
    return hot


def cross_entropy(logits: Tensor, target, mask=None):
    """Mean negative log-likelihood of the true class over included pixels."""
    keep = _included(target, mask)
    hot = _onehot(logits, target, keep)
    logp = ad.log_softmax_channels(logits)
    return ad.mul(ad.tsum(ad.mul(logp, hot)), -1.0 / keep.sum())


def focal_loss(logits: Tensor, target, mask=None, gamma=2.0, class_weights=None):
    """Mean of ``-w_t (1 - p_t)^gamma log p_t`` over included pixels."""
    if gamma < 0:
        raise ValueError("focal gamma must be >= 0")
    keep = _included(target, mask)
    hot = _onehot(logits, target, keep)
    logp = ad.log_softmax_channels(logits)
    logpt = ad.tsum(ad.mul(logp, hot), axis=1)
    term = logpt
    if gamma != 0:
        pt = ad.tsum(ad.mul(ad.exp(logp), hot), axis=1)
        # excluded pixels have pt = 0 here; their term is masked by logpt = 0
        term = ad.mul(ad.power(ad.sub(1.0, pt), gamma), logpt)
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=logits.dtype)
        wmap = np.where(keep, cw[np.where(keep, target, 0)], 0).astype(logits.dtype)
        term = ad.mul(term, wmap)
    return ad.mul(ad.tsum(term), -1.0 / keep.sum())


def _soft_counts(probs, target, mask):
    keep = _included(target, mask)
    hot = _onehot(probs, target, keep)
    m = keep[:, None].astype(probs.dtype)
    pm = ad.mul(probs, m)
    axes = (0, 2, 3)
    inter = ad.tsum(ad.mul(pm, hot), axis=axes)
    psum = ad.tsum(pm, axis=axes)
    tsum = hot.sum(axis=axes)
    return inter, psum, tsum


def dice_loss(probs: Tensor, target, mask=None, smooth=1.0):
    """``1 - mean_c (2 sum(p t) + s) / (sum(p) + sum(t) + s)``."""
    inter, psum, tsum = _soft_counts(probs, target, mask)
    num = ad.add(ad.mul(inter, 2.0), smooth)
    den = ad.add(ad.add(psum, tsum), smooth)
    return ad.sub(1.0, ad.mean(ad.div(num, den)))


def tversky_loss(probs: Tensor, target, mask=None, alpha=0.5, beta=0.5, smooth=1.0):
    """``1 - mean_c TI_c`` with ``TI = (TP + s) / (TP + alpha FP + beta FN + s)``.

    With ``alpha = beta = 0.5`` this equals :func:`dice_loss` evaluated with
    twice the smoothing constant.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("tversky alpha and beta must be >= 0")
    tp, psum, tsum = _soft_counts(probs, target, mask)
    fp = ad.sub(psum, tp)
    fn = ad.sub(tsum, tp)
    den = ad.add(ad.add(ad.add(tp, ad.mul(fp, alpha)), ad.mul(fn, beta)), smooth)
    return ad.sub(1.0, ad.mean(ad.div(ad.add(tp, smooth), den)))


def mse_loss(pred: Tensor, target, mask=None):
    diff = ad.sub(pred, np.asarray(target, dtype=pred.dtype))
    sq = ad.mul(diff, diff)
    if mask is None:
        return ad.mean(sq)
    m = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    if not m.any():
        raise UndefinedObjectiveError("mask excludes every value")
    return ad.mul(ad.tsum(ad.mul(sq, m)), 1.0 / m.sum())


def l1_loss(pred: Tensor, target, mask=None):
    diff = pred.data - np.asarray(target, dtype=pred.dtype)
    sign = np.sign(diff).astype(pred.dtype)
    m = np.ones_like(diff) if mask is None else np.broadcast_to(np.asarray(mask, dtype=pred.dtype), diff.shape)
    if not m.any():
        raise UndefinedObjectiveError("mask excludes every value")
    # |d| = sign(d) * d; sign is piecewise constant so this is exact away from 0
    return ad.mul(ad.tsum(ad.mul(ad.sub(pred, np.asarray(target, dtype=pred.dtype)), sign * m)), 1.0 / m.sum())


# -- metrics (plain numpy) -------------------------------------------------------

@dataclass
class F1Result:
    per_class: np.ndarray
    macro: float


def f1_score(pred, target, mask=None, n_classes=None):
    """Per-class and macro F1 of hard label maps.

    A class absent from both prediction and target scores 1.0.
    """
    pred, target = np.asarray(pred), np.asarray(target)
    keep = target >= 0
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    p, t = pred[keep], target[keep]
    if n_classes is None:
        n_classes = int(max(p.max(initial=0), t.max(initial=0))) + 1
    scores = np.ones(n_classes)
    for c in range(n_classes):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        if tp + fp + fn:
            scores[c] = 2 * tp / (2 * tp + fp + fn)
    return F1Result(scores, float(scores.mean()))


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise DimensionError(f"pearson needs two equal-length samples of size >= 2, got {x.size} and {y.size}")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise UndefinedObjectiveError("pearson correlation undefined for zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


LOSSES = {
    "cross_entropy": cross_entropy,
    "focal": focal_loss,
    "dice": dice_loss,
    "tversky": tversky_loss,
    "mse": mse_loss,
    "l1": l1_loss,
}
PROB_LOSSES = {"dice", "tversky"}
