import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scinets import losses as L
from scinets.autodiff import Tensor, softmax_channels
from scinets.errors import DimensionError, UndefinedObjectiveError

from conftest import gradcheck, leaf


def _case(rng, n=2, c=3, h=4, w=4, sentinel=True):
    logits = rng.normal(size=(n, c, h, w))
    target = rng.integers(0, c, size=(n, h, w))
    if sentinel:
        target[rng.random(target.shape) < 0.2] = -1
    return logits, target


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- loop oracles ------------------------------------------------------------------

def ce_loop(logits, target, mask=None):
    total, count = 0.0, 0
    n, c, h, w = logits.shape
    for b in range(n):
        for i in range(h):
            for j in range(w):
                t = target[b, i, j]
                if t < 0 or (mask is not None and not mask[b, i, j]):
                    continue
                z = logits[b, :, i, j]
                total += -(z[t] - math.log(sum(math.exp(v) for v in z)))
                count += 1
    return total / count


def tversky_loop(probs, target, alpha, beta, smooth):
    n, c, h, w = probs.shape
    tis = []
    for k in range(c):
        tp = fp = fn = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    t = target[b, i, j]
                    if t < 0:
                        continue
                    p = probs[b, k, i, j]
                    y = 1.0 if t == k else 0.0
                    tp += p * y
                    fp += p * (1 - y)
                    fn += (1 - p) * y
        tis.append((tp + smooth) / (tp + alpha * fp + beta * fn + smooth))
    return 1 - sum(tis) / c


def dice_loop(probs, target, smooth):
    n, c = probs.shape[:2]
    ds = []
    for k in range(c):
        keep = target >= 0
        p = probs[:, k][keep]
        t = (target[keep] == k).astype(float)
        ds.append((2 * (p * t).sum() + smooth) / (p.sum() + t.sum() + smooth))
    return 1 - sum(ds) / c


# -- cross entropy -----------------------------------------------------------------

def test_ce_confident_one_hot():
    t = np.array([[[0, 1], [1, 0]]])
    logits = np.zeros((1, 2, 2, 2))
    np.put_along_axis(logits, t[:, None], 10.0, axis=1)
    assert L.cross_entropy(Tensor(logits), t).item() < 1e-3


def test_ce_uniform_is_log_c():
    t = np.zeros((1, 3, 3), dtype=int)
    assert L.cross_entropy(Tensor(np.zeros((1, 4, 3, 3))), t).item() == pytest.approx(math.log(4), abs=1e-12)


def test_ce_matches_loop(rng):
    logits, target = _case(rng, c=2, n=1)
    assert L.cross_entropy(Tensor(logits), target).item() == pytest.approx(ce_loop(logits, target), abs=1e-9)


def test_all_masked_raises(rng):
    logits, target = _case(rng)
    with pytest.raises(UndefinedObjectiveError):
        L.cross_entropy(Tensor(logits), np.full_like(target, -1))
    with pytest.raises(UndefinedObjectiveError):
        L.dice_loss(Tensor(_softmax(logits)), target, np.zeros(target.shape, bool))


def test_label_out_of_range(rng):
    logits, target = _case(rng, c=2, sentinel=False)
    target[0, 0, 0] = 5
    with pytest.raises(DimensionError):
        L.cross_entropy(Tensor(logits), target)


# -- focal -------------------------------------------------------------------------

def test_focal_gamma0_is_ce(rng):
    logits, target = _case(rng)
    a = L.focal_loss(Tensor(logits), target, gamma=0.0).item()
    b = L.cross_entropy(Tensor(logits), target).item()
    assert abs(a - b) < 1e-12


def test_focal_plugin_value():
    # two classes with p_t = 0.9 at the single pixel
    z = math.log(9.0)
    logits = np.array([z, 0.0]).reshape(1, 2, 1, 1)
    got = L.focal_loss(Tensor(logits), np.zeros((1, 1, 1), int), gamma=2.0).item()
    assert got == pytest.approx(0.01 * -math.log(0.9), rel=1e-12)
    assert got == pytest.approx(0.001054, abs=5e-7)


def test_focal_class_weights(rng):
    logits, target = _case(rng, c=2, sentinel=False)
    unweighted = L.focal_loss(Tensor(logits), target, gamma=1.0).item()
    doubled = L.focal_loss(Tensor(logits), target, gamma=1.0, class_weights=[2.0, 2.0]).item()
    assert doubled == pytest.approx(2 * unweighted, rel=1e-12)


# -- dice / tversky ---------------------------------------------------------------

def test_dice_perfect_and_disjoint():
    t = np.zeros((1, 32, 32), dtype=int)
    t[:, :16] = 1
    hot = np.stack([t == 0, t == 1], axis=1).astype(float)
    assert L.dice_loss(Tensor(hot), t, smooth=1e-6).item() < 1e-6
    anti = hot[:, ::-1]
    assert L.dice_loss(Tensor(anti), t, smooth=1e-6).item() > 1 - 1e-6


def test_dice_matches_loop(rng):
    logits, target = _case(rng)
    p = _softmax(logits)
    assert L.dice_loss(Tensor(p), target).item() == pytest.approx(dice_loop(p, target, 1.0), abs=1e-12)


def test_tversky_matches_loop(rng):
    logits, target = _case(rng, n=1, c=2)
    p = _softmax(logits)
    got = L.tversky_loss(Tensor(p), target, alpha=0.3, beta=0.7).item()
    assert got == pytest.approx(tversky_loop(p, target, 0.3, 0.7, 1.0), abs=1e-9)


def test_tversky_half_is_dice(rng):
    for _ in range(10):
        logits, target = _case(rng)
        p = Tensor(_softmax(logits))
        assert abs(L.tversky_loss(p, target, alpha=0.5, beta=0.5, smooth=0.5).item()
                   - L.dice_loss(p, target, smooth=1.0).item()) < 1e-12
        assert abs(L.tversky_loss(p, target, alpha=0.5, beta=0.5, smooth=0.0).item()
                   - L.dice_loss(p, target, smooth=0.0).item()) < 1e-12


def test_tversky_all_false_positive():
    n_fp = 10_000
    t = np.zeros((1, 1, n_fp), dtype=int)
    probs = np.zeros((1, 2, 1, n_fp))
    probs[:, 1] = 1.0
    # class 1: TP=0, FP=n -> TI = 1/(n+1); class 0: TP=0, FN=n with beta 0 -> TI = 1
    got = L.tversky_loss(Tensor(probs), t, alpha=1.0, beta=0.0).item()
    assert got == pytest.approx(1 - (1 + 1 / (n_fp + 1)) / 2, abs=1e-12)


# -- regression losses ---------------------------------------------------------------

def test_mse_and_l1(rng):
    x = rng.normal(size=(2, 1, 3, 3))
    y = rng.normal(size=(2, 1, 3, 3))
    assert L.mse_loss(Tensor(x), y).item() == pytest.approx(np.mean((x - y) ** 2))
    assert L.l1_loss(Tensor(x), y).item() == pytest.approx(np.mean(np.abs(x - y)))


# -- shared properties -----------------------------------------------------------

SEG_LOSSES = [
    ("cross_entropy", {}, False),
    ("focal", {"gamma": 2.0}, False),
    ("focal", {"gamma": 1.5, "class_weights": [0.5, 2.0, 1.0]}, False),
    ("dice", {}, True),
    ("tversky", {"alpha": 0.3, "beta": 0.7}, True),
]


@pytest.mark.parametrize("name,kw,prob", SEG_LOSSES)
def test_masked_pixels_do_not_matter(rng, name, kw, prob):
    logits, target = _case(rng)
    mask = rng.random(target.shape) < 0.6
    fn = L.LOSSES[name]
    f = (lambda z: fn(softmax_channels(Tensor(z)), target, mask, **kw)) if prob else \
        (lambda z: fn(Tensor(z), target, mask, **kw))
    base = f(logits).item()
    moved = logits.copy()
    drop = ~mask | (target < 0)
    moved[np.broadcast_to(drop[:, None], moved.shape)] += 7.0 * rng.normal(size=int(drop.sum()) * 3)
    assert f(moved).item() == pytest.approx(base, abs=1e-12)
    assert base >= 0


@pytest.mark.parametrize("name,kw,prob", SEG_LOSSES)
def test_loss_gradients(rng, name, kw, prob):
    logits, target = _case(rng, n=1, h=3, w=3)
    fn = L.LOSSES[name]
    x = leaf(logits)
    if prob:
        err = gradcheck(lambda ts: fn(softmax_channels(ts[0]), target, **kw), [x])
    else:
        err = gradcheck(lambda ts: fn(ts[0], target, **kw), [x])
    assert err < 1e-5


def test_regression_gradients(rng):
    y = rng.normal(size=(1, 2, 3, 3))
    x = leaf(y + rng.choice([-1, 1], size=y.shape) * rng.uniform(0.1, 1, size=y.shape))
    assert gradcheck(lambda ts: L.mse_loss(ts[0], y), [x]) < 1e-5
    assert gradcheck(lambda ts: L.l1_loss(ts[0], y), [x]) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_focal_never_exceeds_ce(seed):
    rng = np.random.default_rng(seed)
    logits, target = _case(rng, sentinel=False)
    assert L.focal_loss(Tensor(logits), target, gamma=2.0).item() <= \
        L.cross_entropy(Tensor(logits), target).item() + 1e-15


# -- metrics -----------------------------------------------------------------------

def test_f1_cases():
    t = np.array([[0, 1, 1, 0]])
    assert L.f1_score(t, t).macro == 1.0
    assert L.f1_score(1 - t, t, n_classes=2).per_class.tolist() == [0.0, 0.0]
    # TP=8, FP=2, FN=4 for class 1
    target = np.array([1] * 8 + [0] * 2 + [1] * 4)
    pred = np.array([1] * 8 + [1] * 2 + [0] * 4)
    assert L.f1_score(pred, target).per_class[1] == pytest.approx(16 / 22)


def test_f1_absent_class_scores_one():
    t = np.zeros((2, 2), int)
    res = L.f1_score(t, t, n_classes=3)
    assert res.per_class.tolist() == [1.0, 1.0, 1.0]


def test_pearson_cases():
    x = np.arange(10.0)
    assert L.pearson(x, 2 * x + 3) == pytest.approx(1.0)
    assert L.pearson(x, -x) == pytest.approx(-1.0)
    # hand computation: means 3 and 4, sxy=7, sxx=10, syy=10 -> r = 0.7
    assert L.pearson([1, 2, 3, 4, 5], [2, 5, 3, 4, 6]) == pytest.approx(0.7, abs=1e-12)
    with pytest.raises(UndefinedObjectiveError):
        L.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DimensionError):
        L.pearson([1], [1])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 12, elements=st.floats(-1e3, 1e3)))
def test_pearson_bounded(x, y):
    if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
        return
    r = L.pearson(x, y)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-9)
