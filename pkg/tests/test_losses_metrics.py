import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hcmamba.autodiff import Tensor, softmax
from hcmamba.errors import ContractError, DataError, DimensionError
from hcmamba.losses import (LossWeights, boundary_loss, boundary_points, composite_loss,
                            directed_distances, multiclass_boundary_loss, one_hot,
                            soft_dice_loss, soft_miou_loss)
from hcmamba.metrics import confusion_matrix, evaluate, hd95

masks8 = arrays(np.int64, (8, 8), elements=st.integers(0, 1))


# -- brute-force oracles ----------------------------------------------------

def brute_boundary(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if any(not (0 <= r < h and 0 <= c < w) or not mask[r, c] for r, c in nbrs):
                pts.append((i, j))
    return pts


def brute_directed(src, dst):
    return [min(math.dist(p, q) for q in dst) for p in src]


def brute_boundary_loss(a, b):
    pa, pb = brute_boundary(a), brute_boundary(b)
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return math.hypot(*a.shape)
    d1, d2 = brute_directed(pa, pb), brute_directed(pb, pa)
    return 0.5 * (sum(d1) / len(d1) + sum(d2) / len(d2))


def brute_percentile(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def brute_metrics(pred, gt, k):
    """Per-pixel counting, one class at a time."""
    n = pred.size
    ious, dscs, sens, spes = [], [], [], []
    for c in range(k):
        tp = fp = fn = tn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
            tn += p != c and g != c
        ious.append(tp / (tp + fp + fn) if tp + fp + fn else 1.0)
        dscs.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0)
        sens.append(tp / (tp + fn) if tp + fn else 1.0)
        spes.append(tn / (tn + fp) if tn + fp else 1.0)
    fg = slice(1, None)
    acc = sum(int(p == g) for p, g in zip(pred.ravel(), gt.ravel())) / n
    return dict(miou=np.mean(ious), dsc=np.mean(dscs[fg]), sen=np.mean(sens[fg]),
                spe=np.mean(spes[fg]), acc=acc)


# -- soft losses ------------------------------------------------------------

def test_soft_miou_examples():
    g = one_hot(np.array([[0, 1], [1, 0]]), 2, np.float64)
    assert soft_miou_loss(Tensor(g), g).item() == 0.0
    assert soft_miou_loss(Tensor(1.0 - g), g).item() == pytest.approx(1.0, abs=1e-12)
    single = soft_miou_loss(Tensor(np.array([[0.5, 0.5]])), np.array([[1.0, 0.0]]))
    assert single.item() == pytest.approx(0.75, abs=1e-12)


def test_soft_dice_examples():
    g = one_hot(np.array([[0, 1], [1, 1]]), 2, np.float64)
    assert soft_dice_loss(Tensor(g), g).item() < 1e-6
    assert soft_dice_loss(Tensor(1.0 - g), g).item() == pytest.approx(1.0, abs=1e-6)
    gt = np.ones((10, 1))
    assert soft_dice_loss(Tensor(np.full((10, 1), 0.5)), gt, eps=0.0).item() == pytest.approx(1 / 3)


def test_soft_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        soft_miou_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


@given(arrays(np.float64, (12, 1), elements=st.floats(0, 1)),
       arrays(np.float64, (12, 1), elements=st.floats(0, 1)))
def test_soft_dice_is_2j_over_1_plus_j(p, g):
    if (p + g - p * g).sum() < 1e-6:
        return
    j = 1 - soft_miou_loss(Tensor(p), g).item()
    d = 1 - soft_dice_loss(Tensor(p), g, eps=0.0).item()
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)
    assert d >= j - 1e-12


def test_loss_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(-0.1, 0.5, 0.5)
    with pytest.raises(ContractError):
        LossWeights(0, 0, 0)


# -- boundary ---------------------------------------------------------------

def test_boundary_examples():
    a = np.zeros((8, 8), int)
    a[0, 0] = 1
    b = np.zeros((8, 8), int)
    b[3, 4] = 1
    assert boundary_loss(a, b) == 5.0
    assert boundary_loss(a, a) == 0.0
    assert boundary_loss(np.zeros((8, 8)), b) == pytest.approx(math.hypot(8, 8))
    assert boundary_loss(np.zeros((8, 8)), np.zeros((8, 8))) == 0.0
    with pytest.raises(DimensionError):
        boundary_loss(a, np.zeros((4, 4)))


def test_boundary_points_treat_border_as_background():
    full = np.ones((3, 3), int)
    assert {tuple(p) for p in boundary_points(full)} == {(i, j) for i in range(3) for j in range(3)} - {(1, 1)}


def test_boundary_loss_matches_brute_force_exactly():
    rng = np.random.default_rng(50)
    for _ in range(50):
        a = (rng.uniform(size=(10, 12)) < rng.uniform(0.1, 0.7)).astype(int)
        b = (rng.uniform(size=(10, 12)) < rng.uniform(0.1, 0.7)).astype(int)
        assert sorted(map(tuple, boundary_points(a).tolist())) == brute_boundary(a)
        pa, pb = brute_boundary(a), brute_boundary(b)
        if pa and pb:
            # distances are exact; only the final mean may differ by summation order
            assert directed_distances(np.array(pa), np.array(pb), a.shape).tolist() == brute_directed(pa, pb)
            assert directed_distances(np.array(pb), np.array(pa), a.shape).tolist() == brute_directed(pb, pa)
        assert boundary_loss(a, b) == pytest.approx(brute_boundary_loss(a, b), abs=1e-12)


@given(masks8, masks8)
def test_boundary_loss_symmetric_and_bounded(a, b):
    assert boundary_loss(a, b) == boundary_loss(b, a)
    assert 0.0 <= boundary_loss(a, b) <= math.hypot(8, 8)


# -- composite ------------------------------------------------------------

def test_perfect_prediction_gives_near_zero_loss():
    labels = np.zeros((2, 8, 8), np.int64)
    labels[:, 2:6, 3:7] = 1
    logits = 40.0 * (2 * one_hot(labels, 2, np.float64) - 1)
    assert composite_loss(Tensor(logits), labels).item() < 1e-5


def test_degenerate_weights_reduce_to_one_term(rng):
    logits = Tensor(rng.normal(size=(1, 8, 8, 2)), dtype=np.float64)
    labels = rng.integers(0, 2, size=(1, 8, 8))
    probs = softmax(logits, axis=-1)
    only = composite_loss(logits, labels, LossWeights(1, 0, 0)).item()
    assert only == soft_miou_loss(probs, one_hot(labels, 2, np.float64)).item()


def test_composite_equals_recombined_parts(rng):
    logits = Tensor(rng.normal(size=(1, 8, 8, 2)), dtype=np.float64)
    labels = rng.integers(0, 2, size=(1, 8, 8))
    w = LossWeights(0.4, 0.4, 0.2)
    parts = composite_loss(logits, labels, w, return_parts=True)
    oh = one_hot(labels, 2, np.float64)
    probs = softmax(logits, axis=-1)
    manual = (0.4 * soft_miou_loss(probs, oh).item() + 0.4 * soft_dice_loss(probs, oh).item()
              + 0.2 * multiclass_boundary_loss(logits.data.argmax(-1), labels, 2))
    assert abs(parts.total.item() - manual) < 1e-12


def test_out_of_range_label_names_pixel():
    labels = np.zeros((1, 4, 4), np.int64)
    labels[0, 2, 3] = 5
    with pytest.raises(DataError, match=r"\(0, 2, 3\)"):
        composite_loss(Tensor(np.zeros((1, 4, 4, 2))), labels)


# -- metrics ----------------------------------------------------------------

def test_two_by_two_hand_count():
    pred = np.array([[1, 0], [0, 0]])
    gt = np.array([[1, 1], [0, 0]])
    cm = confusion_matrix(pred, gt, 2)
    assert cm.tolist() == [[2, 0], [1, 1]]
    r = evaluate(pred, gt, 2)
    assert r.dsc == pytest.approx(2 / 3) and r.per_class_iou[1] == 0.5
    assert r.sen == 0.5 and r.spe == 1.0 and r.acc == 0.75
    assert r.miou == pytest.approx((2 / 3 + 1 / 2) / 2)


def test_identical_masks_score_perfectly(rng):
    m = rng.integers(0, 2, size=(3, 16, 16))
    r = evaluate(m, m, 2)
    assert (r.miou, r.dsc, r.acc, r.hd95) == (1.0, 1.0, 1.0, 0.0)


@pytest.mark.parametrize("k", [2, 3])
def test_metrics_match_brute_force_on_random_pairs(k):
    rng = np.random.default_rng(200 + k)
    for _ in range(200):
        pred, gt = rng.integers(0, k, size=(8, 8)), rng.integers(0, k, size=(8, 8))
        r = evaluate(pred, gt, k)
        ref = brute_metrics(pred, gt, k)
        for key, v in ref.items():
            assert getattr(r, key) == pytest.approx(v, abs=1e-12), key


def test_hd95_matches_brute_force(rng):
    for _ in range(30):
        a = (rng.uniform(size=(9, 9)) < 0.4).astype(int)
        b = (rng.uniform(size=(9, 9)) < 0.4).astype(int)
        pa, pb = brute_boundary(a), brute_boundary(b)
        if not pa or not pb:
            continue
        pooled = brute_directed(pa, pb) + brute_directed(pb, pa)
        assert hd95(a, b) == pytest.approx(brute_percentile(pooled, 95), abs=1e-12)
        assert hd95(a, b) <= max(pooled)


def test_hd95_shrinks_as_prediction_grows_toward_truth():
    gt = np.zeros((32, 32), int)
    gt[8:24, 8:24] = 1
    values = []
    for r in range(0, 7, 2):
        pred = np.zeros_like(gt)
        pred[14 - r:18 + r, 14 - r:18 + r] = 1
        values.append(hd95(pred, gt))
    assert values == sorted(values, reverse=True) and values[-1] < values[0]


def test_metric_class_range_error():
    with pytest.raises(DataError):
        evaluate(np.array([[0, 2]]), np.array([[0, 1]]), 2)
