import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from seedcomplete.autodiff import Tensor, ops
from seedcomplete.autodiff.check import check_gradients
from seedcomplete.losses import (
    LossReport, bce_loss, ce_loss, lovasz_softmax, occupancy_target, scal_loss, sem_loss, ssc_loss,
    ssc_terms,
)
from seedcomplete.metrics import (
    confusion_counts, format_records, format_report, iou_miou, range_crop, range_metrics,
)
from seedcomplete.voxels import INVALID, SceneSpec

from oracles import bce_loop, ce_loop, confusion_loop, iou_loop, lovasz_bruteforce, scal_loop


# -- BCE / CE -----------------------------------------------------------------

def test_bce_half_is_ln2():
    assert float(bce_loss(Tensor(np.full(10, 0.5)), np.arange(10) % 2).data) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    assert float(bce_loss(Tensor(y.copy()), y).data) < 1e-6


def test_bce_matches_loop(rng):
    p = rng.uniform(size=(4, 5))
    y = (rng.uniform(size=(4, 5)) > 0.5).astype(float)
    m = rng.uniform(size=(4, 5)) > 0.3
    assert float(bce_loss(Tensor(p), y, m).data) == pytest.approx(bce_loop(p, y, m), abs=1e-12)


def test_bce_empty_mask_zero_gradient(caplog):
    p = Tensor(np.full(3, 0.3), requires_grad=True)
    loss = bce_loss(p, np.ones(3), np.zeros(3, bool))
    loss.backward()
    assert float(loss.data) == 0 and not p.grad.any()
    assert "empty mask" in caplog.text


def test_ce_uniform_is_ln_k():
    assert float(ce_loss(Tensor(np.zeros((5, 7))), np.arange(7) % 5).data) == pytest.approx(math.log(5), abs=1e-12)


def test_ce_confident():
    labels = np.array([0, 2, 1])
    logits = 40.0 * np.eye(3)[:, labels]
    assert float(ce_loss(Tensor(logits), labels).data) < 1e-12


def test_ce_matches_loop(rng):
    logits = rng.normal(size=(4, 12)) * 3
    labels = rng.integers(0, 4, size=12)
    labels[[2, 7]] = INVALID
    assert float(ce_loss(Tensor(logits), labels).data) == pytest.approx(ce_loop(logits, labels), abs=1e-12)


def test_ce_all_invalid(caplog):
    assert float(ce_loss(Tensor(np.ones((3, 4))), np.full(4, INVALID)).data) == 0
    assert "no valid labels" in caplog.text


def test_ce_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        ce_loss(Tensor(np.zeros((3, 2))), np.array([0, 3]))


# -- Lovasz -------------------------------------------------------------------

def test_lovasz_perfect():
    labels = np.array([0, 1, 1, 2])
    assert float(lovasz_softmax(Tensor(np.eye(3)[:, labels]), labels).data) == 0


@given(st.floats(0, 1))
def test_lovasz_single_entry(q):
    probs = np.array([[1 - q], [q]])
    assert float(lovasz_softmax(Tensor(probs), np.array([1])).data) == pytest.approx(1 - q, abs=1e-12)


def test_lovasz_matches_threshold_integral(rng):
    for _ in range(20):
        probs = rng.dirichlet(np.ones(3), size=8).T
        labels = rng.integers(0, 3, size=8)
        got = float(lovasz_softmax(Tensor(probs), labels).data)
        assert got == pytest.approx(lovasz_bruteforce(probs, labels), abs=1e-12)


def test_lovasz_no_valid():
    assert float(lovasz_softmax(Tensor(np.ones((2, 3)) / 2), np.full(3, INVALID)).data) == 0


def test_lovasz_gradient(rng):
    logits = Tensor(rng.normal(size=(3, 7)), requires_grad=True)
    labels = np.array([0, 1, 2, 2, 1, INVALID, 0])
    res = check_gradients(lambda: lovasz_softmax(ops.softmax(logits, 0), labels), [logits])
    assert res.passed, res


# -- SCAL ---------------------------------------------------------------------

def test_scal_hand_example():
    probs = np.array([[0.2, 0.6], [0.8, 0.4]])
    want = -(math.log(2 / 3) + math.log(0.8) + math.log(0.6))
    assert float(scal_loss(Tensor(probs), np.array([1, 0]), "geo").data) == pytest.approx(want, abs=1e-12)


def test_scal_perfect_is_zero():
    labels = np.array([0, 1, 2, 1, 0])
    probs = np.eye(3)[:, labels]
    assert float(scal_loss(Tensor(probs), labels, "sem").data) == 0
    assert float(scal_loss(Tensor(probs), labels, "geo").data) == 0


@pytest.mark.parametrize("mode", ["sem", "geo"])
def test_scal_matches_loop(rng, mode):
    for _ in range(20):
        probs = rng.dirichlet(np.ones(4), size=9).T
        labels = rng.integers(0, 4, size=9)
        labels[rng.uniform(size=9) < 0.2] = INVALID
        if (labels == INVALID).all():
            continue
        got = float(scal_loss(Tensor(probs), labels, mode).data)
        assert got == pytest.approx(scal_loop(probs, labels, mode), abs=1e-9)


def test_scal_all_empty_geo_skips_undefined_terms():
    # no positives: recall has a zero denominator and is skipped; precision is 0/0.4 and hits the floor
    probs = np.array([[0.7, 0.9], [0.3, 0.1]])
    want = -math.log(1e-12) - math.log((0.7 + 0.9) / 2)
    assert float(scal_loss(Tensor(probs), np.array([0, 0]), "geo").data) == pytest.approx(want, abs=1e-12)


def test_scal_unknown_mode():
    with pytest.raises(ValueError):
        scal_loss(Tensor(np.ones((2, 2)) / 2), np.array([0, 1]), "xyz")


# -- composite losses ---------------------------------------------------------

def test_ssc_is_sum_of_terms(rng):
    logits = rng.normal(size=(4, 3, 3, 2))
    labels = rng.integers(0, 4, size=(3, 3, 2))
    t = ssc_terms(Tensor(logits), labels)
    want = float(t["scal_sem"].data) + float(t["scal_geo"].data) + float(t["ce"].data)
    assert float(ssc_loss(Tensor(logits), labels).data) == pytest.approx(want, abs=1e-12)


def test_ssc_gradient(rng):
    logits = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
    labels = np.array([0, 1, 2, 1, INVALID, 0, 2, 2]).reshape(2, 2, 2)
    res = check_gradients(lambda: ssc_loss(logits, labels), [logits])
    assert res.passed, res


def test_sem_loss_uniform_and_empty():
    labels = np.array([0, 1, 2, 2])
    val = float(sem_loss(Tensor(np.zeros((3, 4))), labels).data)
    lov = float(lovasz_softmax(Tensor(np.full((3, 4), 1 / 3)), labels).data)
    assert val == pytest.approx(math.log(3) + lov, abs=1e-12)
    assert float(sem_loss(Tensor(np.zeros((3, 0))), np.zeros(0, np.uint8)).data) == 0


def test_occupancy_target():
    occ, valid = occupancy_target(np.array([0, 3, INVALID, 1], np.uint8))
    assert occ.tolist() == [0, 1, 0, 1] and valid.tolist() == [True, True, False, True]


def test_loss_report_total():
    r = LossReport(*(Tensor(np.array(v)) for v in (1.0, 2.0, 0.5, 0.25)))
    assert float(r.total.data) == 3.75 and r.values()["total"] == 3.75


# -- metrics ------------------------------------------------------------------

def test_identity_prediction():
    gt = np.array([0, 1, 2, 2, 3])
    m = iou_miou(gt, gt, 4)
    assert m["iou"] == 1 and m["miou"] == 1


def test_half_iou_example():
    gt = np.array([1, 0, 0])
    pred = np.array([1, 1, 0])
    assert iou_miou(pred, gt, 2)["per_class"][1] == 0.5


def test_absent_class_excluded():
    gt = np.array([1, 1, 0])
    m = iou_miou(gt, gt, 5)
    assert np.isnan(m["per_class"][3]) and m["miou"] == 1


def test_invalid_voxels_ignored():
    gt = np.array([1, INVALID, 0])
    pred = np.array([1, 2, 0])
    m = iou_miou(pred, gt, 3)
    assert m["iou"] == 1 and np.isnan(m["per_class"][2])


@given(arrays(np.uint8, (4, 4, 4), elements=st.sampled_from([0, 1, 2, 3, INVALID])),
       arrays(np.uint8, (4, 4, 4), elements=st.integers(0, 3)))
def test_counts_match_loop(gt, pred):
    c = confusion_counts(pred, gt, 4)
    tp, fp, fn = confusion_loop(pred, gt, 4)
    assert c.tp.tolist() == tp and c.fp.tolist() == fp and c.fn.tolist() == fn
    iou, miou, per = iou_loop(pred, gt, 4)
    m = iou_miou(pred, gt, 4)
    np.testing.assert_array_equal(m["per_class"], per)
    assert (m["iou"] == iou or math.isnan(iou)) and (m["miou"] == miou or math.isnan(miou))


@given(st.permutations([1, 2, 3, 4]))
def test_relabel_invariance(perm):
    rng = np.random.default_rng(9)
    gt = rng.integers(0, 5, size=200)
    pred = rng.integers(0, 5, size=200)
    mapping = np.array([0] + list(perm))
    a, b = iou_miou(pred, gt, 5), iou_miou(mapping[pred], mapping[gt], 5)
    assert a["miou"] == pytest.approx(b["miou"], abs=1e-15) and a["iou"] == b["iou"]


def test_range_crop():
    spec = SceneSpec.desk()
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 6, size=spec.dims)
    pred = rng.integers(0, 6, size=spec.dims)
    full = range_metrics(pred, gt, spec, 6, ranges=(spec.extent[1][0],))[spec.extent[1][0]]
    ref = iou_miou(pred, gt, 6)
    assert full["iou"] == ref["iou"] and full["miou"] == ref["miou"]
    slab = range_metrics(pred, gt, spec, 6, ranges=(0.4,))[0.4]
    ref = iou_miou(pred[:1], gt[:1], 6)
    assert slab["iou"] == ref["iou"] and slab["miou"] == ref["miou"]
    assert range_crop(gt, spec, 12.8).shape[0] == 32


def test_report_formats():
    m = iou_miou(np.array([1, 2, 0]), np.array([1, 1, 0]), 3)
    text = format_report(m, {1: "road", 2: "building"}, ranged={12.8: m})
    assert text.splitlines()[:2] == ["road 0.500000", "building 0.000000"]
    assert "IoU@12.8 1.000000" in text
    recs = format_records(m, {1: "road", 2: "building"})
    assert "iou.road=0.500000" in recs and recs.startswith("iou=1.000000\n")
