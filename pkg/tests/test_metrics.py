"""Metric formulas against brute-force pixel-loop oracles and identities."""

import numpy as np
import pytest

from bichange.metrics import (
    Confusion, binary_metrics, binary_report, confusion,
    multiclass_confusions, multiclass_metrics,
)


def loop_confusion(pred, gt):
    """Independent oracle: count the four outcomes pixel by pixel."""
    tp = fp = fn = tn = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, fp, fn, tn)


class TestConfusion:
    def test_perfect_positive(self):
        ones = np.ones((4, 4))
        c = confusion(ones, ones)
        assert (c.tp, c.fp, c.fn, c.tn) == (16, 0, 0, 0)

    def test_total_disagreement(self):
        gt = np.zeros((4, 4)); gt[:2] = 1
        c = confusion(1 - gt, gt)
        assert c.tp == 0 and c.tn == 0 and c.fp == 8 and c.fn == 8

    def test_matches_pixel_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            pred = rng.integers(0, 2, (16, 16))
            gt = rng.integers(0, 2, (16, 16))
            got = confusion(pred, gt)
            want = loop_confusion(pred.astype(bool), gt.astype(bool))
            assert (got.tp, got.fp, got.fn, got.tn) == (want.tp, want.fp, want.fn, want.tn)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            confusion(np.array([[2, 0]]), np.array([[1, 0]]))


class TestBinaryMetrics:
    def test_worked_example(self):
        m = binary_metrics(Confusion(tp=40, fp=10, fn=10, tn=40))
        assert m.precision == pytest.approx(0.8, abs=1e-12)
        assert m.recall == pytest.approx(0.8, abs=1e-12)
        assert m.f1 == pytest.approx(0.8, abs=1e-12)
        assert m.iou == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert m.oa == pytest.approx(0.8, abs=1e-12)
        assert m.expected_agreement == pytest.approx(0.5, abs=1e-12)
        assert m.kappa == pytest.approx(0.6, abs=1e-12)
        assert not m.degenerate

    def test_perfect_prediction_both_classes(self):
        m = binary_metrics(Confusion(tp=9, fp=0, fn=0, tn=7))
        assert m.f1 == m.iou == m.oa == 1.0
        assert m.kappa == pytest.approx(1.0, abs=1e-12)

    def test_all_negative_degenerate(self):
        m = binary_metrics(Confusion(tp=0, fp=0, fn=0, tn=12))
        assert m.oa == 1.0
        assert m.f1 == 0.0 and "f1" in m.degenerate
        assert m.kappa == 0.0 and "kappa" in m.degenerate

    def test_swap_symmetry_for_oa_kappa(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            tp, fp, fn, tn = [int(v) for v in rng.integers(0, 50, 4)]
            if tp + fp + fn + tn == 0:
                continue
            a = binary_metrics(Confusion(tp, fp, fn, tn))
            b = binary_metrics(Confusion(tn, fn, fp, tp))
            assert a.oa == pytest.approx(b.oa, abs=1e-12)
            assert a.kappa == pytest.approx(b.kappa, abs=1e-12)

    def test_f1_iou_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            tp, fp, fn, tn = [int(v) for v in rng.integers(0, 40, 4)]
            c = Confusion(tp, fp, fn, tn)
            if c.total == 0:
                continue
            m = binary_metrics(c)
            if m.degenerate:
                continue
            assert 0.0 <= m.iou <= m.f1 <= 1.0
            assert m.f1 == pytest.approx(2 * m.iou / (1 + m.iou), abs=1e-12)

    def test_constant_prediction_kappa_zero(self):
        gt = np.zeros((8, 8)); gt[:3] = 1
        m = binary_metrics(confusion(np.ones_like(gt), gt))
        assert m.kappa == pytest.approx(0.0, abs=1e-12)

    def test_tile_pooling_associativity(self):
        rng = np.random.default_rng(3)
        pred = rng.integers(0, 2, (8, 16))
        gt = rng.integers(0, 2, (8, 16))
        pooled = confusion(pred[:, :8], gt[:, :8]) + confusion(pred[:, 8:], gt[:, 8:])
        whole = confusion(pred, gt)
        assert (pooled.tp, pooled.fp, pooled.fn, pooled.tn) == \
               (whole.tp, whole.fp, whole.fn, whole.tn)
        a = binary_metrics(pooled)
        b = binary_metrics(whole)
        assert a.f1 == b.f1 and a.kappa == b.kappa


class TestMulticlass:
    IDS = {1: "building", 2: "water", 3: "tree"}

    def test_identical_maps_perfect_f1(self):
        rng = np.random.default_rng(4)
        m1 = rng.integers(0, 4, (16, 16))
        m2 = rng.integers(0, 4, (16, 16))
        report = multiclass_metrics(m1, m2, m1, m2, self.IDS)
        for name, met in report.classes.items():
            assert met.f1 == 1.0 or "f1" in met.degenerate

    def test_single_class_macro_equals_class(self):
        rng = np.random.default_rng(5)
        pred = rng.integers(0, 2, (8, 8))
        gt = rng.integers(0, 2, (8, 8))
        report = multiclass_metrics(pred, pred, gt, gt, {1: "only"})
        assert report.macro_f1 == report.classes["only"].f1
        assert report.macro_kappa == report.classes["only"].kappa

    def test_counts_match_per_class_loop(self):
        rng = np.random.default_rng(6)
        p1, p2, g1, g2 = [rng.integers(0, 4, (16, 16)) for _ in range(4)]
        confs = multiclass_confusions(p1, p2, g1, g2, self.IDS)
        for cid, name in self.IDS.items():
            want = loop_confusion(p1 == cid, g1 == cid)
            want = Confusion(*[a + b for a, b in zip(
                (want.tp, want.fp, want.fn, want.tn),
                (lambda w: (w.tp, w.fp, w.fn, w.tn))(loop_confusion(p2 == cid, g2 == cid)))])
            got = confs[name]
            assert (got.tp, got.fp, got.fn, got.tn) == (want.tp, want.fp, want.fn, want.tn)

    def test_unknown_index_rejected(self):
        bad = np.full((4, 4), 9)
        good = np.zeros((4, 4))
        with pytest.raises(ValueError, match="unknown"):
            multiclass_metrics(bad, good, good, good, self.IDS)

    def test_pooled_aggregate_switch(self):
        rng = np.random.default_rng(7)
        p1, p2, g1, g2 = [rng.integers(0, 4, (12, 12)) for _ in range(4)]
        macro = multiclass_metrics(p1, p2, g1, g2, self.IDS, aggregate="macro")
        pooled = multiclass_metrics(p1, p2, g1, g2, self.IDS, aggregate="pooled")
        assert macro.macro_f1 == pooled.macro_f1  # per-class scores unaffected
        assert macro.macro_oa != pooled.macro_oa or macro.macro_kappa != pooled.macro_kappa

    def test_pooled_perfect_prediction(self):
        rng = np.random.default_rng(8)
        m = rng.integers(0, 4, (10, 10))
        report = multiclass_metrics(m, m, m, m, self.IDS, aggregate="pooled")
        assert report.macro_oa == 1.0


class TestReport:
    def test_text_rendering_two_decimals(self):
        rep = binary_report(Confusion(tp=40, fp=10, fn=10, tn=40))
        text = rep.to_text()
        assert "80.00" in text and "66.67" in text and "0.6000" in text

    def test_dict_round_trip_keys(self):
        rep = binary_report(Confusion(tp=1, fp=2, fn=3, tn=4))
        d = rep.to_dict()
        assert set(d["classes"]["change"]) >= {"f1", "iou", "precision", "recall"}
        assert "macro_kappa" in d
