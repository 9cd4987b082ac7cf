"""Tests for the pixel metrics against a brute-force per-pixel oracle."""

import numpy as np
import pytest

from sweepseg.errors import DataError, InvalidTargetError, ShapeError
from sweepseg.metrics import (
    ConfusionCounts,
    MetricsReport,
    confusion_counts,
    evaluate_dataset,
    format_report,
    format_report_kv,
    metrics_from_counts,
)


def counts_oracle(pred, gt):
    """Walk every pixel and classify it; no vector tricks."""
    tp = tn = fp = fn = 0
    for p, g in zip(pred.reshape(-1).tolist(), gt.reshape(-1).tolist()):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 1:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def metrics_oracle(tp, tn, fp, fn):
    total = tp + tn + fp + fn
    div = lambda a, b: a / b if b else 1.0
    return (div(tp + tn, total), div(tp, tp + fn), div(tn, tn + fp),
            div(2 * tp, 2 * tp + fp + fn), div(tp, tp + fp + fn))


class TestConfusionCounts:
    def test_perfect_prediction(self):
        gt = np.zeros((4, 4), np.float32)
        gt[1:3, 1:3] = 1
        c = confusion_counts(gt, gt)
        assert (c.tp, c.tn, c.fp, c.fn) == (4, 12, 0, 0)

    def test_inverted_prediction(self):
        gt = (np.arange(16).reshape(4, 4) % 2).astype(np.float32)
        c = confusion_counts(1 - gt, gt)
        assert c.tp == 0 and c.tn == 0 and c.fp + c.fn == 16

    def test_worked_example(self):
        pred = np.array([[1, 1], [0, 0]], np.float32)
        gt = np.array([[1, 0], [0, 0]], np.float32)
        c = confusion_counts(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 0, 2)

    def test_total_always_equals_pixel_count(self):
        rng = np.random.default_rng(211)
        for _ in range(20):
            shape = (int(rng.integers(1, 10)), int(rng.integers(1, 10)))
            pred = (rng.uniform(size=shape) < 0.5).astype(np.float32)
            gt = (rng.uniform(size=shape) < 0.5).astype(np.float32)
            assert confusion_counts(pred, gt).total == pred.size

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            confusion_counts(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_non_binary_rejected(self):
        with pytest.raises(InvalidTargetError):
            confusion_counts(np.full((2, 2), 0.5), np.zeros((2, 2)))
        with pytest.raises(InvalidTargetError):
            confusion_counts(np.zeros((2, 2)), np.full((2, 2), 2.0))


class TestMetricsFromCounts:
    def test_perfect_is_all_ones(self):
        r = metrics_from_counts(ConfusionCounts(tp=5, tn=11, fp=0, fn=0))
        assert r.values() == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_worked_example(self):
        r = metrics_from_counts(ConfusionCounts(tp=1, fp=1, fn=0, tn=2))
        assert r.ac == 0.75
        assert r.se == 1.0
        assert abs(r.sp - 0.666667) < 1e-6
        assert abs(r.di - 0.666667) < 1e-6
        assert r.ja == 0.5

    def test_empty_masks_are_vacuously_perfect(self):
        r = metrics_from_counts(ConfusionCounts(tp=0, tn=9, fp=0, fn=0))
        assert r.values() == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_zero_total_rejected(self):
        with pytest.raises(DataError):
            metrics_from_counts(ConfusionCounts(0, 0, 0, 0))

    def test_matches_oracle_on_random_16x16_pairs(self):
        rng = np.random.default_rng(223)
        for _ in range(1000):
            pred = (rng.uniform(size=(16, 16)) < rng.uniform()).astype(np.float32)
            gt = (rng.uniform(size=(16, 16)) < rng.uniform()).astype(np.float32)
            c = confusion_counts(pred, gt)
            assert (c.tp, c.tn, c.fp, c.fn) == counts_oracle(pred, gt)
            assert metrics_from_counts(c).values() == metrics_oracle(c.tp, c.tn, c.fp, c.fn)

    def test_swap_leaves_ac_di_ja_unchanged(self):
        rng = np.random.default_rng(227)
        for _ in range(50):
            pred = (rng.uniform(size=(8, 8)) < 0.4).astype(np.float32)
            gt = (rng.uniform(size=(8, 8)) < 0.4).astype(np.float32)
            a = metrics_from_counts(confusion_counts(pred, gt))
            b = metrics_from_counts(confusion_counts(gt, pred))
            assert (a.ac, a.di, a.ja) == (b.ac, b.di, b.ja)

    def test_jaccard_dice_identity(self):
        rng = np.random.default_rng(229)
        for _ in range(100):
            pred = (rng.uniform(size=(8, 8)) < 0.5).astype(np.float32)
            gt = (rng.uniform(size=(8, 8)) < 0.5).astype(np.float32)
            r = metrics_from_counts(confusion_counts(pred, gt))
            if r.di < 1.0:
                assert abs(r.ja - r.di / (2.0 - r.di)) < 1e-9
            assert r.ja <= r.di + 1e-12
            assert all(0.0 <= v <= 1.0 for v in r.values())


class TestEvaluateDataset:
    def test_single_pair_macro_equals_micro(self):
        rng = np.random.default_rng(233)
        pred = (rng.uniform(size=(6, 6)) < 0.5).astype(np.float32)
        gt = (rng.uniform(size=(6, 6)) < 0.5).astype(np.float32)
        macro, micro, per = evaluate_dataset([(pred, gt)])
        assert macro == micro == per[0]

    def test_duplicated_pair_invariance(self):
        rng = np.random.default_rng(239)
        pred = (rng.uniform(size=(6, 6)) < 0.5).astype(np.float32)
        gt = (rng.uniform(size=(6, 6)) < 0.5).astype(np.float32)
        single = metrics_from_counts(confusion_counts(pred, gt))
        macro, micro, per = evaluate_dataset([(pred, gt), (pred, gt)])
        assert macro == micro == single
        assert len(per) == 2

    def test_micro_matches_pooled_oracle_for_mixed_sizes(self):
        rng = np.random.default_rng(241)
        pairs = []
        tp = tn = fp = fn = 0
        for shape in [(4, 4), (6, 8)]:
            pred = (rng.uniform(size=shape) < 0.5).astype(np.float32)
            gt = (rng.uniform(size=shape) < 0.5).astype(np.float32)
            pairs.append((pred, gt))
            a, b, c, d = counts_oracle(pred, gt)
            tp, tn, fp, fn = tp + a, tn + b, fp + c, fn + d
        _, micro, _ = evaluate_dataset(pairs)
        assert micro.values() == metrics_oracle(tp, tn, fp, fn)

    def test_empty_list_rejected(self):
        with pytest.raises(DataError):
            evaluate_dataset([])


class TestFormatting:
    def test_published_style_row_renders_verbatim(self):
        report = MetricsReport(ac=0.98, se=0.954, sp=0.94, di=0.96, ja=0.93)
        text = format_report([("Proposed", report)])
        lines = text.splitlines()
        assert lines[0].split() == ["Method", "AC", "SE", "SP", "DI", "JA"]
        assert lines[1].split() == ["Proposed", "0.98", "0.954", "0.94", "0.96", "0.93"]

    def test_all_ones_render_as_1_00(self):
        text = format_report([("x", MetricsReport(1.0, 1.0, 1.0, 1.0, 1.0))])
        assert text.splitlines()[1].split()[1:] == ["1.00"] * 5

    def test_rows_render_in_given_order(self):
        a = MetricsReport(0.5, 0.5, 0.5, 0.5, 0.5)
        b = MetricsReport(0.25, 0.25, 0.25, 0.25, 0.25)
        lines = format_report([("first", a), ("second", b)]).splitlines()
        assert lines[1].startswith("first") and lines[2].startswith("second")

    def test_kv_lines(self):
        r = MetricsReport(ac=0.975, se=1.0, sp=0.5, di=2 / 3, ja=0.5)
        text = format_report_kv([("macro", r)])
        lines = text.splitlines()
        assert lines[0] == "macro.ac=0.975000"
        assert lines[1] == "macro.se=1.000000"
        assert lines[3] == "macro.di=0.666667"
        assert len(lines) == 5
