import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidmil.data import LabelSet
from vidmil.errors import ContractViolation
from vidmil.metrics import (PredictionRecord, attention_exponent, class_metrics, confusion_matrix,
                            encode_attention_frame, evaluate, export_attention, localization_score,
                            write_metrics_table)


def record(vid, pred, gt, k, alpha=None, frame_labels=None):
    alpha = np.full(3, 1 / 3) if alpha is None else np.asarray(alpha)
    probs = LabelSet(frozenset(pred), k).multi_hot() * 0.9 + 0.05
    return PredictionRecord.from_probabilities(vid, probs, alpha, LabelSet(frozenset(gt), k),
                                               frame_labels=frame_labels)


def random_records(seed, n=200, k=5):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        pred = set(np.flatnonzero(r.random(k) < 0.3).tolist())
        gt = set(np.flatnonzero(r.random(k) < 0.3).tolist())
        out.append(record(f"v{i}", pred, gt, k))
    return out


def naive_metrics(records, k):
    rows = []
    for c in range(k):
        tp = fp = fn = tn = 0
        for r in records:
            p, g = c in r.predicted.classes, c in r.ground_truth.classes
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        rows.append({
            "precision": prec,
            "recall": rec,
            "f1": 2 * prec * rec / (prec + rec) if prec + rec else 0.0,
            "specificity": tn / (tn + fp) if tn + fp else 0.0,
            "accuracy": (tp + tn) / len(records),
        })
    return rows


def test_hand_counts():
    m = class_metrics(2, 1, 1, 6)
    assert m.precision == 2 / 3 and m.recall == 2 / 3 and m.specificity == 6 / 7 and m.accuracy == 0.8
    assert m.sensitivity == m.recall and math.isclose(m.f1, 2 / 3)


def test_zero_denominators():
    m = class_metrics(0, 0, 0, 5)
    assert m.precision == m.recall == m.f1 == 0.0 and m.specificity == 1.0


def test_all_correct():
    recs = [record("a", {0}, {0}, 2), record("b", {1}, {1}, 2)]
    table = evaluate(recs)
    assert all(v == 1.0 for v in table.macro.values())


@pytest.mark.parametrize("seed", range(5))
def test_matches_naive_oracle(seed):
    recs = random_records(seed)
    table = evaluate(recs)
    oracle = naive_metrics(recs, 5)
    for got, want in zip(table.per_class, oracle):
        for name, value in want.items():
            assert getattr(got, name) == value
    assert table.macro["f1"] == sum(o["f1"] for o in oracle) / 5


def test_supported_macro_skips_absent_classes():
    recs = [record("a", {0}, {0}, 3), record("b", set(), set(), 3)]
    table = evaluate(recs)
    assert table.macro_supported["recall"] == 1.0
    assert table.macro["recall"] == pytest.approx(1 / 3)


def test_mismatched_class_counts():
    with pytest.raises(ContractViolation):
        evaluate([record("a", {0}, {0}, 2), record("b", {0}, {0}, 3)])


class TestLocalization:
    def fl(self, mask, k=2):
        return [LabelSet(frozenset({0} if m else ()), k) for m in mask]

    def test_one_hot_on_planted_frame(self):
        r = record("a", {0}, {0}, 2, alpha=[0.0, 1.0, 0.0], frame_labels=self.fl([0, 1, 0]))
        score = localization_score([r], k_top=1)
        assert score.argmax_hit_rate == 1.0 and score.topk_hit_rate == 1.0
        assert score.mean_attention_on_positive == 1.0

    def test_uniform_mass_equals_fraction(self):
        mask = [0] * 7 + [1] * 3
        r = record("a", {0}, {0}, 2, alpha=np.full(10, 0.1), frame_labels=self.fl(mask))
        assert localization_score([r]).mean_attention_on_positive == pytest.approx(0.3)

    def test_skips_negative_and_unlabelled(self):
        neg = record("n", set(), set(), 2, frame_labels=self.fl([0, 0, 0]))
        unl = record("u", {0}, {0}, 2)
        score = localization_score([neg, unl])
        assert score.num_videos == 0 and score.skipped == 1


class TestConfusion:
    def test_perfect_single_label(self):
        recs = [record(str(c), {c}, {c}, 3) for c in range(3)]
        assert np.array_equal(confusion_matrix(recs)[:3, :3], np.eye(3, dtype=int))

    def test_no_predictions_go_to_none_column(self):
        recs = [record("a", set(), {0}, 2), record("b", set(), {1}, 2)]
        m = confusion_matrix(recs)
        assert m[:, 2].sum() == 2 and m[:, :2].sum() == 0

    def test_matches_double_loop(self):
        recs = random_records(11, n=100, k=4)
        oracle = np.zeros((5, 5), dtype=int)
        for r in recs:
            for g in (sorted(r.ground_truth.classes) or [4]):
                for p in (sorted(r.predicted.classes) or [4]):
                    oracle[g, p] += 1
        assert np.array_equal(confusion_matrix(recs), oracle)

    def test_normalised_rows(self):
        m = confusion_matrix(random_records(2, n=50, k=3), normalize=True)
        sums = m.sum(axis=1)
        assert np.all((np.abs(sums - 1) < 1e-12) | (sums == 0))


class TestEncoding:
    def test_full_attention_is_near_identity(self):
        assert encode_attention_frame(np.array([0.5]), 1.0)[0] == pytest.approx(0.5 ** 1.0001)
        assert abs(encode_attention_frame(np.array([0.5]), 1.0)[0] - 0.49997) < 1e-5

    def test_low_attention_fades(self):
        assert attention_exponent(0.01) == pytest.approx(100.0001)
        out = encode_attention_frame(np.array([0.9]), 0.01)[0]
        assert out == pytest.approx(0.9 ** 100.0001) and abs(out - 2.66e-5) < 1e-7

    def test_zero_attention_is_capped(self):
        assert encode_attention_frame(np.array([0.9]), 0.0)[0] == 0.9 ** 1e4

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.001, 1.0), st.floats(0.001, 1.0))
    def test_monotone(self, pixel, a, b):
        lo, hi = sorted((a, b))
        x, y = encode_attention_frame(np.array([pixel]), lo)[0], encode_attention_frame(np.array([pixel]), hi)[0]
        assert x <= y and 0 <= x <= 1

    def test_range_checks(self):
        with pytest.raises(ContractViolation):
            encode_attention_frame(np.array([1.2]), 0.5)
        with pytest.raises(ContractViolation):
            attention_exponent(1.5)


def test_metrics_table_files(tmp_path):
    row = {"Precision": 0.5, "Recall": 0.25, "F1-score": 1 / 3, "Specificity": 1.0, "Accuracy": 0.75}
    csv_path, json_path = write_metrics_table({"A": row, "B": row}, tmp_path / "t")
    rows = list(csv.reader(csv_path.open()))
    assert rows[0] == ["Method", "Precision", "Recall", "F1-score", "Specificity", "Accuracy"]
    assert rows[1] == ["A", "0.500", "0.250", "0.333", "1.000", "0.750"]
    assert json.loads(json_path.read_text())["B"]["F1-score"] == 1 / 3


def test_export_attention(tmp_path):
    from PIL import Image

    alpha = np.array([0.1, 0.6, 0.3])
    paths = export_attention(record("vid", {0}, {0}, 2, alpha=alpha), tmp_path)
    saved = json.loads(paths["alpha"].read_text())["alpha"]
    assert abs(sum(saved) - 1) < 1e-6 and len(paths["frames"]) == 3
    brightness = [np.asarray(Image.open(p)).mean() for p in paths["frames"]]
    assert int(np.argmax(brightness)) == 1
    txt = (tmp_path / "vid_alpha.txt").read_text().split()
    assert [float(t) for t in txt] == alpha.tolist()
