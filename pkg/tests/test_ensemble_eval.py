import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import report_fixtures as rf
from ctfuse.ensemble_eval import (EnsembleCfg, LogitTable, MetricsReport,
                                  TableMismatchError, compute_report, ensemble,
                                  fairness_gap, grouped_macro_f1, macro_f1,
                                  predict_labels, render_report, save_predictions)
from oracles import grouped_macro_f1_oracle, macro_f1_oracle

GOLDEN = Path(__file__).parent / "golden"


def _table(entries, class_names=None, tag=""):
    return LogitTable(entries={k: np.array(v, dtype=float) for k, v in entries.items()},
                      class_names=class_names or ["c0", "c1"], model_tag=tag)


class TestEnsemble:
    def test_w_one_is_25d(self):
        za = _table({"a": [2.0, -1.0], "b": [0.5, 0.5]})
        zb = _table({"a": [9.0, 9.0], "b": [9.0, 9.0]})
        out = ensemble(za, zb, 1.0)
        for sid in za.entries:
            np.testing.assert_array_equal(out.entries[sid], za.entries[sid])

    def test_midpoint(self):
        za = _table({"s": [2.0, 0.0]})
        zb = _table({"s": [0.0, 2.0]})
        np.testing.assert_array_equal(ensemble(za, zb, 0.5).entries["s"], [1.0, 1.0])

    def test_agreement_idempotent(self):
        za = _table({"s": [1.5, -0.5]})
        out = ensemble(za, _table({"s": [1.5, -0.5]}), 0.5)
        np.testing.assert_array_equal(out.entries["s"], [1.5, -0.5])

    def test_id_mismatch_reports_difference(self):
        za = _table({"a": [0, 0], "b": [0, 0]})
        zb = _table({"a": [0, 0], "c": [0, 0]})
        with pytest.raises(TableMismatchError, match=r"\['b', 'c'\]"):
            ensemble(za, zb, 0.5)

    def test_class_order_mismatch(self):
        za = _table({"a": [0, 0]}, class_names=["x", "y"])
        zb = _table({"a": [0, 0]}, class_names=["y", "x"])
        with pytest.raises(TableMismatchError, match="class order"):
            ensemble(za, zb, 0.5)

    def test_cfg_validates_weight(self):
        with pytest.raises(ValueError):
            EnsembleCfg(w=1.5)

    def test_probability_space_mode(self):
        za = _table({"s": [10.0, 0.0]})
        zb = _table({"s": [0.0, 10.0]})
        out = ensemble(za, zb, 0.5, probability_space=True)
        np.testing.assert_allclose(out.entries["s"].sum(), 1.0)


class TestPredictLabels:
    def test_argmax(self):
        assert predict_labels(_table({"s": [3, 1, 2, 0]},
                                     class_names=list("abcd")))["s"] == 0

    def test_tie_breaks_low_index(self):
        assert predict_labels(_table({"s": [1, 1, 0, 0]},
                                     class_names=list("abcd")))["s"] == 0

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        entries = {f"s{i}": rng.normal(size=3) for i in range(10)}
        t1 = _table(entries, class_names=list("abc"))
        t2 = _table({k: v + 5.0 for k, v in entries.items()}, class_names=list("abc"))
        assert predict_labels(t1) == predict_labels(t2)


class TestMacroF1:
    def test_perfect(self):
        assert macro_f1([0, 1, 1, 0, 2], [0, 1, 1, 0, 2], 3) == 1.0

    def test_hand_confusion(self):
        assert math.isclose(macro_f1([0, 0, 1, 1], [0, 1, 0, 1], 2), 0.5)

    def test_total_miss(self):
        assert macro_f1([0, 0, 0], [1, 1, 1], 2) == 0.0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            b = int(rng.integers(1, 21))
            c = int(rng.integers(2, 6))
            preds = rng.integers(0, c, b).tolist()
            labels = rng.integers(0, c, b).tolist()
            assert abs(macro_f1(preds, labels, c)
                       - macro_f1_oracle(preds, labels, c)) < 1e-12

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            macro_f1([0, 1], [0, 5], 2)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2)),
                    min_size=1, max_size=30),
           st.randoms())
    @settings(max_examples=60)
    def test_permutation_invariance(self, rows, rnd):
        preds, labels, groups = zip(*rows)
        base = macro_f1(list(preds), list(labels), 4)
        perm = list(range(len(rows)))
        rnd.shuffle(perm)
        shuffled = macro_f1([preds[i] for i in perm], [labels[i] for i in perm], 4)
        assert abs(base - shuffled) < 1e-12


class TestGroupedMacroF1:
    def test_single_group_reduces(self):
        preds, labels = [0, 1, 0, 1], [0, 1, 1, 1]
        per_group, mean = grouped_macro_f1(preds, labels, ["g"] * 4, 2)
        assert math.isclose(mean, macro_f1(preds, labels, 2))

    def test_two_groups_hand_values(self):
        preds = [0, 0, 1, 1, 0, 1]
        labels = [0, 1, 0, 1, 0, 1]
        groups = ["a", "a", "a", "a", "b", "b"]
        per_group, mean = grouped_macro_f1(preds, labels, groups, 2)
        assert math.isclose(per_group["a"], 0.5)
        assert math.isclose(per_group["b"], 1.0)
        assert math.isclose(mean, 0.75)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            b = int(rng.integers(2, 21))
            c = int(rng.integers(2, 6))
            preds = rng.integers(0, c, b).tolist()
            labels = rng.integers(0, c, b).tolist()
            groups = rng.integers(0, 3, b).tolist()
            got_pg, got_mean = grouped_macro_f1(preds, labels, groups, c)
            exp_pg, exp_mean = grouped_macro_f1_oracle(preds, labels, groups, c)
            assert abs(got_mean - exp_mean) < 1e-12
            for g in exp_pg:
                assert abs(got_pg[g] - exp_pg[g]) < 1e-12

    def test_group_mean_within_bounds(self):
        rng = np.random.default_rng(3)
        preds = rng.integers(0, 2, 30).tolist()
        labels = rng.integers(0, 2, 30).tolist()
        groups = rng.integers(0, 4, 30).tolist()
        per_group, mean = grouped_macro_f1(preds, labels, groups, 2)
        assert min(per_group.values()) - 1e-12 <= mean <= max(per_group.values()) + 1e-12

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            grouped_macro_f1([], [], [], 2)


class TestFairnessGap:
    def test_published_values(self):
        assert math.isclose(fairness_gap({"Female": 0.6104, "Male": 0.7249}), 0.1145)

    def test_equal_is_zero(self):
        assert fairness_gap({"female": 0.5, "male": 0.5}) == 0.0

    def test_ens07_row(self):
        assert math.isclose(fairness_gap({"Female": 0.709, "Male": 0.557}), 0.152)

    def test_missing_group(self):
        with pytest.raises(ValueError, match="male"):
            fairness_gap({"female": 0.5})


class TestLogitTableIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        table = _table({f"s{i}": rng.normal(size=2) for i in range(5)}, tag="m")
        table.save(tmp_path / "t.logits")
        back = LogitTable.load(tmp_path / "t.logits", model_tag="m")
        assert back.class_names == table.class_names
        for sid in table.entries:
            np.testing.assert_array_equal(back.entries[sid], table.entries[sid])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            _table({"s": [np.inf, 0.0]})

    def test_prediction_file(self, tmp_path):
        save_predictions({"b": 1, "a": 0}, tmp_path / "p.csv")
        assert (tmp_path / "p.csv").read_text() == \
            "scan_id,predicted_label\na,0\nb,1\n"


class TestReports:
    def test_compute_report_consistency(self):
        rng = np.random.default_rng(5)
        preds = rng.integers(0, 3, 40).tolist()
        labels = rng.integers(0, 3, 40).tolist()
        groups = (["f"] * 20) + (["m"] * 20)
        rep = compute_report(preds, labels, groups, 3)
        assert math.isclose(rep.overall_macro_f1, macro_f1(preds, labels, 3))
        assert math.isclose(rep.group_mean_macro_f1,
                            np.mean(list(rep.per_group.values())))
        cm = np.array(rep.confusion_matrix)
        from collections import Counter
        support = Counter(labels)
        for c in range(3):
            assert cm[c].sum() == support[c]

    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        rep = compute_report(rng.integers(0, 2, 20).tolist(),
                             rng.integers(0, 2, 20).tolist(),
                             rng.integers(0, 2, 20).tolist(), 2)
        rep.save(tmp_path / "m.json")
        back = MetricsReport.load(tmp_path / "m.json")
        assert back == rep

    def test_gender_layout_requires_gender_groups(self):
        rep = rf.task1_per_source_fixture()
        with pytest.raises(ValueError, match="female and male"):
            render_report(rep, "task2_gender")

    def test_unknown_layout(self):
        with pytest.raises(ValueError, match="layout"):
            render_report(rf.task1_per_source_fixture(), "nope")


class TestGoldenLayouts:
    def test_table3(self):
        got = render_report(rf.task1_per_source_fixture(), "task1_per_source", 4)
        assert got == (GOLDEN / "table3_task1_per_source.txt").read_text()

    def test_table4(self):
        got = render_report(rf.task2_per_class_fixture(), "task2_per_class", 4)
        assert got == (GOLDEN / "table4_task2_per_class.txt").read_text()

    def test_table8(self):
        got = render_report(rf.task1_method_comparison_fixture(),
                            "task1_per_source", 3)
        assert got == (GOLDEN / "table8_task1_comparison.txt").read_text()

    def test_table9(self):
        got = render_report(rf.task2_gender_fixture(), "task2_gender", 3)
        assert got == (GOLDEN / "table9_task2_gender.txt").read_text()
