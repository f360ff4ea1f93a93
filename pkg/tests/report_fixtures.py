"""Published-value metric fixtures used by the report-rendering golden tests."""

from ctfuse.ensemble_eval import MetricsReport


def _report(per_group, group_mean, per_class=None, class_names=None,
            overall=0.0, accuracy=0.0):
    per_class = per_class or {}
    return MetricsReport(
        overall_macro_f1=overall, accuracy=accuracy, per_group=per_group,
        group_mean_macro_f1=group_mean, per_class=per_class,
        confusion_matrix=[], class_names=class_names or list(per_class),
    )


def task1_per_source_fixture() -> MetricsReport:
    """Per-source validation F1 of the single 3D model."""
    per_group = {"Source 0": 0.8630, "Source 1": 0.8408,
                 "Source 2": 0.4828, "Source 3": 0.8725}
    return _report(per_group, sum(per_group.values()) / 4, overall=0.7648,
                   accuracy=0.8701)


def task2_per_class_fixture() -> MetricsReport:
    """Class-wise precision/recall/F1 of the single 3D model."""
    per_class = {
        "A": {"precision": 0.6901, "recall": 0.9800, "f1": 0.8099},
        "G": {"precision": 0.7500, "recall": 0.1200, "f1": 0.2069},
        "COVID": {"precision": 0.8462, "recall": 0.8250, "f1": 0.8354},
        "Normal": {"precision": 0.8293, "recall": 0.8500, "f1": 0.8395},
    }
    return _report({"all": 0.6677}, 0.6677, per_class=per_class, overall=0.6677,
                   accuracy=0.7677)


def task1_method_comparison_fixture() -> dict[str, MetricsReport]:
    """Test-set per-hospital F1 for both branches and three ensemble weights."""
    rows = {
        "2.5D": (0.741, [0.910, 0.691, 0.493, 0.869]),
        "3D": (0.699, [0.825, 0.608, 0.495, 0.868]),
        "Ens (0.3)": (0.739, [0.895, 0.673, 0.496, 0.892]),
        "Ens (0.5)": (0.751, [0.914, 0.712, 0.495, 0.883]),
        "Ens (0.7)": (0.744, [0.912, 0.696, 0.495, 0.873]),
    }
    hospitals = ["H_1", "H_2", "H_3", "H_4"]
    return {tag: _report(dict(zip(hospitals, vals)), avg, overall=avg)
            for tag, (avg, vals) in rows.items()}


def task2_gender_fixture() -> dict[str, MetricsReport]:
    """Test-set gender-split F1 for both branches and three ensemble weights."""
    rows = {
        "2.5D": (0.555, 0.709, 0.402),
        "3D": (0.572, 0.756, 0.388),
        "Ens (0.3)": (0.568, 0.732, 0.403),
        "Ens (0.5)": (0.561, 0.718, 0.403),
        "Ens (0.7)": (0.633, 0.709, 0.557),
    }
    return {tag: _report({"Female": f, "Male": m}, avg, overall=avg)
            for tag, (avg, f, m) in rows.items()}
