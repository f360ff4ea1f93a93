"""Weighted logit ensembling and the evaluation protocol.

Metrics: macro F1 (per-class F1 = 0 when precision + recall = 0), per-group
macro F1 with unweighted group means, gender fairness gap, and report
rendering in the layouts used for per-source, per-class, and per-gender
result tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TableMismatchError(ValueError):
    """Raised when two logit tables disagree on scan ids or class order."""


@dataclass
class LogitTable:
    entries: dict[str, np.ndarray]
    class_names: list[str]
    model_tag: str = ""

    def __post_init__(self):
        c = len(self.class_names)
        for sid, vec in self.entries.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (c,):
                raise ValueError(f"{sid}: logit vector has shape {vec.shape}, expected ({c},)")
            if not np.isfinite(vec).all():
                raise ValueError(f"{sid}: non-finite logits")
            self.entries[sid] = vec

    def save(self, path: Path | str) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            fh.write("scan_id," + ",".join(self.class_names) + "\n")
            for sid in sorted(self.entries):
                vals = ",".join(repr(float(v)) for v in self.entries[sid])
                fh.write(f"{sid},{vals}\n")

    @classmethod
    def load(cls, path: Path | str, model_tag: str = "") -> "LogitTable":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if header[0] != "scan_id":
                raise ValueError(f"{path}: bad logit table header")
            class_names = header[1:]
            entries = {}
            for line in fh:
                parts = line.strip().split(",")
                if not parts or parts == [""]:
                    continue
                entries[parts[0]] = np.array([float(v) for v in parts[1:]])
        return cls(entries=entries, class_names=class_names, model_tag=model_tag)


@dataclass
class EnsembleCfg:
    w: float = 0.5  # weight on the 2.5D model's logits

    def __post_init__(self):
        if not (0.0 <= self.w <= 1.0):
            raise ValueError("w must be in [0, 1]")


def ensemble(
    z_25d: LogitTable, z_3d: LogitTable, w: float, probability_space: bool = False
) -> LogitTable:
    """w * 2.5D + (1 - w) * 3D, entrywise on raw logits.

    `probability_space=True` averages softmax probabilities instead (comparison
    mode; the default follows logit averaging).
    """
    if not (0.0 <= w <= 1.0):
        raise ValueError("w must be in [0, 1]")
    if z_25d.class_names != z_3d.class_names:
        raise TableMismatchError(
            f"class order mismatch: {z_25d.class_names} vs {z_3d.class_names}"
        )
    ids_a, ids_b = set(z_25d.entries), set(z_3d.entries)
    if ids_a != ids_b:
        raise TableMismatchError(f"scan id mismatch, symmetric difference: {sorted(ids_a ^ ids_b)}")

    def _xform(v):
        if not probability_space:
            return v
        e = np.exp(v - v.max())
        return e / e.sum()

    out = {
        sid: w * _xform(z_25d.entries[sid]) + (1.0 - w) * _xform(z_3d.entries[sid])
        for sid in z_25d.entries
    }
    tag = f"ens({w:g})[{z_25d.model_tag}+{z_3d.model_tag}]"
    return LogitTable(entries=out, class_names=list(z_25d.class_names), model_tag=tag)


def predict_labels(table: LogitTable) -> dict[str, int]:
    """Argmax per scan; ties break to the lowest class index."""
    return {sid: int(np.argmax(vec)) for sid, vec in table.entries.items()}


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must align")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if preds.size and (preds.min() < 0 or preds.max() >= n_classes):
        raise ValueError(f"preds must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        cm[t, p] += 1
    return cm


def per_class_prf(cm: np.ndarray) -> list[dict[str, float]]:
    out = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        out.append({"precision": float(precision), "recall": float(recall), "f1": float(f1)})
    return out


def macro_f1(preds, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all n_classes classes."""
    cm = confusion_matrix(preds, labels, n_classes)
    return float(np.mean([d["f1"] for d in per_class_prf(cm)]))


def grouped_macro_f1(preds, labels, groups, n_classes: int):
    """macro_f1 restricted to each group, plus the unweighted group mean."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if len(groups) != len(preds):
        raise ValueError("groups must align with preds")
    uniq = sorted(set(groups.tolist()))
    if not uniq:
        raise ValueError("empty group set")
    per_group = {g: macro_f1(preds[groups == g], labels[groups == g], n_classes) for g in uniq}
    return per_group, float(np.mean(list(per_group.values())))


def fairness_gap(per_group: dict) -> float:
    """|F1_female - F1_male| over a {female, male} group map (case-insensitive keys)."""
    keyed = {str(k).lower(): v for k, v in per_group.items()}
    for want in ("female", "male"):
        if want not in keyed and want[0] not in keyed:
            raise ValueError(f"missing group {want!r}")
    f = keyed.get("female", keyed.get("f"))
    m = keyed.get("male", keyed.get("m"))
    return float(abs(f - m))


@dataclass
class MetricsReport:
    overall_macro_f1: float
    accuracy: float
    per_group: dict[str, float]
    group_mean_macro_f1: float
    per_class: dict[str, dict[str, float]]
    confusion_matrix: list[list[int]]
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "overall_macro_f1": self.overall_macro_f1,
            "accuracy": self.accuracy,
            "per_group": self.per_group,
            "group_mean_macro_f1": self.group_mean_macro_f1,
            "per_class": self.per_class,
            "confusion_matrix": self.confusion_matrix,
            "class_names": self.class_names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def save(self, path: Path | str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: Path | str) -> "MetricsReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def compute_report(preds, labels, groups, n_classes: int, class_names=None) -> MetricsReport:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    cm = confusion_matrix(preds, labels, n_classes)
    prf = per_class_prf(cm)
    if class_names is None:
        class_names = [f"class_{c}" for c in range(n_classes)]
    per_group, group_mean = grouped_macro_f1(preds, labels, groups, n_classes)
    return MetricsReport(
        overall_macro_f1=float(np.mean([d["f1"] for d in prf])),
        accuracy=float((preds == labels).mean()) if len(labels) else 0.0,
        per_group={str(g): v for g, v in per_group.items()},
        group_mean_macro_f1=group_mean,
        per_class={name: prf[c] for c, name in enumerate(class_names)},
        confusion_matrix=cm.tolist(),
        class_names=list(class_names),
    )


LAYOUTS = ("task1_per_source", "task2_per_class", "task2_gender")


def _fmt(v: float, decimals: int) -> str:
    return f"{v:.{decimals}f}"


def _rule(widths) -> str:
    return "-+-".join("-" * w for w in widths)


def _row(cells, widths) -> str:
    return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [_row(rows[0], widths), _rule(widths)]
    lines += [_row(r, widths) for r in rows[1:]]
    return "\n".join(lines) + "\n"


def render_report(metrics, layout: str, decimals: int = 4) -> str:
    """Render one report (or an ordered {method: report} map) as a text table.

    task1_per_source: per-group F1 columns, one row per method (plus Avg when
    comparing methods). task2_per_class: class rows with precision/recall/F1.
    task2_gender: method rows with Avg/Female/Male columns.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    many = isinstance(metrics, dict)
    reports = metrics if many else {"": metrics}
    first = next(iter(reports.values()))

    if layout == "task1_per_source":
        group_keys = list(first.per_group)
        if many:
            rows = [["Method", "Avg"] + group_keys]
            for tag, rep in reports.items():
                rows.append([tag, _fmt(rep.group_mean_macro_f1, decimals)]
                            + [_fmt(rep.per_group[g], decimals) for g in group_keys])
        else:
            rows = [["Source"] + group_keys,
                    ["F1-score"] + [_fmt(first.per_group[g], decimals) for g in group_keys]]
        return _table(rows)

    if layout == "task2_per_class":
        if not first.per_class:
            raise ValueError("task2_per_class layout needs per-class metrics")
        rows = [["Class", "Precision", "Recall", "F1-score"]]
        for name in first.class_names:
            d = first.per_class[name]
            rows.append([name] + [_fmt(d[k], decimals) for k in ("precision", "recall", "f1")])
        return _table(rows)

    # task2_gender
    for rep in reports.values():
        keys = {str(k).lower() for k in rep.per_group}
        if not ({"female", "male"} <= keys or {"f", "m"} <= keys):
            raise ValueError("task2_gender layout needs female and male groups")

    def _g(rep, name):
        keyed = {str(k).lower(): v for k, v in rep.per_group.items()}
        return keyed.get(name, keyed.get(name[0]))

    rows = [["Method", "Avg", "Female", "Male"]]
    for tag, rep in reports.items():
        rows.append([tag or "model",
                     _fmt(rep.group_mean_macro_f1, decimals),
                     _fmt(_g(rep, "female"), decimals),
                     _fmt(_g(rep, "male"), decimals)])
    return _table(rows)


def save_predictions(preds: dict[str, int], path: Path | str) -> None:
    """Submission-style output: `scan_id,predicted_label`."""
    with open(path, "w") as fh:
        fh.write("scan_id,predicted_label\n")
        for sid in sorted(preds):
            fh.write(f"{sid},{preds[sid]}\n")
