"""Per-label average precision, per-group mAP, sample F1 and accuracy."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from ._io import FORMAT_VERSION, read_json, write_json
from .data import Dataset, LabelPartition

THRESHOLD = 0.5


def average_precision(scores, labels) -> float:
    """Mean of precision@rank over the ranks of the positives.

    Ranking is by descending score; ties keep the original order (earlier
    index ranks higher). Returns NaN without positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = labels[order] == 1
    n_pos = int(hits.sum())
    if n_pos == 0:
        return float("nan")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def sample_f1(score_matrix, label_matrix, threshold: float = THRESHOLD) -> float:
    """Instance-averaged F1 of ``score >= threshold`` predictions.

    An instance with no true and no predicted positives scores 1.
    """
    pred = np.asarray(score_matrix) >= threshold
    true = np.asarray(label_matrix) == 1
    tp = (pred & true).sum(axis=1)
    denom = pred.sum(axis=1) + true.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom == 0, 1.0, 2.0 * tp / denom)
    return float(f1.mean())


def accuracy(score_matrix, label_matrix, threshold: float = THRESHOLD) -> float:
    pred = np.asarray(score_matrix) >= threshold
    return float((pred == (np.asarray(label_matrix) == 1)).mean())


@dataclass
class MetricsReport:
    map_p: float
    map_np: float
    sample_f1_p: float
    sample_f1_np: float
    accuracy_p: float
    accuracy_np: float
    per_label_ap: list  # percent, None for labels without test positives
    delta_map_p: float | None = None
    delta_map_np: float | None = None
    baseline: str | None = None
    excluded_labels: list = field(default_factory=list)
    empty_f1_instances_p: int = 0
    empty_f1_instances_np: int = 0
    threshold: float = THRESHOLD
    test_fingerprint: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**d)

    def with_baseline(self, baseline: "MetricsReport", name: str | None = None) -> "MetricsReport":
        d = asdict(self)
        d.update(delta_map_p=self.map_p - baseline.map_p,
                 delta_map_np=self.map_np - baseline.map_np, baseline=name)
        return MetricsReport(**d)


def save_report(path, report: MetricsReport, config: dict | None = None) -> None:
    doc = report.to_dict()
    if config is not None:
        doc["config"] = config
    write_json(path, doc)


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(read_json(path))


def _group_map(ap: np.ndarray, group) -> float:
    vals = ap[list(group)]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def evaluate(model, dataset: Dataset, partition: LabelPartition,
             baseline: MetricsReport | None = None, baseline_name: str | None = None,
             threshold: float = THRESHOLD) -> MetricsReport:
    """All metrics in percent; labels without test positives are left out of mAP."""
    report = report_from_scores(M.forward(model, dataset.features), dataset.labels, partition,
                                threshold)
    report.test_fingerprint = dataset.fingerprint()
    if baseline is not None:
        report = report.with_baseline(baseline, baseline_name)
    return report


def report_from_scores(scores, labels, partition: LabelPartition,
                       threshold: float = THRESHOLD) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    ap = np.array([average_precision(scores[:, t], Y[:, t]) for t in range(Y.shape[1])])
    excluded = [int(t) for t in np.flatnonzero(np.isnan(ap))]
    if excluded:
        warnings.warn(f"labels {excluded} have no positives in the evaluation split; "
                      "left out of mAP", RuntimeWarning, stacklevel=3)
    P, NP = list(partition.privileged), list(partition.non_privileged)

    def empties(cols):
        return int(((scores[:, cols] < threshold).all(axis=1) & (Y[:, cols] == 0).all(axis=1)).sum())

    report = MetricsReport(
        map_p=100.0 * _group_map(ap, P),
        map_np=100.0 * _group_map(ap, NP),
        sample_f1_p=100.0 * sample_f1(scores[:, P], Y[:, P], threshold),
        sample_f1_np=100.0 * sample_f1(scores[:, NP], Y[:, NP], threshold),
        accuracy_p=100.0 * accuracy(scores[:, P], Y[:, P], threshold),
        accuracy_np=100.0 * accuracy(scores[:, NP], Y[:, NP], threshold),
        per_label_ap=[None if np.isnan(a) else 100.0 * float(a) for a in ap],
        excluded_labels=excluded,
        empty_f1_instances_p=empties(P),
        empty_f1_instances_np=empties(NP),
        threshold=threshold,
    )
    return report


COLUMNS = [
    ("mAP P", "map_p"), ("mAP NP", "map_np"),
    ("F1 P", "sample_f1_p"), ("F1 NP", "sample_f1_np"),
    ("Acc P", "accuracy_p"), ("Acc NP", "accuracy_np"),
]


def render_table(rows: list[tuple[str, dict]], std: dict[str, dict] | None = None) -> str:
    """Plain-text table; ``rows`` are (name, metric dict) with optional delta keys.

    The best value in each metric column is marked with ``*``.
    """
    std = std or {}
    best = {}
    for _, key in COLUMNS + [("", "delta_map_p"), ("", "delta_map_np")]:
        vals = [r[key] for _, r in rows if r.get(key) is not None]
        best[key] = max(vals) if vals else None

    def cell(name, r, key):
        v = r.get(key)
        if v is None:
            return "-"
        s = f"{v:+.2f}" if key.startswith("delta") else f"{v:.2f}"
        if name in std and key in std[name]:
            s += f"±{std[name][key]:.2f}"
        if len(rows) > 1 and best[key] is not None and v == best[key]:
            s += "*"
        return s

    header = ["Method"] + [c for c, _ in COLUMNS] + ["dmAP P", "dmAP NP"]
    keys = [k for _, k in COLUMNS] + ["delta_map_p", "delta_map_np"]
    body = [[name] + [cell(name, r, k) for k in keys] for name, r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    fmt = lambda line: "  ".join(
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
    sep = "-" * len(fmt(header))
    return "\n".join([fmt(header), sep] + [fmt(line) for line in body]) + "\n"
