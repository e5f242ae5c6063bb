"""Datasets: synthetic long-tail generation, CSV ingestion, frequency
partitioning and train/test splitting.

Features are already-extracted vectors; nothing here decodes images.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from ._io import atomic_write_text


class DataError(ValueError):
    """Raised for malformed or degenerate datasets."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    label_names: tuple[str, ...] = ()

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, copy=True)
        labs = np.asarray(self.labels)
        if feats.ndim != 2 or labs.ndim != 2:
            raise DataError("features and labels must be 2-D")
        if feats.shape[0] != labs.shape[0] or feats.shape[0] < 1:
            raise DataError(
                f"row count mismatch: {feats.shape[0]} feature rows vs {labs.shape[0]} label rows"
            )
        bad = ~np.isfinite(feats)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DataError(f"non-finite feature at row {i}, column {j}")
        bad = (labs != 0) & (labs != 1)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DataError(f"label at row {i}, column {j} is {labs[i, j]!r}, expected 0 or 1")
        labs = labs.astype(np.int8)
        names = tuple(self.label_names) or tuple(f"label_{t}" for t in range(labs.shape[1]))
        if len(names) != labs.shape[1]:
            raise DataError(f"{len(names)} label names for {labs.shape[1]} label columns")
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)
        object.__setattr__(self, "label_names", names)

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.labels[rows], self.label_names)

    def check_nondegenerate(self, what: str = "dataset") -> None:
        """Reject label columns that are all 0 or all 1."""
        pos = self.labels.sum(axis=0)
        for t in np.flatnonzero((pos == 0) | (pos == self.n_instances)):
            kind = "no positives" if pos[t] == 0 else "no negatives"
            raise DataError(f"label column {t} ({self.label_names[t]}) has {kind} in the {what}")

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.label_names == other.label_names
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class LabelPartition:
    privileged: tuple[int, ...]
    non_privileged: tuple[int, ...]
    frequencies: tuple[int, ...]

    def __post_init__(self):
        p, np_ = set(self.privileged), set(self.non_privileged)
        if p & np_:
            raise DataError(f"labels in both groups: {sorted(p & np_)}")
        if p | np_ != set(range(len(self.frequencies))):
            raise DataError("partition does not cover every label exactly once")

    @property
    def n_labels(self) -> int:
        return len(self.frequencies)

    def privileged_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_labels, dtype=bool)
        mask[list(self.privileged)] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "privileged": list(self.privileged),
            "non_privileged": list(self.non_privileged),
            "frequencies": list(self.frequencies),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelPartition":
        return cls(tuple(d["privileged"]), tuple(d["non_privileged"]), tuple(d["frequencies"]))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class SyntheticConfig:
    n_instances: int = 2000
    n_labels: int = 20
    n_features: int = 16
    base_prevalence: float = 0.4
    zipf_exponent: float = 1.0
    sibling_overlap: float = 0.7
    seed: int = 0

    def target_prevalences(self) -> np.ndarray:
        ranks = np.arange(1, self.n_labels + 1, dtype=np.float64)
        return self.base_prevalence * ranks ** (-self.zipf_exponent)

    def to_dict(self) -> dict:
        return asdict(self)


def _tune_bias(margin: np.ndarray, count: int) -> float:
    """Bisect a bias so that ``count`` entries of ``sigmoid(margin + b)`` exceed 1/2."""
    lo, hi = -1e3, 1e3
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.count_nonzero(expit(margin + mid) > 0.5) >= count:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return hi


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Long-tailed multi-label data labelled by hidden per-label linear teachers.

    Label t is positive where ``sigmoid(teacher_t . z + b_t) > 1/2``, with the
    bias bisected so the positive rate matches
    ``base_prevalence * (t + 1) ** -zipf_exponent``. Label t and label T-1-t
    are siblings: the rarer one's teacher is a convex mix of
    ``sibling_overlap`` of the frequent one's teacher and the rest of its own,
    so frequent and rare labels produce confusable scores.
    """
    c = config
    if c.n_instances < 50 or c.n_labels < 6 or c.n_features < 4:
        raise DataError("synthetic config needs n_instances >= 50, n_labels >= 6, n_features >= 4")
    if not 0.0 < c.base_prevalence < 1.0:
        raise DataError("base_prevalence must be in (0, 1)")
    if c.zipf_exponent < 0 or not 0.0 <= c.sibling_overlap <= 1.0:
        raise DataError("zipf_exponent must be >= 0 and sibling_overlap in [0, 1]")

    rng = np.random.default_rng(c.seed)
    N, T, d = c.n_instances, c.n_labels, c.n_features
    z = rng.standard_normal((N, d))
    teachers = rng.standard_normal((T, d))
    for t in range(T // 2):
        s = T - 1 - t
        teachers[s] = c.sibling_overlap * teachers[t] + (1.0 - c.sibling_overlap) * teachers[s]

    labels = np.zeros((N, T), dtype=np.int8)
    for t, p in enumerate(c.target_prevalences()):
        count = min(max(int(round(p * N)), 1), N - 1)
        for _ in range(10):
            margin = z @ teachers[t]
            col = (expit(margin + _tune_bias(margin, count)) > 0.5).astype(np.int8)
            if 0 < col.sum() < N:
                break
            teachers[t] = rng.standard_normal(d)
        else:
            raise DataError(f"label {t}: no non-degenerate column for prevalence {p:.4g} after 10 retries")
        labels[:, t] = col
    return Dataset(z, labels)


def split_dataset(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded random train/test split; the training part must be non-degenerate."""
    N = dataset.n_instances
    n_train = min(max(int(round(spec.train_fraction * N)), 1), N - 1)
    perm = np.random.default_rng(spec.seed).permutation(N)
    train = dataset.subset(np.sort(perm[:n_train]))
    test = dataset.subset(np.sort(perm[n_train:]))
    train.check_nondegenerate("training split")
    return train, test


def partition_by_frequency(dataset: Dataset, fraction: float) -> LabelPartition:
    """The ceil(fraction * T) least frequent labels become privileged.

    Ties on frequency go to the lower label index.
    """
    T = dataset.n_labels
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    n_priv = math.ceil(fraction * T - 1e-9)
    if n_priv < 1:
        raise DataError(f"fraction {fraction} selects no labels out of {T}")
    freq = dataset.labels.sum(axis=0).astype(int)
    order = np.lexsort((np.arange(T), freq))
    priv = tuple(sorted(int(t) for t in order[:n_priv]))
    rest = tuple(sorted(int(t) for t in order[n_priv:]))
    return LabelPartition(priv, rest, tuple(int(f) for f in freq))


def _read_rows(path: Path) -> list[list[str]]:
    """Non-empty CSV rows; row numbers in errors are 1-based file rows."""
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row]


def load_dataset(features_path, labels_path, label_names: Sequence[str] = ()) -> Dataset:
    feat_rows = _read_rows(Path(features_path))
    label_rows = _read_rows(Path(labels_path))
    if len(feat_rows) != len(label_rows):
        raise DataError(
            f"row count mismatch: {len(feat_rows)} feature rows vs {len(label_rows)} label rows"
        )
    if not feat_rows:
        raise DataError("empty dataset")

    def parse(rows, name, conv):
        width = len(rows[0])
        out = []
        for i, row in enumerate(rows):
            if len(row) != width:
                raise DataError(f"{name} row {i + 1} has {len(row)} columns, expected {width}")
            vals = []
            for j, cell in enumerate(row):
                try:
                    vals.append(conv(cell.strip()))
                except ValueError:
                    raise DataError(f"{name} row {i + 1}, column {j + 1}: invalid entry {cell!r}") from None
            out.append(vals)
        return out

    def feature(cell):
        v = float(cell)
        if not math.isfinite(v):
            raise ValueError(cell)
        return v

    def label(cell):
        if cell not in ("0", "1"):
            raise ValueError(cell)
        return int(cell)

    feats = np.array(parse(feat_rows, "feature", feature), dtype=np.float64)
    labs = np.array(parse(label_rows, "label", label), dtype=np.int8)
    ds = Dataset(feats, labs, tuple(label_names))
    ds.check_nondegenerate("dataset")
    return ds


def write_dataset(dataset: Dataset, features_path, labels_path) -> None:
    """Write both CSVs; floats use the shortest round-trip representation."""
    feats = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in dataset.features)
    labs = "".join(",".join(str(int(v)) for v in row) + "\n" for row in dataset.labels)
    atomic_write_text(features_path, feats)
    atomic_write_text(labels_path, labs)
