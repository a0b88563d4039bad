"""Datasets: IDX/CSV loading, Gaussian blobs, non-IID partitioning, evaluation."""
from __future__ import annotations

import csv
import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CapacityError, ConfigError, DatasetParseError, ShapeError
from .nn import ParamVector, predict

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise ShapeError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        return LabeledDataset(np.concatenate([p.features for p in parts]),
                              np.concatenate([p.labels for p in parts]),
                              parts[0].num_classes)


# ---------------------------------------------------------------- loading

def _read_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise DatasetParseError(f"{what}: file shorter than the IDX magic number", offset=0)
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DatasetParseError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetParseError(f"{what}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise DatasetParseError(
            f"{what}: truncated payload, need {expected} bytes, have {len(raw)}", offset=len(raw))
    if len(raw) > expected:
        raise DatasetParseError(f"{what}: {len(raw) - expected} trailing bytes", offset=expected)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> LabeledDataset:
    images = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, str(images_path))
    labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise DatasetParseError(f"{len(images)} images but {len(labels)} labels", offset=4)
    if len(labels) == 0:
        raise DatasetParseError("IDX file holds no examples", offset=4)
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise DatasetParseError(
            f"label {labels[bad[0]]} >= num_classes {num_classes}", offset=8 + int(bad[0]))
    feats = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledDataset(feats, labels, num_classes)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path, num_classes: Optional[int] = None) -> LabeledDataset:
    """Label in the first column, features after it. A first row that is not
    entirely numeric is treated as a header."""
    text = Path(path).read_text(encoding="utf-8")
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    start = 1 if rows and not all(_is_number(c) for c in rows[0]) else 0
    body = rows[start:]
    if not body:
        raise DatasetParseError(f"{path}: no data rows", row=start + 1)
    width = len(body[0])
    if width < 2:
        raise DatasetParseError(f"{path}: need a label and at least one feature", row=start + 1)
    labels, feats = [], []
    for i, r in enumerate(body, start=start + 1):
        if len(r) != width:
            raise DatasetParseError(f"{path}: expected {width} columns, got {len(r)}", row=i)
        try:
            lab = float(r[0])
            vals = [float(c) for c in r[1:]]
        except ValueError as e:
            raise DatasetParseError(f"{path}: {e}", row=i) from None
        if lab != int(lab) or lab < 0:
            raise DatasetParseError(f"{path}: label {r[0]!r} is not a class index", row=i)
        if num_classes is not None and lab >= num_classes:
            raise DatasetParseError(
                f"{path}: label {int(lab)} >= num_classes {num_classes}", row=i)
        labels.append(int(lab))
        feats.append(vals)
    labels = np.array(labels)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2)
    return LabeledDataset(np.array(feats), labels, num_classes)


class DataFormat(str, enum.Enum):
    IDX = "idx"
    CSV = "csv"


def load_dataset(path, fmt: Union[DataFormat, str], labels_path=None,
                 num_classes: Optional[int] = None) -> LabeledDataset:
    fmt = DataFormat(str(fmt).lower())
    if fmt is DataFormat.IDX:
        if labels_path is None:
            raise ConfigError("IDX data needs a separate labels file")
        return load_idx(path, labels_path, num_classes)
    return load_csv(path, num_classes)


# ---------------------------------------------------------------- synthetic

def blob_means(num_classes: int, dim: int, separation: float, rng: np.random.Generator,
               clusters_per_class: int = 1) -> np.ndarray:
    """Cluster centres at ``separation`` times random unit vectors,
    shape (num_classes, clusters_per_class, dim)."""
    v = rng.standard_normal((num_classes, clusters_per_class, dim))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return separation * v


def sample_blobs(means: np.ndarray, per_class: int, rng: np.random.Generator) -> LabeledDataset:
    num_classes, clusters, dim = means.shape
    labels = np.repeat(np.arange(num_classes), per_class)
    which = rng.integers(0, clusters, size=labels.size)
    feats = means[labels, which] + rng.standard_normal((labels.size, dim))
    return LabeledDataset(feats, labels, num_classes)


def synth_blobs(num_classes: int, dim: int, per_class: int, separation: float,
                rng: np.random.Generator, clusters_per_class: int = 1) -> LabeledDataset:
    if min(num_classes, dim, per_class) <= 0:
        raise ConfigError("synth_blobs needs positive sizes")
    means = blob_means(num_classes, dim, separation, rng, clusters_per_class)
    return sample_blobs(means, per_class, rng)


# ---------------------------------------------------------------- partitioning

class PartitionKind(str, enum.Enum):
    MAJORITY_CLASS = "MajorityClass"
    DIRICHLET = "Dirichlet"
    IID = "IID"


@dataclass(frozen=True)
class PartitionSpec:
    kind: PartitionKind
    per_client_size: int
    num_clients: int
    p_major: float = 0.8
    concentration: float = 0.5
    seed: int = 0
    max_tries: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "kind", PartitionKind(self.kind))
        if self.per_client_size < 1 or self.num_clients < 1:
            raise ConfigError("partition sizes must be positive")
        if self.kind is PartitionKind.MAJORITY_CLASS and not 0 <= self.p_major <= 1:
            raise ConfigError(f"p_major must lie in [0, 1], got {self.p_major}")
        if self.kind is PartitionKind.DIRICHLET and not self.concentration > 0:
            raise ConfigError("Dirichlet concentration must be positive")


def _take(pool: np.ndarray, count: int, rng) -> Tuple[np.ndarray, np.ndarray]:
    chosen = rng.choice(pool.size, size=count, replace=False)
    mask = np.ones(pool.size, dtype=bool)
    mask[chosen] = False
    return pool[chosen], pool[mask]


def _largest_remainder(n: int, props: np.ndarray) -> np.ndarray:
    raw = n * props
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition_indices(labels: np.ndarray, num_classes: int, spec: PartitionSpec,
                      rng: np.random.Generator) -> List[np.ndarray]:
    """Disjoint index sets, one per client, each of exactly ``per_client_size``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = spec.per_client_size, spec.num_clients
    if n * k > len(labels):
        raise CapacityError(f"{k} clients x {n} examples exceeds the {len(labels)} available")

    if spec.kind is PartitionKind.IID:
        perm = rng.permutation(len(labels))
        return [np.sort(perm[i * n:(i + 1) * n]) for i in range(k)]

    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]

    if spec.kind is PartitionKind.MAJORITY_CLASS:
        if spec.p_major < 1.0 / num_classes:
            raise ConfigError(f"p_major must be at least 1/{num_classes}")
        majors = rng.choice(num_classes, size=k, replace=k > num_classes)
        n_major = int(math.floor(spec.p_major * n))
        out = []
        for major in majors:
            if pools[major].size < n_major:
                raise CapacityError(
                    f"class {major} has {pools[major].size} examples left, need {n_major}")
            mine, pools[major] = _take(pools[major], n_major, rng)
            others = [c for c in range(num_classes) if c != major]
            rest = np.concatenate([pools[c] for c in others])
            if rest.size < n - n_major:
                raise CapacityError(f"only {rest.size} non-majority examples left")
            picked, _ = _take(rest, n - n_major, rng)
            for c in others:
                pools[c] = pools[c][~np.isin(pools[c], picked)]
            out.append(np.sort(np.concatenate([mine, picked])))
        return out

    prior = np.bincount(labels, minlength=num_classes) / len(labels)
    out = []
    for _ in range(k):
        avail = np.array([p.size for p in pools])
        for _ in range(spec.max_tries):
            props = rng.dirichlet(spec.concentration * num_classes * prior + 1e-300)
            counts = _largest_remainder(n, props)
            if np.all(counts <= avail):
                break
        else:
            raise CapacityError("Dirichlet allocation kept exhausting a class")
        mine = []
        for c in range(num_classes):
            if counts[c]:
                got, pools[c] = _take(pools[c], int(counts[c]), rng)
                mine.append(got)
        out.append(np.sort(np.concatenate(mine)))
    return out


def partition(data: LabeledDataset, spec: PartitionSpec,
              rng: np.random.Generator) -> List[LabeledDataset]:
    return [data.subset(i) for i in partition_indices(data.labels, data.num_classes, spec, rng)]


# ---------------------------------------------------------------- metrics

def accuracy_scores(pred: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    """(accuracy, macro accuracy over classes present in ``labels``)."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty test set")
    correct = pred == labels
    classes = np.unique(labels)
    per_class = [correct[labels == c].mean() for c in classes]
    return float(correct.mean()), float(np.mean(per_class))


def evaluate(params: ParamVector, test: LabeledDataset) -> Tuple[float, float]:
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return accuracy_scores(predict(params, test.features), test.labels)
