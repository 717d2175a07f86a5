"""Synthetic domain-shifted datasets, CSV persistence and deterministic batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, FormatError, ParameterError

DOMAINS = ("source", "target")
SHIFT_KINDS = ("rotation", "affine", "class_conditional_offset")
GEOMETRIES = ("blobs", "moons")

CIRCLE_RADIUS = 3.0
CLUSTER_STD = 0.4


@dataclass(eq=False)
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    domain_tag: str
    class_count: int

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.domain_tag not in DOMAINS:
            raise ParameterError(f"domain_tag must be one of {DOMAINS}, got {self.domain_tag!r}")
        if self.class_count < 2:
            raise ParameterError(f"class_count must be >= 2, got {self.class_count}")
        n = self.features.shape[0]
        if n < 1:
            raise ParameterError("dataset must contain at least one row")
        if self.labels.shape[0] != n:
            raise ParameterError(f"{n} feature rows but {self.labels.shape[0]} labels")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("feature rows must be finite")
        if np.any(self.labels >= self.class_count) or np.any(self.labels < 0):
            raise ParameterError(f"labels must lie in [0, {self.class_count})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (
            self.domain_tag == other.domain_tag
            and self.class_count == other.class_count
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "rotation"
    magnitude: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ParameterError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        if not math.isfinite(self.magnitude):
            raise ParameterError("shift magnitude must be finite")
        if not (self.noise_std >= 0):
            raise ParameterError("noise_std must be >= 0")


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    domain_tag: str
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.domain_tag != "target" and np.any(self.labels == -1):
            raise ParameterError("sentinel label -1 is only allowed for target batches")

    def __len__(self):
        return self.features.shape[0]


def rotation_matrix(d: int, angle: float) -> np.ndarray:
    """Rotation by `angle` radians in the plane of the first two coordinates."""
    r = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    r[0, 0], r[0, 1], r[1, 0], r[1, 1] = c, -s, s, c
    return r


def _blobs(rng, n_per_class, C, d, std):
    angles = 2.0 * np.pi * np.arange(C) / C
    means = np.zeros((C, d))
    means[:, 0] = CIRCLE_RADIUS * np.cos(angles)
    means[:, 1] = CIRCLE_RADIUS * np.sin(angles)
    labels = np.repeat(np.arange(C), n_per_class)
    feats = means[labels] + std * rng.standard_normal((labels.size, d))
    return feats, labels


def _moons(rng, n_per_class, d, std):
    # interleaved half circles, centred on the origin, scaled to the blob radius
    t = np.pi * rng.uniform(size=(2, n_per_class))
    outer = np.stack([np.cos(t[0]), np.sin(t[0])], axis=1)
    inner = np.stack([1.0 - np.cos(t[1]), 0.5 - np.sin(t[1])], axis=1)
    pts = np.concatenate([outer, inner]) - np.array([0.5, 0.25])
    feats = np.zeros((2 * n_per_class, d))
    feats[:, :2] = CIRCLE_RADIUS * pts
    feats += std * rng.standard_normal(feats.shape)
    labels = np.repeat(np.arange(2), n_per_class)
    return feats, labels


def apply_shift(features: np.ndarray, labels: np.ndarray, spec: ShiftSpec, C: int) -> np.ndarray:
    d = features.shape[1]
    rng = np.random.default_rng([spec.seed, 1])
    if spec.kind == "rotation":
        shifted = features @ rotation_matrix(d, spec.magnitude).T
    elif spec.kind == "affine":
        a = np.eye(d) + spec.magnitude * rng.standard_normal((d, d)) / math.sqrt(d)
        b = spec.magnitude * rng.standard_normal(d)
        shifted = features @ a.T + b
    else:
        dirs = rng.standard_normal((C, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        shifted = features + spec.magnitude * dirs[labels]
    if spec.noise_std > 0:
        shifted = shifted + spec.noise_std * rng.standard_normal(shifted.shape)
    return shifted


def generate_pair(
    spec: ShiftSpec,
    n_per_class: int,
    C: int,
    d: int,
    geometry: str = "blobs",
    cluster_std: float = CLUSTER_STD,
) -> Tuple[DomainDataset, DomainDataset]:
    """Sample a labelled source set and its shifted target counterpart.

    Target rows are the source rows pushed through the shift, so row i of the
    target corresponds to row i of the source. Output depends only on the
    arguments.
    """
    if C < 2 or d < 2 or n_per_class < 1:
        raise ParameterError(f"need C >= 2, d >= 2, n_per_class >= 1 (got C={C}, d={d}, n={n_per_class})")
    if geometry not in GEOMETRIES:
        raise ParameterError(f"unknown geometry {geometry!r}")
    if cluster_std < 0:
        raise ParameterError("cluster_std must be >= 0")
    rng = np.random.default_rng([spec.seed, 0])
    if geometry == "moons":
        if C != 2:
            raise ParameterError("moons geometry has exactly two classes")
        feats, labels = _moons(rng, n_per_class, d, cluster_std)
    else:
        feats, labels = _blobs(rng, n_per_class, C, d, cluster_std)
    source = DomainDataset(feats, labels, "source", C)
    target = DomainDataset(apply_shift(feats, labels, spec, C), labels.copy(), "target", C)
    return source, target


def save_dataset(ds: DomainDataset, path) -> None:
    path = Path(path)
    header = [f"f{j}" for j in range(ds.dim)] + ["label", "domain"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row, label in zip(ds.features.tolist(), ds.labels.tolist()):
            writer.writerow([repr(v) for v in row] + [label, ds.domain_tag])


def load_dataset(path, class_count: Optional[int] = None) -> DomainDataset:
    """Read a dataset CSV. Without `class_count`, C is inferred as max label + 1."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected a header row") from None
        d = len(header) - 2
        expected = [f"f{j}" for j in range(d)] + ["label", "domain"]
        if d < 1 or header != expected:
            raise FormatError(f"{path}: malformed header (row 1): {','.join(header)}")
        feats, labels, tags = [], [], set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise FormatError(f"{path}: row {lineno} has {len(row)} cells, expected {d + 2}")
            try:
                values = [float(v) for v in row[:d]]
                label = int(row[d])
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell in row {lineno}") from None
            if not all(math.isfinite(v) for v in values):
                raise FormatError(f"{path}: non-finite feature in row {lineno}")
            if label < 0 or (class_count is not None and label >= class_count):
                raise FormatError(f"{path}: label {label} out of range in row {lineno}")
            if row[d + 1] not in DOMAINS:
                raise FormatError(f"{path}: unknown domain {row[d + 1]!r} in row {lineno}")
            feats.append(values)
            labels.append(label)
            tags.add(row[d + 1])
    if not feats:
        raise FormatError(f"{path}: no data rows")
    if len(tags) != 1:
        raise FormatError(f"{path}: mixed domain tags {sorted(tags)}")
    C = class_count if class_count is not None else max(2, max(labels) + 1)
    return DomainDataset(np.array(feats), np.array(labels), tags.pop(), C)


def batches(ds: DomainDataset, batch_size: int, seed: int = 0, shuffle: bool = True,
            labels: Optional[np.ndarray] = None) -> List[Batch]:
    """Split `ds` into consecutive batches; every row appears exactly once.

    `labels` overrides the dataset labels, e.g. pseudo-labels with -1 sentinels
    for target rows.
    """
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    order = np.arange(ds.n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(ds.n)
    lab = ds.labels if labels is None else np.asarray(labels, dtype=np.int64)
    out = []
    for start in range(0, ds.n, batch_size):
        idx = order[start:start + batch_size]
        out.append(Batch(ds.features[idx], lab[idx], ds.domain_tag, idx))
    return out


def cycle_batches(ds: DomainDataset, batch_size: int, seed: int, count: int,
                  labels: Optional[np.ndarray] = None) -> Iterator[Batch]:
    """Yield `count` batches, reshuffling with a derived seed each time the data runs out."""
    emitted, lap = 0, 0
    while emitted < count:
        for b in batches(ds, batch_size, seed=seed + 7919 * lap, labels=labels):
            if emitted == count:
                return
            yield b
            emitted += 1
        lap += 1


def check_compatible(source: DomainDataset, target: DomainDataset) -> None:
    if source.dim != target.dim:
        raise ConfigurationError(f"feature dims differ: source {source.dim}, target {target.dim}")
    if source.class_count != target.class_count:
        raise ConfigurationError("source and target disagree on class_count")
