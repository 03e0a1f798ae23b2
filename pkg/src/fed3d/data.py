"""Synthetic point-set classes and non-IID client partitions."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fed3d.detector import PointSample
from fed3d.encoder import ConfigurationError

log = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "box", "sheet", "cylinder", "torus")
# fractions are compared against ceil() targets with this slack so that
# 0.7 * 10 counts as 7 and not 8
_FRAC_EPS = 1e-9


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 10
    samples_per_class: tuple[int, ...] | int = 60
    n_points: int = 64
    noise: float = 0.3
    seed: int = 0
    prototype_seed: int = 0
    test_fraction: float = 0.2

    def counts(self) -> np.ndarray:
        c = self.samples_per_class
        counts = np.full(self.n_classes, c, dtype=np.int64) if isinstance(c, int) else np.asarray(c, dtype=np.int64)
        if counts.shape != (self.n_classes,):
            raise ConfigurationError(f"{counts.size} class counts for {self.n_classes} classes")
        return counts

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if np.any(self.counts() < 1):
            raise ConfigurationError("every class needs at least one sample")
        if self.noise < 0 or not 0 <= self.test_fraction < 1:
            raise ConfigurationError("noise must be >= 0 and test_fraction in [0, 1)")


@dataclass
class Dataset:
    points: np.ndarray  # (N, n_points, 3)
    labels: np.ndarray  # (N,)
    train_idx: np.ndarray
    test_idx: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, i: int) -> PointSample:
        return PointSample(self.points[i], int(self.labels[i]))

    def samples(self, idx=None) -> list[PointSample]:
        idx = range(len(self)) if idx is None else idx
        return [self.sample(int(i)) for i in idx]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(self.train_idx.astype("<i8").tobytes())
        return h.hexdigest()


def _unit_shape(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    u, v = rng.random(n), rng.random(n)
    if kind == "sphere":
        z = 2 * u - 1
        phi = 2 * np.pi * v
        r = np.sqrt(1 - z * z)
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if kind == "box":
        pts = rng.uniform(-1, 1, (n, 3))
        face = rng.integers(0, 3, n)
        pts[np.arange(n), face] = np.sign(pts[np.arange(n), face])
        return pts
    if kind == "sheet":
        return np.stack([2 * u - 1, 2 * v - 1, 0.1 * np.sin(3 * np.pi * u)], axis=1)
    if kind == "cylinder":
        phi = 2 * np.pi * v
        return np.stack([np.cos(phi), np.sin(phi), 2 * u - 1], axis=1)
    if kind == "torus":
        a, b = 2 * np.pi * u, 2 * np.pi * v
        return np.stack([(0.7 + 0.3 * np.cos(b)) * np.cos(a), (0.7 + 0.3 * np.cos(b)) * np.sin(a),
                         0.3 * np.sin(b)], axis=1)
    raise ValueError(kind)


def class_prototypes(spec: DatasetSpec) -> np.ndarray:
    """One fixed point pattern per class, ``(O, n_points, 3)``.

    Classes cycle through the shape kinds; repeats of a kind get a seeded
    anisotropic stretch. Points are ordered by height so contiguous index
    groups are horizontal slices.
    """
    out = np.empty((spec.n_classes, spec.n_points, 3))
    for o in range(spec.n_classes):
        rng = np.random.default_rng([spec.prototype_seed, o])
        kind = SHAPE_KINDS[o % len(SHAPE_KINDS)]
        pts = _unit_shape(kind, spec.n_points, rng)
        if o >= len(SHAPE_KINDS):
            pts = pts * rng.uniform(0.55, 1.45, 3)
        out[o] = pts[np.argsort(pts[:, 2], kind="stable")]
    return out


def stratified_split(labels: np.ndarray, n_classes: int, test_fraction: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for o in range(n_classes):
        idx = np.flatnonzero(labels == o)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Prototype plus Gaussian jitter per sample, then an 80/20 stratified split."""
    spec.validate()
    protos = class_prototypes(spec)
    counts = spec.counts()
    rng = np.random.default_rng([spec.seed, 1])
    labels = np.repeat(np.arange(spec.n_classes), counts)
    points = protos[labels] + spec.noise * rng.standard_normal((labels.size, spec.n_points, 3))
    train_idx, test_idx = stratified_split(labels, spec.n_classes, spec.test_fraction,
                                           np.random.default_rng([spec.seed, 2]))
    return Dataset(points, labels, train_idx, test_idx, spec.n_classes)


def pretext_spec(spec: DatasetSpec, per_class: int | None = None) -> DatasetSpec:
    """Balanced held-out split with the same prototypes and fresh jitter."""
    n = per_class if per_class is not None else int(spec.counts().max())
    return replace(spec, samples_per_class=n, seed=spec.seed + 104_729, test_fraction=0.2)


# ---------------------------------------------------------------- partition


def frac_ceil(fraction: float, n: int) -> int:
    return int(math.ceil(fraction * n - _FRAC_EPS))


@dataclass
class PartitionPlan:
    client_classes: list[list[int]]
    client_indices: list[np.ndarray]
    class_fraction: float
    sample_fraction: float
    strict_disjoint: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(i) for i in self.client_indices]


def _assign_classes(C: int, O: int, k: int, rng: np.random.Generator) -> list[list[int]]:
    return [sorted(rng.choice(O, size=k, replace=False).tolist()) for _ in range(C)]


def partition_noniid(dataset: Dataset, C: int, class_fraction: float = 0.7, sample_fraction: float = 0.7,
                     seed: int = 0, strict_disjoint: bool = False, max_reshuffles: int = 100) -> PartitionPlan:
    """Give each client ``ceil(class_fraction O)`` classes and a share of their training samples.

    In the default (shared) mode each client draws ``ceil(sample_fraction n)``
    samples of each of its classes without replacement from the full class
    pool, so different clients may hold the same sample. ``strict_disjoint``
    splits every class pool into disjoint shards instead; a client gets at most
    its fraction and at most an equal share of the pool.
    """
    if C < 1:
        raise ConfigurationError("need at least one client")
    if not (0 < class_fraction <= 1 and 0 < sample_fraction <= 1):
        raise ConfigurationError("fractions must lie in (0, 1]")
    O = dataset.n_classes
    k = frac_ceil(class_fraction, O)
    train_labels = dataset.labels[dataset.train_idx]
    pools = [dataset.train_idx[train_labels == o] for o in range(O)]
    if any(p.size == 0 for p in pools):
        raise ConfigurationError("a class has no training samples")

    rng = np.random.default_rng([seed, 3])
    notes = []
    classes = _assign_classes(C, O, k, rng)
    if C * k >= O:
        for attempt in range(max_reshuffles):
            if len(set().union(*classes)) == O:
                break
            notes.append(f"class coverage incomplete, reshuffle {attempt + 1}")
            classes = _assign_classes(C, O, k, rng)
        else:
            raise ConfigurationError("could not cover every class with the client subsets")

    indices: list[list[np.ndarray]] = [[] for _ in range(C)]
    for o in range(O):
        holders = [c for c in range(C) if o in classes[c]]
        pool = pools[o]
        take = frac_ceil(sample_fraction, pool.size)
        if strict_disjoint and holders:
            shuffled = pool[rng.permutation(pool.size)]
            share = min(take, pool.size // len(holders))
            if share == 0:
                raise ConfigurationError(
                    f"class {o}: {pool.size} samples cannot be split among {len(holders)} clients")
            for j, c in enumerate(holders):
                indices[c].append(shuffled[j * share:(j + 1) * share])
        else:
            for c in holders:
                indices[c].append(rng.choice(pool, size=take, replace=False))
    client_indices = [np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
                      for parts in indices]
    if any(ix.size == 0 for ix in client_indices):
        raise ConfigurationError("partition left a client without samples")
    return PartitionPlan(classes, client_indices, class_fraction, sample_fraction, strict_disjoint, notes)


def pick_minority_classes(n_classes: int, seed: int, count: int | None = None) -> list[int]:
    count = n_classes // 2 if count is None else count
    rng = np.random.default_rng([seed, 5])
    return sorted(rng.choice(n_classes, size=count, replace=False).tolist())


def inject_imbalance(plan: PartitionPlan, dataset: Dataset, minority_classes, ratio: float,
                     seed: int = 0) -> PartitionPlan:
    """Thin the minority classes inside every client to ``ceil(n / ratio)`` samples."""
    if ratio < 1:
        raise ConfigurationError("imbalance ratio must be >= 1")
    rng = np.random.default_rng([seed, 7])
    minority = set(int(o) for o in minority_classes)
    out = []
    for idx in plan.client_indices:
        keep = []
        labels = dataset.labels[idx]
        for o in np.unique(labels):
            members = idx[labels == o]
            if int(o) in minority:
                n = max(1, int(math.ceil(members.size / ratio - _FRAC_EPS)))
                members = rng.choice(members, size=n, replace=False)
            keep.append(members)
        out.append(np.sort(np.concatenate(keep)))
    return replace(plan, client_indices=out,
                   notes=plan.notes + [f"minority classes {sorted(minority)} thinned {ratio}:1"])


@dataclass
class ImbalanceProfile:
    client_hist: np.ndarray  # (C, O)
    global_hist: np.ndarray  # (O,)
    local_ratios: np.ndarray  # (C,)
    global_ratio: float


def _ratio(counts: np.ndarray) -> float:
    present = counts[counts > 0]
    return float(present.max() / present.min()) if present.size else 1.0


def imbalance_profile(plan: PartitionPlan, dataset: Dataset) -> ImbalanceProfile:
    """Class histograms per client and overall, with max/min count ratios."""
    O = dataset.n_classes
    hist = np.stack([np.bincount(dataset.labels[ix], minlength=O) for ix in plan.client_indices])
    total = hist.sum(axis=0)
    return ImbalanceProfile(hist, total, np.array([_ratio(h) for h in hist]), _ratio(total))


# ---------------------------------------------------------------- files

DATASET_MAGIC = b"F3DD"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def dataset_to_bytes(points: np.ndarray, labels: np.ndarray, n_classes: int) -> bytes:
    n, n_pts, _ = points.shape
    head = DATASET_MAGIC + struct.pack("<HHIQ", DATASET_VERSION, n_classes, n_pts, n)
    body = bytearray()
    coords = points.astype("<f4")
    for i in range(n):
        body += struct.pack("<H", int(labels[i]))
        body += coords[i].tobytes()
    return head + bytes(body)


def dataset_from_bytes(buf: bytes) -> tuple[np.ndarray, np.ndarray, int]:
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise DatasetFormatError("bad dataset magic", 0)
    if len(buf) < 20:
        raise DatasetFormatError("truncated dataset header", len(buf))
    version, n_classes, n_pts, n = struct.unpack_from("<HHIQ", buf, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", 4)
    rec = 2 + 12 * n_pts
    off = 20
    if len(buf) != off + n * rec:
        raise DatasetFormatError(f"expected {off + n * rec} bytes, found {len(buf)}", min(len(buf), off + n * rec))
    labels = np.empty(n, dtype=np.int64)
    points = np.empty((n, n_pts, 3), dtype=np.float64)
    for i in range(n):
        labels[i] = struct.unpack_from("<H", buf, off)[0]
        points[i] = np.frombuffer(buf, dtype="<f4", count=3 * n_pts, offset=off + 2).reshape(n_pts, 3)
        off += rec
    return points, labels, n_classes


def write_dataset(path, dataset: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset.points, dataset.labels, dataset.n_classes))


def read_dataset(path) -> tuple[np.ndarray, np.ndarray, int]:
    return dataset_from_bytes(Path(path).read_bytes())


def write_partition_csv(path, plan: PartitionPlan, dataset: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "class", "sample_index"])
        for c, idx in enumerate(plan.client_indices):
            for i in idx:
                w.writerow([c, int(dataset.labels[i]), int(i)])


def read_partition_csv(path) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["client_id"]), []).append(int(row["sample_index"]))
    return out
