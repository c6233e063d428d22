"""Sequence datasets: synthetic HMM generation, splitting and line-delimited file I/O.

Labels are 0-based in memory and 1-based on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

FORMAT_TAG = "temporal-noise-dataset/1"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sequence:
    id: str
    features: np.ndarray  # (T, d)
    clean_labels: Optional[np.ndarray]
    noisy_labels: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    """n sequences sharing d, T and C, stored as stacked arrays.

    ``features`` has shape (n, T, d); label arrays are (n, T) integers in [0, C).
    """

    ids: tuple[str, ...]
    features: np.ndarray
    clean_labels: Optional[np.ndarray]
    num_classes: int
    noisy_labels: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n, T, _ = self.features.shape
        if len(self.ids) != n:
            raise DatasetError(f"{len(self.ids)} ids for {n} sequences")
        for name in ("clean_labels", "noisy_labels"):
            lab = getattr(self, name)
            if lab is None:
                continue
            if lab.shape != (n, T):
                raise DatasetError(f"{name} shape {lab.shape}, expected {(n, T)}")
            if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
                raise DatasetError(f"{name} outside [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def horizon(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, SequenceDataset):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))

        return (self.ids == other.ids and self.num_classes == other.num_classes
                and np.array_equal(self.features, other.features)
                and same(self.clean_labels, other.clean_labels)
                and same(self.noisy_labels, other.noisy_labels))

    def __iter__(self) -> Iterator[Sequence]:
        for i, sid in enumerate(self.ids):
            yield Sequence(
                sid, self.features[i],
                None if self.clean_labels is None else self.clean_labels[i],
                None if self.noisy_labels is None else self.noisy_labels[i],
            )

    def replace(self, **changes) -> "SequenceDataset":
        return replace(self, **changes)

    def subset(self, index) -> "SequenceDataset":
        index = np.asarray(index, dtype=np.int64)
        pick = lambda a: None if a is None else a[index]
        return SequenceDataset(
            ids=tuple(self.ids[i] for i in index), features=self.features[index],
            clean_labels=pick(self.clean_labels), num_classes=self.num_classes,
            noisy_labels=pick(self.noisy_labels), provenance=dict(self.provenance),
        )

    def without_clean_labels(self) -> "SequenceDataset":
        """The view estimators get: features and noisy labels only."""
        if self.noisy_labels is None:
            raise DatasetError("dataset has no noisy labels")
        return replace(self, clean_labels=None)


@dataclass(frozen=True)
class HmmSpec:
    n: int = 1000
    d: int = 10
    T: int = 50
    C: int = 2
    variance: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.d, self.T, self.C) < 1:
            raise DatasetError("n, d, T, C must be positive")
        if self.variance <= 0:
            raise DatasetError("emission variance must be positive")

    @property
    def transition(self) -> np.ndarray:
        return np.full((self.C, self.C), 1.0 / self.C)


def generate_hmm(spec: HmmSpec) -> SequenceDataset:
    """Gaussian-emission HMM with a uniform transition matrix and uniform start.

    Class c (1-based) emits d independent N(c, variance) features.
    """
    rng = np.random.default_rng(spec.seed)
    n, T, C = spec.n, spec.T, spec.C
    cdf = np.cumsum(spec.transition, axis=1)
    states = np.empty((n, T), dtype=np.int64)
    states[:, 0] = rng.integers(0, C, size=n)
    for t in range(1, T):
        u = rng.random(n)
        states[:, t] = np.minimum((u[:, None] >= cdf[states[:, t - 1]]).sum(axis=1), C - 1)
    means = (states + 1).astype(np.float64)[..., None]
    features = means + np.sqrt(spec.variance) * rng.standard_normal((n, T, spec.d))
    width = len(str(n - 1))
    return SequenceDataset(
        ids=tuple(f"seq{i:0{width}d}" for i in range(n)),
        features=features, clean_labels=states, num_classes=C,
        provenance={"generator": "hmm", **spec.__dict__},
    )


def split(dataset: SequenceDataset, test_fraction: float = 0.2, seed: int = 0):
    """Random sequence-level partition into (train, test)."""
    if not 0 < test_fraction < 1:
        raise DatasetError("test_fraction must lie in (0, 1)")
    if dataset.n < 2:
        raise DatasetError("need at least 2 sequences to split")
    n_test = int(round(test_fraction * dataset.n))
    n_test = min(max(n_test, 1), dataset.n - 1)
    perm = np.random.default_rng(seed).permutation(dataset.n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return dataset.subset(train_idx), dataset.subset(test_idx)


def save_dataset(dataset: SequenceDataset, path) -> None:
    path = Path(path)
    header = {"format": FORMAT_TAG, "d": dataset.dim, "T": dataset.horizon, "C": dataset.num_classes,
              "n": dataset.n, "provenance": _jsonable(dataset.provenance)}
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for seq in dataset:
            rec = {"id": seq.id, "features": seq.features.tolist()}
            if seq.clean_labels is not None:
                rec["clean_labels"] = (seq.clean_labels + 1).tolist()
            if seq.noisy_labels is not None:
                rec["noisy_labels"] = (seq.noisy_labels + 1).tolist()
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> SequenceDataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        d, T, C = int(header["d"]), int(header["T"]), int(header["C"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}:1: bad header ({exc})") from None
    ids, feats, clean, noisy = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: not valid JSON ({exc})") from None
        where = f"{path}:{lineno}"
        if "id" not in rec:
            raise DatasetError(f"{where}: missing field 'id'")
        x = np.asarray(rec.get("features"), dtype=np.float64)
        if x.shape != (T, d):
            raise DatasetError(f"{where}: field 'features' has shape {x.shape}, expected {(T, d)}")
        ids.append(str(rec["id"]))
        feats.append(x)
        for name, bucket in (("clean_labels", clean), ("noisy_labels", noisy)):
            if name not in rec:
                bucket.append(None)
                continue
            lab = np.asarray(rec[name])
            if lab.shape != (T,) or not np.issubdtype(lab.dtype, np.integer):
                raise DatasetError(f"{where}: field {name!r} must be {T} integers")
            if lab.min() < 1 or lab.max() > C:
                raise DatasetError(f"{where}: field {name!r} has labels outside [1, {C}]")
            bucket.append(lab.astype(np.int64) - 1)

    def stack(bucket, name):
        present = [b is not None for b in bucket]
        if not any(present):
            return None
        if not all(present):
            raise DatasetError(f"{path}: field {name!r} present on some records only")
        return np.stack(bucket)

    features = np.stack(feats) if feats else np.empty((0, T, d))
    return SequenceDataset(
        ids=tuple(ids), features=features, clean_labels=stack(clean, "clean_labels"),
        num_classes=C, noisy_labels=stack(noisy, "noisy_labels"),
        provenance=dict(header.get("provenance") or {}, source=str(path)),
    )


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))
