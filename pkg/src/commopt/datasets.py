"""LibSVM parsing, synthetic fixtures and client partitioning.

Feature indices are 1-based on the wire (LibSVM convention) and 0-based
internally.  All outputs are immutable after construction and fully
determined by their seed.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngmod

PARTITION_SCHEMES = ("iid", "labelwise", "feature_kmeans", "dirichlet_quantity")


class LibsvmFormatError(ValueError):
    """Malformed LibSVM input; carries the offending 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sparse labeled examples in CSR layout, labels in {-1, +1}."""

    labels: np.ndarray   # (count,) int8
    indptr: np.ndarray   # (count + 1,) int64
    indices: np.ndarray  # 0-based feature indices, int64
    values: np.ndarray   # float64
    dim: int

    @property
    def count(self) -> int:
        return len(self.labels)

    def example(self, i: int) -> tuple[int, dict[int, float]]:
        """Return (label, {1-based index: value}) for example ``i``."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        feats = {int(j) + 1: float(v) for j, v in zip(self.indices[lo:hi], self.values[lo:hi])}
        return int(self.labels[i]), feats

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.count, self.dim))
        for i in range(self.count):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            out[i, self.indices[lo:hi]] = self.values[lo:hi]
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def _map_label(token: str, line_no: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise LibsvmFormatError(line_no, f"unreadable label {token!r}") from None
    if value in (1.0, -1.0):
        return int(value)
    if value == 0.0:
        return -1  # several public files use 0/1 labels
    raise LibsvmFormatError(line_no, f"label {token!r} not mappable to -1/+1")


def parse_libsvm(source) -> Dataset:
    """Parse LibSVM text (``<label> <idx>:<val> ...`` per line).

    ``source`` may be a path, str, bytes, or file-like object.  Indices
    must be positive and strictly increasing within a line; ``dim`` is
    the maximum index seen.
    """
    if isinstance(source, (str, os.PathLike)) and not (
        isinstance(source, str) and "\n" in source
    ) and os.path.exists(source):
        with open(source, "rb") as fh:
            text = fh.read().decode("ascii")
    elif isinstance(source, bytes):
        text = source.decode("ascii")
    elif isinstance(source, str):
        text = source
    elif hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("ascii") if isinstance(raw, bytes) else raw
    else:
        raise TypeError(f"cannot read LibSVM data from {type(source)!r}")

    labels: list[int] = []
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    dim = 0
    for line_no, line in enumerate(io.StringIO(text), start=1):
        tokens = line.split()
        if not tokens:
            continue
        labels.append(_map_label(tokens[0], line_no))
        prev = 0
        for token in tokens[1:]:
            idx_s, sep, val_s = token.partition(":")
            if not sep:
                raise LibsvmFormatError(line_no, f"token {token!r} is not idx:val")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise LibsvmFormatError(line_no, f"malformed token {token!r}") from None
            if idx <= 0:
                raise LibsvmFormatError(line_no, f"index {idx} is not positive")
            if idx <= prev:
                raise LibsvmFormatError(line_no, f"index {idx} not increasing after {prev}")
            prev = idx
            indices.append(idx - 1)
            values.append(val)
            dim = max(dim, idx)
        indptr.append(len(indices))

    if not labels:
        raise LibsvmFormatError(0, "no examples found")
    return Dataset(
        labels=np.asarray(labels, dtype=np.int8),
        indptr=np.asarray(indptr, dtype=np.int64),
        indices=np.asarray(indices, dtype=np.int64),
        values=np.asarray(values, dtype=np.float64),
        dim=dim,
    )


def write_libsvm(ds: Dataset) -> str:
    """Serialize back to LibSVM text; re-parsing yields an equal Dataset."""
    lines = []
    for i in range(ds.count):
        lo, hi = ds.indptr[i], ds.indptr[i + 1]
        parts = [f"{'+1' if ds.labels[i] > 0 else '-1'}"]
        parts += [f"{int(j) + 1}:{float(v)!r}"
                  for j, v in zip(ds.indices[lo:hi], ds.values[lo:hi])]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ClientPartition:
    """Disjoint assignment of example indices to clients."""

    assignments: tuple[np.ndarray, ...]
    scheme_tag: str

    @property
    def n(self) -> int:
        return len(self.assignments)

    def validate(self, count: int) -> None:
        seen = np.concatenate(self.assignments) if self.assignments else np.array([], dtype=int)
        if len(seen) != len(set(seen.tolist())):
            raise PartitionError("assignments overlap")
        if any(len(a) == 0 for a in self.assignments):
            raise PartitionError("empty client assignment")
        if len(seen) and (seen.min() < 0 or seen.max() >= count):
            raise PartitionError("assignment index out of range")
        # labelwise subsamples to hit its ratios and may leave examples unused
        if self.scheme_tag != "labelwise" and (
                len(seen) != count or set(seen.tolist()) != set(range(count))):
            raise PartitionError("assignments do not cover the dataset")

    def to_json(self) -> str:
        return json.dumps([a.tolist() for a in self.assignments])

    @classmethod
    def from_json(cls, text: str, scheme_tag: str = "iid") -> "ClientPartition":
        lists = json.loads(text)
        return cls(tuple(np.asarray(a, dtype=np.int64) for a in lists), scheme_tag)


def _split_sizes(count: int, n: int) -> np.ndarray:
    sizes = np.full(n, count // n, dtype=np.int64)
    sizes[: count % n] += 1
    return sizes


def _rounded_sizes(fractions: np.ndarray, count: int) -> np.ndarray:
    """Largest-remainder rounding of fractions * count to integers summing to count."""
    raw = fractions * count
    sizes = np.floor(raw).astype(np.int64)
    short = count - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 50,
           retries: int = 10) -> np.ndarray:
    """K-means labels with k-means++ init; ties broken by lowest cluster index.

    Re-draws the initialization (bounded) if any cluster ends up empty.
    """
    m = len(points)
    if k > m:
        raise PartitionError(f"k={k} exceeds number of points {m}")
    sq = (points**2).sum(axis=1)
    for attempt in range(retries):
        rng = rngmod.stream(seed, rngmod.PARTITION, attempt)
        centers = _kmeanspp(points, k, rng)
        labels = None
        for _ in range(max_iter):
            d2 = sq[:, None] - 2.0 * points @ centers.T + (centers**2).sum(axis=1)[None, :]
            new_labels = np.argmin(d2, axis=1)  # argmin takes lowest index on ties
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                mask = labels == j
                if mask.any():
                    centers[j] = points[mask].mean(axis=0)
        if all((labels == j).any() for j in range(k)):
            return labels
    raise PartitionError(f"kmeans produced an empty cluster after {retries} retries")


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(m)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(m)]
        else:
            centers[j] = points[rng.choice(m, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def partition(ds: Dataset, scheme: str, n: int, seed: int, alpha: float = 0.5,
              retries: int = 1000) -> ClientPartition:
    """Assign examples to ``n`` clients under one of the split schemes.

    Deterministic for a fixed seed.  ``alpha`` is the Dirichlet
    concentration used by ``dirichlet_quantity``.
    """
    if scheme not in PARTITION_SCHEMES:
        raise PartitionError(f"unknown scheme {scheme!r}")
    if n < 1:
        raise PartitionError("need at least one client")
    if n > ds.count:
        raise PartitionError(f"n={n} exceeds dataset size {ds.count}")

    rng = rngmod.stream(seed, rngmod.PARTITION)
    if scheme == "iid":
        perm = rng.permutation(ds.count)
        cuts = np.cumsum(_split_sizes(ds.count, n))[:-1]
        assignments = [np.sort(chunk) for chunk in np.split(perm, cuts)]
    elif scheme == "labelwise":
        assignments = _labelwise(ds, n, rng)
    elif scheme == "feature_kmeans":
        labels = kmeans(ds.to_dense(), n, seed)
        assignments = [np.flatnonzero(labels == j) for j in range(n)]
    else:  # dirichlet_quantity
        assignments = _dirichlet_quantity(ds.count, n, alpha, rng, retries)

    part = ClientPartition(tuple(np.asarray(a, dtype=np.int64) for a in assignments), scheme)
    part.validate(ds.count)
    return part


def _labelwise(ds: Dataset, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    # Client i samples positives with fraction (i + 1) / n of its quota.
    # Exact ratios demand more positives than a balanced pool holds, so the
    # shared quota is the largest one both pools can serve; leftovers stay
    # unassigned (this is a sampling scheme, not a covering split).
    pos = rng.permutation(np.flatnonzero(ds.labels > 0)).tolist()
    neg = rng.permutation(np.flatnonzero(ds.labels < 0)).tolist()
    quota = ds.count // n
    while quota >= 1:
        wants = [int(round(quota * (i + 1) / n)) for i in range(n)]
        if sum(wants) <= len(pos) and quota * n - sum(wants) <= len(neg):
            break
        quota -= 1
    else:
        raise PartitionError("label pools too small for a labelwise split")
    assignments = []
    for i in range(n):
        chunk = [pos.pop() for _ in range(wants[i])]
        chunk += [neg.pop() for _ in range(quota - wants[i])]
        assignments.append(np.sort(np.asarray(chunk, dtype=np.int64)))
    return assignments


def _dirichlet_quantity(count: int, n: int, alpha: float, rng: np.random.Generator,
                        retries: int) -> list[np.ndarray]:
    for _ in range(retries):
        sizes = _rounded_sizes(rng.dirichlet(np.full(n, alpha)), count)
        if (sizes > 0).all():
            perm = rng.permutation(count)
            cuts = np.cumsum(sizes)[:-1]
            return [np.sort(chunk) for chunk in np.split(perm, cuts)]
    raise PartitionError(f"a client received zero examples in {retries} draws")


def synth_logistic_dataset(count: int, dim: int, seed: int,
                           separation: float = 2.0) -> Dataset:
    """Dense two-class Gaussian-blob data in Dataset form.

    Labels are balanced; features are the label direction plus unit
    noise, scaled by ``separation``.
    """
    rng = rngmod.stream(seed, rngmod.MISC)
    labels = np.where(np.arange(count) % 2 == 0, 1, -1).astype(np.int8)
    rng.shuffle(labels)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    feats = rng.normal(size=(count, dim)) + separation * labels[:, None] * direction
    indptr = np.arange(0, (count + 1) * dim, dim, dtype=np.int64)
    indices = np.tile(np.arange(dim, dtype=np.int64), count)
    return Dataset(labels=labels, indptr=indptr, indices=indices,
                   values=feats.ravel().astype(float), dim=dim)


def synth_quadratic(mu_list: Sequence[float], centers: Iterable[Sequence[float]]):
    """Finite-sum quadratic with analytically known optimum.

    Each client holds (mu_i / 2) ||x - c_i||^2, so the average objective
    is minimized at the mu-weighted mean of the centers.
    """
    from . import problems

    mus = np.asarray(mu_list, dtype=float)
    cs = np.atleast_2d(np.asarray(centers, dtype=float))
    if (mus <= 0).any():
        raise ValueError("all curvatures must be positive")
    if len(mus) != len(cs):
        raise ValueError("mu_list and centers must have matching length")
    return problems.Problem.quadratic(mus, cs)
