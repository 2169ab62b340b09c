"""Input distributions and structured training sets."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

SOURCE_TAGS = ("xor-hypercube", "complete-xor", "uniform-ball", "circle", "custom")

MAX_ENUM_DIM = 22
EXHAUSTIVE_TEST_DIM = 20


class DataError(ValueError):
    """Invalid dataset request."""


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    source_tag: str = "custom"

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[1] < 2:
            raise DataError(f"inputs must be n x d with d >= 2, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DataError("inputs and labels disagree on n")
        if self.source_tag not in SOURCE_TAGS:
            raise DataError(f"unknown source tag {self.source_tag!r}")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return self.n

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.source_tag)

    def with_labels(self, labels) -> "LabeledDataset":
        return LabeledDataset(self.inputs, labels, self.source_tag)


def _check_dim(d):
    if d < 2:
        raise DataError(f"invalid dimension d={d}; need d >= 2")


def xor_labels(X) -> np.ndarray:
    X = np.asarray(X)
    return X[:, 0] * X[:, 1]


def dedupe(ds: LabeledDataset) -> LabeledDataset:
    """Drop repeated input rows, keeping first occurrences in order."""
    _, first = np.unique(ds.inputs, axis=0, return_index=True)
    return ds.subset(np.sort(first))


def sample_xor(d: int, n: int, seed=0, distinct: bool = False) -> LabeledDataset:
    """n i.i.d. points of {-1, 1}^d labelled by x[1] * x[2].

    With ``distinct=True`` duplicates are redrawn so the rows form a set of
    extreme points (requires n <= 2**d).
    """
    _check_dim(d)
    rng = np.random.default_rng(seed)
    if not distinct:
        X = rng.choice(np.array([-1.0, 1.0]), size=(n, d))
        return LabeledDataset(X, xor_labels(X), "xor-hypercube")
    if d < 63 and n > 2**d:
        raise DataError(f"cannot draw {n} distinct points from a {d}-cube")
    rows: list = []
    seen = set()
    while len(rows) < n:
        x = rng.choice(np.array([-1.0, 1.0]), size=d)
        key = x.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(x)
    X = np.array(rows)
    return LabeledDataset(X, xor_labels(X), "xor-hypercube")


def enumerate_hypercube(d: int) -> LabeledDataset:
    """All 2**d vertices in lexicographic order (-1 before +1)."""
    _check_dim(d)
    if d > MAX_ENUM_DIM:
        raise DataError(f"2^{d} rows exceed the enumeration capacity (d <= {MAX_ENUM_DIM})")
    X = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    return LabeledDataset(X, xor_labels(X), "xor-hypercube")


def xor_test_set(d: int, n_mc: int = 10_000, seed=12345) -> LabeledDataset:
    """Exhaustive cube for d <= 20, else a fresh Monte-Carlo draw."""
    if d <= EXHAUSTIVE_TEST_DIM:
        return enumerate_hypercube(d)
    return sample_xor(d, n_mc, seed)


def complete_tail_set(d: int) -> np.ndarray:
    """All-ones tail plus the d-2 single-coordinate flips."""
    k = d - 2
    S = np.ones((k + 1, k))
    for i in range(k):
        S[i + 1, i] = -1.0
    return S


def build_complete_xor_set(d: int) -> LabeledDataset:
    """Training set that crosses every (x1, x2) sign pattern with the tails."""
    if d < 3:
        raise DataError("complete xor sets need d >= 3")
    S = complete_tail_set(d)
    heads = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    X = np.array([np.concatenate([h, s]) for s in S for h in heads])
    return LabeledDataset(X, xor_labels(X), "complete-xor")


def difference_rank(S) -> int:
    S = np.asarray(S, dtype=np.float64)
    D = S[1:] - S[0]
    if D.size == 0:
        return 0
    return int(np.linalg.matrix_rank(D))


def is_complete_xor_set(ds: LabeledDataset) -> bool:
    """Check the complete-training-set condition on distinct rows."""
    X = ds.inputs
    if ds.d < 3 or not np.all(np.abs(X) == 1.0):
        return False
    if not np.array_equal(ds.labels, xor_labels(X)):
        return False
    tails = np.unique(X[:, 2:], axis=0)
    want = {tuple(np.concatenate([h, t])) for t in tails
            for h in ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0))}
    have = {tuple(r) for r in X}
    return have == want and difference_rank(tails) == ds.d - 2


def sample_uniform_ball(d: int, n: int, seed=0) -> LabeledDataset:
    """Uniform points in the radius sqrt(d) ball, y = |x1| - |x2|."""
    _check_dim(d)
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, d))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    r = np.sqrt(d) * rng.uniform(size=n) ** (1.0 / d)
    X = G * r[:, None]
    return LabeledDataset(X, np.abs(X[:, 0]) - np.abs(X[:, 1]), "uniform-ball")


def sample_circle(n: int, label_fn: Callable, R: float = 1.0, d: int = 2,
                  seed=0) -> LabeledDataset:
    """First two coordinates uniform on the unit circle, padded to norm R.

    The padding mass sqrt(R^2 - 1) is spread evenly over coordinates 3..d.
    """
    _check_dim(d)
    if R < 1.0:
        raise DataError(f"infeasible radius R={R}; need R >= 1")
    if d == 2 and not np.isclose(R, 1.0):
        raise DataError("R > 1 needs padding coordinates (d >= 3)")
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    X = np.zeros((n, d))
    X[:, 0] = np.cos(phi)
    X[:, 1] = np.sin(phi)
    if d > 2:
        X[:, 2:] = np.sqrt(R * R - 1.0) / np.sqrt(d - 2)
    y = np.array([label_fn(v) for v in X[:, :2]], dtype=np.float64)
    return LabeledDataset(X, y, "circle")


def write_csv(ds: LabeledDataset, path) -> None:
    header = [f"x{i + 1}" for i in range(ds.d)] + ["y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(ds.inputs, ds.labels):
            w.writerow([f"{v:.17g}" for v in x] + [f"{y:.17g}"])


def read_csv(path, source_tag: str = "custom") -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "y" or not all(h == f"x{i + 1}" for i, h in enumerate(header[:-1])):
        raise DataError(f"unexpected dataset header {header}")
    A = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    return LabeledDataset(A[:, :-1], A[:, -1], source_tag)


def sample_fresh_xor(d: int, n: int, exclude: LabeledDataset, seed=0) -> LabeledDataset:
    """n i.i.d. hypercube points avoiding every input row of ``exclude``."""
    _check_dim(d)
    seen = {r.tobytes() for r in np.ascontiguousarray(exclude.inputs)}
    if d < 63 and len(seen) >= 2**d:
        raise DataError("no unseen hypercube points remain")
    rng = np.random.default_rng(seed)
    rows: list = []
    while len(rows) < n:
        X = rng.choice(np.array([-1.0, 1.0]), size=(2 * (n - len(rows)), d))
        rows.extend(x for x in X if x.tobytes() not in seen)
    X = np.array(rows[:n])
    return LabeledDataset(X, xor_labels(X), "xor-hypercube")
