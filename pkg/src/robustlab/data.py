"""Synthetic binary classification tasks with controlled margins.

Two distributions: points on one of two concentric spheres (label = which
sphere), and a linearly separable task whose first coordinate carries the
whole class signal while the remaining coordinates are Gaussian noise.
Both come with an analytic "signal direction" oracle: the unit vector from
a point toward the closest decision boundary of the robust Bayes classifier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Array = np.ndarray

# Substream tags so train/test splits never share random draws.
_SPLIT_TAG = {"train": 0, "test": 1}


@dataclass
class LabeledSet:
    """Feature matrix `x` of shape (n, d) with integer labels `y` in [0, n_classes)."""

    x: Array
    y: Array
    n_classes: int = 2

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            raise ValueError(f"x must be 2-D, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError(f"y shape {self.y.shape} does not match {self.x.shape[0]} rows")
        if self.y.size and not (0 <= self.y.min() and self.y.max() < self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def save_csv(self, path: str | Path) -> None:
        """Write d feature columns followed by one integer label column."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"f{i}" for i in range(self.d)] + ["label"])
            for row, label in zip(self.x, self.y):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def load_csv(cls, path: str | Path, n_classes: int = 2) -> "LabeledSet":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            d = len(header) - 1
            xs, ys = [], []
            for row in reader:
                xs.append([float(v) for v in row[:d]])
                ys.append(int(row[d]))
        return cls(np.asarray(xs, dtype=np.float64).reshape(len(ys), d),
                   np.asarray(ys, dtype=np.int64), n_classes=n_classes)


@dataclass
class SpheresParams:
    """Two concentric spheres in R^d; label 0 is the inner sphere, 1 the outer.

    The class margin is r_outer - r_inner: no two differently labeled points
    can be closer than that.
    """

    d: int = 10
    r_inner: float = 10.0
    r_outer: float = 30.0
    n_train: int = 500
    n_test: int = 10_000
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0 < self.r_inner < self.r_outer):
            raise ValueError("need 0 < r_inner < r_outer")
        if self.d < 1:
            raise ValueError("d must be positive")

    @property
    def gamma(self) -> float:
        return self.r_outer - self.r_inner


def sample_spheres(p: SpheresParams, split: str = "train") -> LabeledSet:
    """Draw a labeled sample from the concentric-spheres distribution.

    Labels are fair coin flips; each point is a uniformly random direction
    scaled to its class radius, so ``|x| == r_label`` holds exactly up to
    floating point. `split` selects an independent substream ("train" or
    "test") of the params seed along with the matching sample count.
    """
    n = p.n_train if split == "train" else p.n_test
    rng = np.random.default_rng([p.seed, _SPLIT_TAG[split]])
    y = rng.integers(0, 2, size=n)
    z = rng.standard_normal((n, p.d))
    # A zero draw has measure zero but would break the normalization.
    norms = np.linalg.norm(z, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        z[bad] = rng.standard_normal((int(bad.sum()), p.d))
        norms = np.linalg.norm(z, axis=1)
    radius = np.where(y == 0, p.r_inner, p.r_outer)
    x = z * (radius / norms)[:, None]
    return LabeledSet(x, y)


@dataclass
class LinsepParams:
    """Linearly separable distribution: x = (gamma * sign(y), noise).

    The first coordinate is exactly +-gamma according to the label; the other
    d - 1 coordinates are i.i.d. N(0, sigma^2) and carry no class information.
    """

    d: int = 10
    gamma: float = 1.0
    sigma: float = 1.0
    n: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gamma <= 0 or self.sigma <= 0:
            raise ValueError("gamma and sigma must be positive")
        if self.d < 2:
            raise ValueError("d must be at least 2")


def sample_linsep(p: LinsepParams) -> LabeledSet:
    """Draw from the linearly separable distribution; label 0 <-> sign -1, 1 <-> +1."""
    rng = np.random.default_rng(p.seed)
    sign = 2 * rng.integers(0, 2, size=p.n) - 1
    x = np.empty((p.n, p.d))
    x[:, 0] = p.gamma * sign
    x[:, 1:] = rng.normal(0.0, p.sigma, size=(p.n, p.d - 1))
    return LabeledSet(x, (sign > 0).astype(np.int64))


def spheres_signal(x: Array, y: Array) -> Array:
    """Unit direction toward the opposite sphere: radially out for the inner
    class, radially in for the outer class."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    radial = x / np.linalg.norm(x, axis=1, keepdims=True)
    return np.where((y == 0)[:, None], radial, -radial)


def linsep_signal(x: Array, y: Array) -> Array:
    """Unit direction toward the separating hyperplane: -e1 for the positive
    class, +e1 for the negative class."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    s = np.zeros_like(x)
    s[:, 0] = np.where(y == 1, -1.0, 1.0)
    return s
