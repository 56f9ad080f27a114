"""Perturbation sets, projections, the alignment statistic, and dataset margins.

Three threat models share one interface: the l-inf ball, the l2 ball, and the
"signal-aligned" set, a union of k line segments along mutually orthonormal
directions. `support` exposes the support function sup over the set of v.delta,
which is all the bound machinery ever needs from a threat model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .data import LabeledSet

Array = np.ndarray

KINDS = ("linf", "l2", "signal")

# Maps each labeled batch to unit "signal" directions pointing at the nearest
# decision boundary of the distribution's robust Bayes classifier.
SignalOracle = Callable[[Array, Array], Array]

_ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class ThreatModel:
    """A perturbation set: ball of radius eps, or union of k segments.

    For kind "signal", `directions` holds the k orthonormal unit rows spanning
    the segments {beta * dir : |beta| <= eps}.
    """

    kind: str
    eps: float
    directions: Array | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown threat kind {self.kind!r}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.kind == "signal":
            if self.directions is None:
                raise ValueError("signal threat needs directions")
            dirs = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
            k, d = dirs.shape
            if k > d:
                raise ValueError("more directions than dimensions")
            gram = dirs @ dirs.T
            if np.max(np.abs(gram - np.eye(k))) > _ORTHO_TOL:
                raise ValueError("directions must be orthonormal to 1e-10")
            object.__setattr__(self, "directions", dirs)
        elif self.directions is not None:
            raise ValueError("directions only apply to the signal kind")

    @classmethod
    def linf(cls, eps: float) -> "ThreatModel":
        return cls("linf", eps)

    @classmethod
    def l2(cls, eps: float) -> "ThreatModel":
        return cls("l2", eps)

    @classmethod
    def signal(cls, eps: float, directions: Array) -> "ThreatModel":
        return cls("signal", eps, directions)

    @property
    def k(self) -> int:
        return 0 if self.directions is None else self.directions.shape[0]


def make_directions(d: int, k: int, seed: int | np.random.Generator) -> Array:
    """k orthonormal rows in R^d from Gram-Schmidt on seeded Gaussian draws.

    Deterministic for a fixed seed; re-draws on (measure-zero) degeneracy.
    """
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(100):
        raw = rng.standard_normal((d, k))
        q, r = np.linalg.qr(raw)
        diag = np.diag(r)
        if np.min(np.abs(diag)) < 1e-12:
            continue
        # Fix the QR sign ambiguity so the output is a deterministic function
        # of the draw.
        return (q * np.sign(diag)).T
    raise RuntimeError("could not draw independent directions")


def project(delta: Array, tm: ThreatModel) -> Array:
    """Euclidean projection of `delta` (single vector or batch) onto the set.

    For the signal kind this is projection onto the nearest of the k segments.
    """
    single = np.ndim(delta) == 1
    d = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    if tm.kind == "linf":
        out = np.clip(d, -tm.eps, tm.eps)
    elif tm.kind == "l2":
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        scale = np.ones_like(norms)
        np.divide(tm.eps, norms, out=scale, where=norms > tm.eps)
        out = d * scale
    else:
        dirs = tm.directions
        beta = np.clip(d @ dirs.T, -tm.eps, tm.eps)          # (n, k)
        # Squared distance to segment j: |delta|^2 - 2 beta_j <delta, dir_j> + beta_j^2.
        dist = -2.0 * beta * (d @ dirs.T) + beta ** 2
        best = dist.argmin(axis=1)
        out = beta[np.arange(len(d)), best][:, None] * dirs[best]
    return out[0] if single else out


def support(tm: ThreatModel, v: Array) -> Array:
    """Support function sup_{delta in set} v . delta, over the last axis of `v`.

    Equals eps times the l1 norm (linf ball), the l2 norm (l2 ball), or the
    largest |projection| on any direction (signal).
    """
    v = np.asarray(v, dtype=np.float64)
    if tm.kind == "linf":
        return tm.eps * np.abs(v).sum(axis=-1)
    if tm.kind == "l2":
        return tm.eps * np.linalg.norm(v, axis=-1)
    return tm.eps * np.abs(v @ tm.directions.T).max(axis=-1)


def support_gradient(tm: ThreatModel, v: Array) -> Array:
    """A subgradient of `support(tm, .)` at `v`, same shape as `v`."""
    v = np.asarray(v, dtype=np.float64)
    if tm.kind == "linf":
        return tm.eps * np.sign(v)
    if tm.kind == "l2":
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        out = np.zeros_like(v)
        np.divide(v, norms, out=out, where=norms > 0)
        return tm.eps * out
    coef = v @ tm.directions.T                                # (..., k)
    best = np.abs(coef).argmax(axis=-1)
    sign = np.sign(np.take_along_axis(coef, best[..., None], axis=-1))
    return tm.eps * sign * tm.directions[best]


def alignment(tm: ThreatModel, data: LabeledSet, oracle: SignalOracle) -> float:
    """Mean over the data of the best cosine between the signal direction and
    any nonzero perturbation in the set.

    Closed forms: 1 for the l2 ball; max_j |s . dir_j| for the signal set; and
    |s|_1 / (sqrt(d) |s|_2) for the l-inf ball, where the supremum sits at the
    cube vertex whose signs match s.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    s = oracle(data.x, data.y)
    norms = np.linalg.norm(s, axis=1)
    if tm.kind == "l2":
        return 1.0
    if tm.kind == "signal":
        unit = s / norms[:, None]
        return float(np.abs(unit @ tm.directions.T).max(axis=1).mean())
    d = data.d
    return float((np.abs(s).sum(axis=1) / (np.sqrt(d) * norms)).mean())


def margin(data: LabeledSet) -> float:
    """Smallest Euclidean distance between any two differently labeled points."""
    labels = np.unique(data.y)
    if len(labels) < 2:
        raise ValueError("margin needs at least two classes")
    best = np.inf
    for i, a in enumerate(labels):
        xa = data.x[data.y == a]
        for b in labels[i + 1:]:
            xb = data.x[data.y == b]
            best = min(best, float(cdist(xa, xb).min()))
    return best


@dataclass(frozen=True)
class ThreatSpec:
    """Config-level description of a threat model, independent of the data
    dimension: {"kind", "eps", "k", "dir_seed"}.

    `dir_seed` seeds the signal directions; None means "derive from the run
    seed" and is resolved by the experiment runner.
    """

    kind: str
    eps: float
    k: int = 1
    dir_seed: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown threat kind {self.kind!r}")

    def materialize(self, d: int, fallback_dir_seed: int = 0) -> ThreatModel:
        if self.kind != "signal":
            return ThreatModel(self.kind, self.eps)
        seed = self.dir_seed if self.dir_seed is not None else fallback_dir_seed
        return ThreatModel.signal(self.eps, make_directions(d, self.k, seed))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "eps": self.eps, "k": self.k}
        if self.dir_seed is not None:
            out["dir_seed"] = self.dir_seed
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ThreatSpec":
        return cls(kind=doc["kind"], eps=float(doc["eps"]),
                   k=int(doc.get("k", 1)), dir_seed=doc.get("dir_seed"))
