"""Attacks, adversarial training, and the error evaluation harness.

PGD handles the ball threat models with the usual normalized ascent steps and
random restarts. The signal-aligned set is one-dimensional along each of its
k directions, so the restriction of a one-hidden-layer network to a segment
is piecewise linear: enumerating ReLU crossing points gives an exact attack,
which both evaluation and the adversarial-training inner step use.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import LabeledSet
from .nets import (DenseNet, TrainConfig, TrainTrace, backward, class_margin,
                   cross_entropy, input_gradient, run_sgd)
from .threat import ThreatModel, project

Array = np.ndarray

EVAL_MODES = ("pgd", "exact-line-search", "certified-coap", "certified-ibp")

# Grid resolution per direction when the network is too deep for exact
# breakpoint enumeration.
_FALLBACK_GRID = 1001


@dataclass(frozen=True)
class AttackConfig:
    """PGD budget: `step_size` None means the standard 2.5 * eps / steps."""

    steps: int = 100
    restarts: int = 5
    step_size: float | None = None
    seed: int | tuple = 0

    def __post_init__(self) -> None:
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")

    def resolved_step(self, eps: float) -> float:
        return self.step_size if self.step_size is not None else 2.5 * eps / self.steps

    def restart_rng(self, r: int) -> np.random.Generator:
        seed = self.seed if isinstance(self.seed, tuple) else (self.seed,)
        return np.random.default_rng((*seed, r))


def _random_start(tm: ThreatModel, n: int, d: int, rng: np.random.Generator) -> Array:
    """Uniform-ish start inside the set (exact for the cube, radius-corrected
    for the ball)."""
    if tm.kind == "linf":
        return rng.uniform(-tm.eps, tm.eps, size=(n, d))
    z = rng.standard_normal((n, d))
    z /= np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-30)
    radii = tm.eps * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
    return z * radii


def _ball_ascent(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
                 cfg: AttackConfig, rng: np.random.Generator,
                 on_iterate: Callable[[Array], None] | None = None) -> Array:
    """One PGD run on a ball threat model; returns the final perturbation."""
    n, d = x.shape
    step = cfg.resolved_step(tm.eps)
    delta = project(_random_start(tm, n, d, rng), tm)
    for _ in range(cfg.steps):
        if on_iterate is not None:
            on_iterate(delta)
        g = input_gradient(net, x + delta, y)
        if tm.kind == "linf":
            move = np.sign(g)
        else:
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            move = np.zeros_like(g)
            np.divide(g, norms, out=move, where=norms > 0)
        delta = project(delta + step * move, tm)
    return delta


def _signal_ascent(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
                   cfg: AttackConfig, rng: np.random.Generator,
                   on_iterate: Callable[[Array, Array], None] | None = None
                   ) -> tuple[Array, Array]:
    """Coordinate ascent along each signal direction independently.

    Returns (beta, points) where beta is (n, k) final offsets and points the
    flattened (n*k, d) perturbed inputs.
    """
    dirs = tm.directions
    n = x.shape[0]
    k = dirs.shape[0]
    step = cfg.resolved_step(tm.eps)
    beta = rng.uniform(-tm.eps, tm.eps, size=(n, k))
    y_rep = np.repeat(y, k)
    for _ in range(cfg.steps):
        points = (x[:, None, :] + beta[..., None] * dirs).reshape(n * k, -1)
        if on_iterate is not None:
            on_iterate(beta, points)
        g = input_gradient(net, points, y_rep).reshape(n, k, -1)
        beta = np.clip(beta + step * np.sign(np.einsum("nkd,kd->nk", g, dirs)),
                       -tm.eps, tm.eps)
    points = (x[:, None, :] + beta[..., None] * dirs).reshape(n * k, -1)
    return beta, points


def pgd_attack(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
               cfg: AttackConfig) -> Array:
    """Best perturbation found by PGD with restarts, judged by the loss.

    The zero perturbation is always a candidate, so the result is never worse
    than no attack. Restart r draws from the substream (cfg.seed, r), so
    growing `restarts` only adds candidates.
    """
    single = np.ndim(x) == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y1 = np.atleast_1d(y)
    n = x2.shape[0]
    best_delta = np.zeros_like(x2)
    best_loss = cross_entropy(net.forward(x2), y1)
    for r in range(cfg.restarts):
        rng = cfg.restart_rng(r)
        if tm.kind == "signal":
            beta, points = _signal_ascent(net, x2, y1, tm, cfg, rng)
            k = tm.directions.shape[0]
            losses = cross_entropy(net.forward(points), np.repeat(y1, k)).reshape(n, k)
            pick = losses.argmax(axis=1)
            cand = beta[np.arange(n), pick][:, None] * tm.directions[pick]
            cand_loss = losses[np.arange(n), pick]
        else:
            cand = _ball_ascent(net, x2, y1, tm, cfg, rng)
            cand_loss = cross_entropy(net.forward(x2 + cand), y1)
        better = cand_loss > best_loss
        best_delta[better] = cand[better]
        best_loss = np.maximum(best_loss, cand_loss)
    return best_delta[0] if single else best_delta


def _pgd_vulnerable(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
                    cfg: AttackConfig) -> Array:
    """Boolean flags: some PGD iterate (any restart, any step, or delta = 0)
    misclassifies the point.

    Checks every iterate rather than only restart finals, and drops a point
    from the working set once it is flagged; both only strengthen the attack,
    and flags still grow monotonically with the restart count.
    """
    n = x.shape[0]
    flags = class_margin(net.forward(x), y) <= 0
    for r in range(cfg.restarts):
        rng = cfg.restart_rng(r)
        active = np.flatnonzero(~flags)
        if active.size == 0:
            break
        xa, ya = x[active], y[active]
        if tm.kind == "signal":
            k = tm.directions.shape[0]

            def check(beta, points, active=active, ya=ya, k=k):
                m = class_margin(net.forward(points), np.repeat(ya, k)).reshape(-1, k)
                hit = (m <= 0).any(axis=1)
                flags[active[hit]] = True

            beta, points = _signal_ascent(net, xa, ya, tm, cfg, rng, on_iterate=check)
            check(beta, points)
        else:

            def check(delta, active=active, xa=xa, ya=ya):
                m = class_margin(net.forward(xa + delta), ya)
                flags[active[m <= 0]] = True

            delta = _ball_ascent(net, xa, ya, tm, cfg, rng, on_iterate=check)
            check(delta)
    return flags


def _segment_candidates(net: DenseNet, x: Array, tm: ThreatModel,
                        include_midpoints: bool) -> Array:
    """Offsets t to test along each direction, shape (n, k, n_cand).

    For one-hidden-layer networks: every ReLU crossing inside (-eps, eps)
    plus the endpoints (the restriction is affine between crossings, so
    margin minima and loss maxima sit on these points); midpoints of
    consecutive candidates are added for the classification verdict. Deeper
    networks fall back to a dense grid.
    """
    dirs = tm.directions
    n = x.shape[0]
    k = dirs.shape[0]
    eps = tm.eps
    if net.depth != 2:
        grid = np.linspace(-eps, eps, _FALLBACK_GRID)
        return np.broadcast_to(grid, (n, k, grid.size))
    w1, b1 = net.layers[0].w, net.layers[0].b
    a0 = x @ w1.T + b1                                        # (n, m)
    slope = dirs @ w1.T                                       # (k, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -a0[:, None, :] / slope[None, :, :]               # (n, k, m)
    inside = np.isfinite(t) & (np.abs(t) < eps)
    t = np.where(inside, t, 0.0)                              # harmless duplicate of 0
    ends = np.broadcast_to(np.array([-eps, 0.0, eps]), (n, k, 3))
    cand = np.sort(np.concatenate([t, ends], axis=2), axis=2)
    if include_midpoints:
        mids = 0.5 * (cand[..., 1:] + cand[..., :-1])
        cand = np.concatenate([cand, mids], axis=2)
    return cand


def _signal_worst(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
                  include_midpoints: bool, chunk: int = 256
                  ) -> tuple[Array, Array]:
    """Exact worst margin over the whole signal-aligned set per example.

    Returns (margins, deltas): the smallest achievable margin and an offset
    attaining it. Exact for one-hidden-layer networks; dense-grid otherwise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    dirs = tm.directions
    n = x.shape[0]
    k = dirs.shape[0]
    margins = np.empty(n)
    deltas = np.empty_like(x)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        xc, yc = x[sl], y[sl]
        cand = _segment_candidates(net, xc, tm, include_midpoints)
        nc = cand.shape[2]
        pts = xc[:, None, None, :] + cand[..., None] * dirs[None, :, None, :]
        logits = net.forward(pts.reshape(-1, x.shape[1]))
        m = class_margin(logits, np.repeat(yc, k * nc)).reshape(-1, k, nc)
        flat = m.reshape(len(yc), k * nc)
        pick = flat.argmin(axis=1)
        margins[sl] = flat[np.arange(len(yc)), pick]
        di, ti = np.unravel_index(pick, (k, nc))
        deltas[sl] = cand[np.arange(len(yc)), di, ti][:, None] * dirs[di]
    return margins, deltas


def line_search_attack(net: DenseNet, x: Array, y: int, tm: ThreatModel
                       ) -> tuple[bool, Array | None]:
    """Exact verdict for one input under the signal-aligned threat model.

    Returns (misclassified, witness): the witness is a perturbation in the
    set achieving margin <= 0, or None when every point of the set is
    classified correctly. Exact for one-hidden-layer networks; deeper
    networks are scanned on a dense grid, making "misclassified" a sound
    but possibly incomplete verdict.
    """
    if tm.kind != "signal":
        raise ValueError("line search applies to the signal-aligned threat model")
    margins, deltas = _signal_worst(net, np.atleast_2d(x), np.atleast_1d(y), tm,
                                    include_midpoints=True)
    if margins[0] <= 0:
        return True, deltas[0]
    return False, None


def adv_train(net: DenseNet, data: LabeledSet, tm: ThreatModel, cfg: TrainConfig,
              rng: np.random.Generator, attack_cfg: AttackConfig | None = None,
              epoch_hook: Callable[[DenseNet], float] | None = None) -> TrainTrace:
    """Adversarial training: worst-case examples per batch, then a plain
    gradient step at those points; mutates `net` in place.

    Ball threats use PGD with `attack_cfg` (default 10 steps, 1 restart); the
    signal-aligned threat uses the exact line-search maximizer. The attack
    draws from a substream split off `rng` so the shuffling stream is shared
    with the other trainers.
    """
    if attack_cfg is None:
        attack_cfg = AttackConfig(steps=10, restarts=1)
    # Only consume the stream when PGD will actually run, so eps = 0 (and the
    # deterministic signal maximizer) shuffle batches exactly like train_standard.
    needs_rng = tm.eps > 0 and tm.kind != "signal"
    attack_root = int(rng.integers(2 ** 31)) if needs_rng else 0
    counter = [0]

    def grad_fn(net_, xb, yb, _eps):
        if tm.eps == 0:
            return backward(net_, xb, yb)
        if tm.kind == "signal":
            _, delta = _signal_worst(net_, xb, yb, tm, include_midpoints=False)
        else:
            batch_cfg = replace(attack_cfg, seed=(attack_root, counter[0]))
            counter[0] += 1
            delta = pgd_attack(net_, xb, yb, tm, batch_cfg)
        return backward(net_, xb + delta, yb)

    return run_sgd(net, data, cfg, rng, grad_fn, epoch_hook=epoch_hook)


def evaluate(net: DenseNet, data: LabeledSet, tm: ThreatModel, mode: str = "pgd",
             attack_cfg: AttackConfig | None = None) -> dict[str, float]:
    """Standard error plus the robust (or certified) error for one mode.

    Modes: "pgd" (attack lower bound), "exact-line-search" (signal-aligned
    only; exact for one-hidden-layer networks), "certified-coap" and
    "certified-ibp" (provable upper bounds: one minus the certified
    fraction). A point counts as misclassified when its margin is <= 0.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    std = float((class_margin(net.forward(data.x), data.y) <= 0).mean())
    if mode == "pgd":
        cfg = attack_cfg if attack_cfg is not None else AttackConfig()
        robust = float(_pgd_vulnerable(net, data.x, data.y, tm, cfg).mean())
    elif mode == "exact-line-search":
        if tm.kind != "signal":
            raise ValueError("exact evaluation needs the signal-aligned threat model")
        margins, _ = _signal_worst(net, data.x, data.y, tm, include_midpoints=True)
        robust = float((margins <= 0).mean())
    elif mode == "certified-coap":
        from .dual import coap_certified_margin
        robust = float((coap_certified_margin(net, data.x, data.y, tm) <= 0).mean())
    else:
        from .bounds import ibp_certified_margin
        robust = float((ibp_certified_margin(net, data.x, data.y, tm) <= 0).mean())
    return {"standard_error": std, "robust_error": robust}
