"""Interval propagation of pre-activation bounds and the IBP robust objective.

The first hidden layer gets threat-model-specific bounds through the support
function (per-row radius around the clean pre-activation); deeper layers use
the standard box relaxation. Gradients of the IBP robust loss are derived by
hand, differentiating through the bound computation itself.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import softmax

from .data import LabeledSet
from .nets import (DenseNet, Layer, TrainConfig, TrainTrace, cross_entropy,
                   run_sgd)
from .threat import ThreatModel, support, support_gradient

Array = np.ndarray


@dataclass
class BoundState:
    """Pre-activation bounds for a batch: one (lower, upper) pair of (n, width)
    arrays per hidden layer, plus the output-logit interval."""

    hidden: list[tuple[Array, Array]]
    output: tuple[Array, Array]

    def nested_in(self, other: "BoundState", tol: float = 0.0) -> bool:
        """True when every interval of self sits inside the matching one of other."""
        pairs = list(zip(self.hidden, other.hidden)) + [(self.output, other.output)]
        return all(np.all(li >= lo - tol) and np.all(ui <= uo + tol)
                   for (li, ui), (lo, uo) in pairs)


@dataclass
class StabilityPartition:
    """Boolean masks per hidden layer splitting neurons into dead (upper <= 0),
    active (lower >= 0) and unstable (the rest); dead wins the l = u = 0 tie."""

    dead: list[Array]
    active: list[Array]
    unstable: list[Array]

    @classmethod
    def from_bounds(cls, bs: BoundState) -> "StabilityPartition":
        dead, active, unstable = [], [], []
        for lb, ub in bs.hidden:
            d = ub <= 0
            a = ~d & (lb >= 0)
            dead.append(d)
            active.append(a)
            unstable.append(~d & ~a)
        return cls(dead, active, unstable)


def first_layer_bounds(tm: ThreatModel, x: Array, w1: Array, b1: Array
                       ) -> tuple[Array, Array]:
    """Bounds on the first pre-activation over the perturbation set.

    Center w1 x + b1, radius per neuron sup_{delta} |row . delta|, which the
    set's symmetry reduces to the support function of each weight row.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    center = x2 @ w1.T + b1
    radius = support(tm, w1)                     # (m,), broadcast over the batch
    return center - radius, center + radius


def interval_affine(w: Array, b: Array, lb: Array, ub: Array) -> tuple[Array, Array]:
    """Push an interval box through an affine layer (positive/negative weight split)."""
    wp = np.maximum(w, 0.0)
    wn = np.minimum(w, 0.0)
    return lb @ wp.T + ub @ wn.T + b, ub @ wp.T + lb @ wn.T + b


def interval_relu(lb: Array, ub: Array) -> tuple[Array, Array]:
    return np.maximum(lb, 0.0), np.maximum(ub, 0.0)


def ibp_bounds(net: DenseNet, x: Array, tm: ThreatModel) -> BoundState:
    """Box bounds for every pre-activation and the output logits."""
    lb, ub = first_layer_bounds(tm, x, net.layers[0].w, net.layers[0].b)
    hidden = [(lb, ub)]
    for layer in net.layers[1:]:
        hl, hu = interval_relu(lb, ub)
        lb, ub = interval_affine(layer.w, layer.b, hl, hu)
        hidden.append((lb, ub))
    return BoundState(hidden[:-1], hidden[-1])


def unstable_fraction(net: DenseNet, data: LabeledSet, tm: ThreatModel,
                      bound_method: str = "ibp") -> float:
    """Fraction of (hidden neuron, data point) pairs whose bounds straddle zero.

    Uses the closed condition lb <= 0 <= ub. `bound_method` picks how bounds
    are computed: "ibp" (default, comparable across trainers) or "coap".
    """
    if bound_method == "ibp":
        bs = ibp_bounds(net, data.x, tm)
    elif bound_method == "coap":
        from .dual import coap_layer_bounds
        bs = coap_layer_bounds(net, data.x, tm)
    else:
        raise ValueError(f"unknown bound method {bound_method!r}")
    hits = total = 0
    for lb, ub in bs.hidden:
        hits += int(((lb <= 0) & (ub >= 0)).sum())
        total += lb.size
    return hits / total


def _worst_logits(bs: BoundState, y: Array) -> Array:
    """Most pessimistic logit vector: lower bound for the true class, upper
    bounds elsewhere."""
    lb, ub = bs.output
    z = ub.copy()
    idx = np.arange(len(y))
    z[idx, y] = lb[idx, y]
    return z


def ibp_certified_margin(net: DenseNet, x: Array, y: Array, tm: ThreatModel) -> Array:
    """Per-example lower bound on the worst-case margin; > 0 certifies the point."""
    y = np.atleast_1d(y)
    z = _worst_logits(ibp_bounds(net, x, tm), y)
    idx = np.arange(len(y))
    true = z[idx, y]
    rest = z.copy()
    rest[idx, y] = -np.inf
    return true - rest.max(axis=1)


def ibp_robust_loss(net: DenseNet, x: Array, y: Array, tm: ThreatModel) -> float:
    """Mean cross-entropy on the worst-case logits."""
    y = np.atleast_1d(y)
    return float(cross_entropy(_worst_logits(ibp_bounds(net, x, tm), y), y).mean())


def _first_layer_radius_grad(tm: ThreatModel, w1: Array) -> Array:
    """d(radius)/d(w1), row-wise subgradient of the support function."""
    return support_gradient(tm, w1)


def ibp_loss_grad(net: DenseNet, x: Array, y: Array, tm: ThreatModel
                  ) -> tuple[float, list[Layer]]:
    """Mean IBP robust loss and hand-derived parameter gradients.

    Backpropagates through the whole bound computation, including the
    first-layer radius term.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    n = len(y)
    bs = ibp_bounds(net, x2, tm)
    z = _worst_logits(bs, y)
    loss = float(cross_entropy(z, y).mean())

    dz = softmax(z, axis=1)
    idx = np.arange(n)
    dz[idx, y] -= 1.0
    dz /= n
    # Split the logit adjoint back into lower/upper bound adjoints.
    dlb = np.zeros_like(dz)
    dub = dz.copy()
    dlb[idx, y] = dz[idx, y]
    dub[idx, y] = 0.0

    grads = [None] * net.depth  # type: ignore[list-item]
    all_bounds = bs.hidden + [bs.output]
    for i in range(net.depth - 1, 0, -1):
        w = net.layers[i].w
        pos = w >= 0
        lb_in, ub_in = all_bounds[i - 1]
        hl, hu = interval_relu(lb_in, ub_in)
        dw = np.where(pos, dlb.T @ hl + dub.T @ hu, dlb.T @ hu + dub.T @ hl)
        db = (dlb + dub).sum(axis=0)
        grads[i] = Layer(dw, db)
        wp = np.maximum(w, 0.0)
        wn = np.minimum(w, 0.0)
        dhl = dlb @ wp + dub @ wn
        dhu = dub @ wp + dlb @ wn
        dlb = dhl * (lb_in > 0)
        dub = dhu * (ub_in > 0)
    dcenter = dlb + dub
    dradius = (dub - dlb).sum(axis=0)            # (m,), radius is input-independent
    dw1 = dcenter.T @ x2 + dradius[:, None] * _first_layer_radius_grad(tm, net.layers[0].w)
    grads[0] = Layer(dw1, dcenter.sum(axis=0))
    return loss, grads


def ibp_train(net: DenseNet, data: LabeledSet, tm: ThreatModel, cfg: TrainConfig,
              rng: np.random.Generator,
              epoch_hook: Callable[[DenseNet], float] | None = None) -> TrainTrace:
    """Minimize the IBP robust loss with the linear budget ramp; mutates `net`."""

    def grad_fn(net_, xb, yb, eps):
        return ibp_loss_grad(net_, xb, yb, replace(tm, eps=eps))

    return run_sgd(net, data, cfg, rng, grad_fn, epoch_hook=epoch_hook,
                   eps_target=tm.eps)
