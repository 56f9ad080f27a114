"""Certified margin lower bounds from the dual of the ReLU convex relaxation.

A backward "dual network" pass produces, for any linear objective c on the
logits, a feasible dual value that lower-bounds min over the perturbation set
of c . f(x + delta). Unstable ReLUs (bounds straddling zero) contribute a
slope u/(u-l) and a penalty term; stable ones pass the dual through or kill
it. With the slope choice used here the ReLU pass is linear in the dual
variable, which keeps the whole bound differentiable in the parameters.

The certified robust loss, certification predicate, and the certified
training loop live here as well. Gradients are hand-derived, including the
paths through the bound computation itself.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import softmax

from .bounds import (BoundState, first_layer_bounds, interval_affine,
                     interval_relu)
from .data import LabeledSet
from .nets import (DenseNet, Layer, TrainConfig, TrainTrace, cross_entropy,
                   run_sgd)
from .threat import ThreatModel, support, support_gradient

Array = np.ndarray


@dataclass(frozen=True)
class MarginQuery:
    """Objective vector e_y - e_target: positive value means class y beats target."""

    y: int
    target: int

    def __post_init__(self) -> None:
        if self.y == self.target:
            raise ValueError("query classes must differ")

    def c(self, n_classes: int) -> Array:
        v = np.zeros(n_classes)
        v[self.y] = 1.0
        v[self.target] = -1.0
        return v


@dataclass
class DualState:
    """Dual variables from one backward pass: `nu[i]` sits at affine layer i's
    output, `nu_hat[j]` before hidden ReLU j, `nu_hat_in` at the input."""

    nu: list[Array]
    nu_hat: list[Array]
    nu_hat_in: Array
    objective: Array


def _relu_slopes(lb: Array, ub: Array) -> tuple[Array, Array, Array]:
    """Dual pass-through coefficient per neuron plus dead/unstable masks.

    Dead (ub <= 0) -> 0, active (lb >= 0) -> 1, unstable -> ub/(ub-lb).
    Degenerate lb == ub neurons are stable by the sign of ub.
    """
    dead = ub <= 0
    active = ~dead & (lb >= 0)
    unstable = ~dead & ~active
    denom = np.where(unstable, ub - lb, 1.0)
    slope = np.where(dead, 0.0, np.where(active, 1.0, ub / denom))
    return slope, dead, unstable


def _dual_pass(net: DenseNet, x: Array, c: Array,
               hidden_bounds: list[tuple[Array, Array]], tm: ThreatModel,
               ) -> DualState:
    """Run the backward dual pass for a batch of queries.

    `x` is (n, d); `c` is (n, Q, K), Q query vectors per example. Objective
    comes back as (n, Q). `hidden_bounds` must cover every hidden layer.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    depth = net.depth
    if len(hidden_bounds) != depth - 1:
        raise ValueError("bounds do not cover every hidden layer")
    nu = -np.asarray(c, dtype=np.float64)
    nus: list[Array] = [None] * depth  # type: ignore[list-item]
    nu_hats: list[Array] = [None] * (depth - 1)  # type: ignore[list-item]
    nus[depth - 1] = nu
    obj = -(nu * net.layers[depth - 1].b).sum(axis=-1)
    for j in range(depth - 2, -1, -1):
        nu_hat = nu @ net.layers[j + 1].w
        lb, ub = hidden_bounds[j]
        slope, _, unstable = _relu_slopes(lb, ub)
        nu = slope[:, None, :] * nu_hat
        nu_hats[j] = nu_hat
        nus[j] = nu
        obj += (np.where(unstable, lb, 0.0)[:, None, :] * np.maximum(nu, 0.0)).sum(axis=-1)
        obj += -(nu * net.layers[j].b).sum(axis=-1)
    nu_hat_in = nu @ net.layers[0].w
    obj += -(nu_hat_in * x[:, None, :]).sum(axis=-1) - support(tm, nu_hat_in)
    return DualState(nus, nu_hats, nu_hat_in, obj)


def coap_layer_bounds(net: DenseNet, x: Array, tm: ThreatModel,
                      method: str = "dual") -> BoundState:
    """Pre-activation bounds for every layer, layer by layer.

    The first layer uses the exact support-function bounds. Each deeper layer
    is bounded by running the dual pass with +-unit queries against the
    truncated subnetwork ("dual", the default, tighter) or by interval
    propagation ("ibp", cheaper).
    """
    if method not in ("dual", "ibp"):
        raise ValueError(f"unknown bound method {method!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    lb, ub = first_layer_bounds(tm, x, net.layers[0].w, net.layers[0].b)
    pairs = [(lb, ub)]
    for i in range(1, net.depth):
        if method == "ibp":
            hl, hu = interval_relu(*pairs[-1])
            pairs.append(interval_affine(net.layers[i].w, net.layers[i].b, hl, hu))
            continue
        sub = DenseNet(net.layers[:i + 1])
        m = net.layers[i].w.shape[0]
        eye = np.eye(m)
        queries = np.concatenate([eye, -eye], axis=0)        # (2m, m)
        lo = np.empty((n, m))
        hi = np.empty((n, m))
        # Chunk the batch: the dual pass materializes (chunk, 2m, width) arrays.
        chunk = max(1, 2_000_000 // (2 * m * max(net.widths)))
        for start in range(0, n, chunk):
            sl = slice(start, start + chunk)
            xs = x[sl]
            c = np.broadcast_to(queries, (xs.shape[0],) + queries.shape)
            bounds_sl = [(plb[sl], pub[sl]) for plb, pub in pairs]
            obj = _dual_pass(sub, xs, c, bounds_sl, tm).objective
            lo[sl] = obj[:, :m]
            hi[sl] = -obj[:, m:]
        pairs.append((lo, hi))
    return BoundState(pairs[:-1], pairs[-1])


def dual_bound(net: DenseNet, x: Array, q: MarginQuery, tm: ThreatModel,
               bounds: BoundState | None = None) -> float:
    """Certified lower bound on min over the set of the queried logit margin,
    for a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("dual_bound expects a single input vector")
    if bounds is None:
        bounds = coap_layer_bounds(net, x, tm)
    c = q.c(net.out_dim)[None, None, :]
    state = _dual_pass(net, x[None, :], c, bounds.hidden, tm)
    return float(state.objective[0, 0])


def _other_classes(y: Array, n_classes: int) -> Array:
    """(n, K-1) matrix listing every class except the label, row by row."""
    n = len(y)
    others = np.tile(np.arange(n_classes), (n, 1))
    keep = others != y[:, None]
    return others[keep].reshape(n, n_classes - 1)


def _margin_queries(y: Array, n_classes: int) -> tuple[Array, Array]:
    """Query tensor (n, K-1, K) of e_y - e_j vectors, plus the class order."""
    n = len(y)
    others = _other_classes(y, n_classes)
    c = np.zeros((n, n_classes - 1, n_classes))
    rows = np.arange(n)[:, None]
    qs = np.arange(n_classes - 1)[None, :]
    c[rows, qs, y[:, None]] = 1.0
    c[rows, qs, others] = -1.0
    return c, others


def margin_bound_matrix(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
                        bounds: BoundState | None = None,
                        bound_method: str = "dual") -> Array:
    """(n, K-1) certified margin lower bounds against every non-true class."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    if bounds is None:
        bounds = coap_layer_bounds(net, x, tm, method=bound_method)
    c, _ = _margin_queries(y, net.out_dim)
    return _dual_pass(net, x, c, bounds.hidden, tm).objective


def coap_certified_margin(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
                          bounds: BoundState | None = None,
                          bound_method: str = "dual") -> Array:
    """Per-example certified margin: the worst bound over all rival classes."""
    return margin_bound_matrix(net, x, y, tm, bounds, bound_method).min(axis=1)


def certify(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
            bound_method: str = "dual") -> Array | bool:
    """True where no perturbation in the set can flip the prediction
    (sufficient condition: every rival-class margin bound is positive)."""
    single = np.ndim(x) == 1
    out = coap_certified_margin(net, np.atleast_2d(x), np.atleast_1d(y), tm,
                                bound_method=bound_method) > 0
    return bool(out[0]) if single else out


def _worst_margin_logits(bound_matrix: Array, y: Array, others: Array,
                         n_classes: int) -> Array:
    """Pessimistic logits: zero for the true class, minus the certified margin
    bound for each rival."""
    n = len(y)
    z = np.zeros((n, n_classes))
    rows = np.arange(n)[:, None]
    z[rows, others] = -bound_matrix
    return z


def coap_robust_loss(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
                     bound_method: str = "dual") -> float:
    """Mean cross-entropy on the dual-certified worst-case margins."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    bounds = coap_layer_bounds(net, x, tm, method=bound_method)
    c, others = _margin_queries(y, net.out_dim)
    obj = _dual_pass(net, x, c, bounds.hidden, tm).objective
    z = _worst_margin_logits(obj, y, others, net.out_dim)
    return float(cross_entropy(z, y).mean())


def coap_loss_grad(net: DenseNet, x: Array, y: Array, tm: ThreatModel,
                   bound_method: str = "dual", grad_through_bounds: bool = True,
                   ) -> tuple[float, list[Layer]]:
    """Mean certified robust loss and hand-derived parameter gradients.

    Differentiates the dual pass and, when `grad_through_bounds` is set, the
    bound computation as well: the first-layer support radius always, and the
    interval recursion when `bound_method` is "ibp". Intermediate bounds
    produced by the recursive dual method (depth >= 2) are held fixed in the
    gradient; single-hidden-layer networks have no such bounds, so for them
    the gradient is exact for both methods.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    n = len(y)
    depth = net.depth
    n_classes = net.out_dim

    bounds = coap_layer_bounds(net, x2, tm, method=bound_method)
    c, others = _margin_queries(y, n_classes)
    state = _dual_pass(net, x2, c, bounds.hidden, tm)
    z = _worst_margin_logits(state.objective, y, others, n_classes)
    loss = float(cross_entropy(z, y).mean())

    probs = softmax(z, axis=1)
    rows = np.arange(n)[:, None]
    seed = -probs[rows, others] / n                          # (n, Q): dloss/dbound

    grads = [Layer(np.zeros_like(l.w), np.zeros_like(l.b)) for l in net.layers]
    slopes, unstables, lbs, ubs = [], [], [], []
    for lb, ub in bounds.hidden:
        slope, _, unstable = _relu_slopes(lb, ub)
        slopes.append(slope)
        unstables.append(unstable)
        lbs.append(lb)
        ubs.append(ub)

    # Bias gradients come straight from the -nu . b terms.
    for i in range(depth):
        grads[i].b -= np.einsum("nq,nqm->m", seed, state.nu[i])

    # Adjoint of the dual pass, walking from the input side upward. Every
    # direct occurrence of a dual variable in the objective carries the seed.
    gl = [np.zeros_like(lb) for lb in lbs]
    gu = [np.zeros_like(ub) for ub in ubs]
    sup_grad = support_gradient(tm, state.nu_hat_in)
    lam_hat_in = seed[:, :, None] * (-x2[:, None, :] - sup_grad)
    grads[0].w += np.einsum("nqm,nqd->md", state.nu[0], lam_hat_in)
    lam = lam_hat_in @ net.layers[0].w.T
    for j in range(depth - 1):
        unstable_q = unstables[j][:, None, :]
        lam += seed[:, :, None] * (
            -net.layers[j].b
            + np.where(unstable_q & (state.nu[j] > 0), lbs[j][:, None, :], 0.0))
        gl[j] += np.einsum("nq,nqm->nm", seed,
                           np.where(unstable_q, np.maximum(state.nu[j], 0.0), 0.0))
        lam_hat = slopes[j][:, None, :] * lam
        if grad_through_bounds:
            dd = (lam * state.nu_hat[j]).sum(axis=1)         # slope adjoint, (n, m)
            denom2 = np.where(unstables[j], (ubs[j] - lbs[j]) ** 2, 1.0)
            gl[j] += np.where(unstables[j], dd * ubs[j] / denom2, 0.0)
            gu[j] += np.where(unstables[j], dd * (-lbs[j]) / denom2, 0.0)
        grads[j + 1].w += np.einsum("nqo,nqm->om", state.nu[j + 1], lam_hat)
        if j + 1 < depth - 1:
            lam = lam_hat @ net.layers[j + 1].w.T
    # else: the top dual variable is the constant -c; nothing further to chain.

    if grad_through_bounds and lbs:
        if bound_method == "ibp":
            for j in range(depth - 2, 0, -1):
                w = net.layers[j].w
                lb_in, ub_in = lbs[j - 1], ubs[j - 1]
                hl, hu = interval_relu(lb_in, ub_in)
                pos = w >= 0
                grads[j].w += np.where(pos, gl[j].T @ hl + gu[j].T @ hu,
                                       gl[j].T @ hu + gu[j].T @ hl)
                grads[j].b += (gl[j] + gu[j]).sum(axis=0)
                wp = np.maximum(w, 0.0)
                wn = np.minimum(w, 0.0)
                dhl = gl[j] @ wp + gu[j] @ wn
                dhu = gu[j] @ wp + gl[j] @ wn
                gl[j - 1] += dhl * (lb_in > 0)
                gu[j - 1] += dhu * (ub_in > 0)
        dcenter = gl[0] + gu[0]
        dradius = (gu[0] - gl[0]).sum(axis=0)
        grads[0].w += dcenter.T @ x2
        grads[0].w += dradius[:, None] * support_gradient(tm, net.layers[0].w)
        grads[0].b += dcenter.sum(axis=0)

    return loss, grads


def coap_train(net: DenseNet, data: LabeledSet, tm: ThreatModel, cfg: TrainConfig,
               rng: np.random.Generator,
               epoch_hook: Callable[[DenseNet], float] | None = None,
               bound_method: str = "dual",
               grad_through_bounds: bool = True) -> TrainTrace:
    """Minimize the certified robust loss with the linear budget ramp;
    mutates `net` in place and returns the trace."""

    def grad_fn(net_, xb, yb, eps):
        return coap_loss_grad(net_, xb, yb, replace(tm, eps=eps),
                              bound_method=bound_method,
                              grad_through_bounds=grad_through_bounds)

    return run_sgd(net, data, cfg, rng, grad_fn, epoch_hook=epoch_hook,
                   eps_target=tm.eps)
