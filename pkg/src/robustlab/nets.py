"""Dense ReLU networks with hand-rolled backprop and SGD-momentum training.

Weights are float64 numpy arrays; a network is just a list of affine layers
with ReLU between them (none after the last). Gradients are derived by hand
so the certified-training modules can reuse the same machinery without an
autodiff dependency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .data import LabeledSet

Array = np.ndarray


@dataclass
class Layer:
    """One affine layer: `w` has shape (fan_out, fan_in), `b` shape (fan_out,).

    Also used as the container for parameter gradients and momentum buffers.
    """

    w: Array
    b: Array

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.w.shape}, {self.b.shape}")

    def copy(self) -> "Layer":
        return Layer(self.w.copy(), self.b.copy())


@dataclass
class DenseNet:
    """Feed-forward ReLU network."""

    layers: list[Layer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("need at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.w.shape[1] != a.w.shape[0]:
                raise ValueError("layer widths do not chain")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def widths(self) -> list[int]:
        """Layer output widths, hidden layers then logits."""
        return [layer.w.shape[0] for layer in self.layers]

    def copy(self) -> "DenseNet":
        return DenseNet([layer.copy() for layer in self.layers])

    def forward(self, x: Array) -> Array:
        """Logits for a single input (d,) or a batch (n, d)."""
        single = np.ndim(x) == 1
        z = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for i, layer in enumerate(self.layers):
            z = z @ layer.w.T + layer.b
            if i < len(self.layers) - 1:
                z = np.maximum(z, 0.0)
        return z[0] if single else z

    def forward_full(self, x: Array) -> tuple[list[Array], list[Array]]:
        """Forward pass keeping intermediates for backprop.

        Returns (preacts, acts): `preacts[i]` is the pre-activation of layer i,
        `acts[i]` the input fed to layer i (`acts[0]` is the input batch).
        """
        z = np.atleast_2d(np.asarray(x, dtype=np.float64))
        acts = [z]
        preacts = []
        for i, layer in enumerate(self.layers):
            a = z @ layer.w.T + layer.b
            preacts.append(a)
            if i < len(self.layers) - 1:
                z = np.maximum(a, 0.0)
                acts.append(z)
        return preacts, acts

    def save(self, path: str | Path) -> None:
        doc = {"layers": [{"w": layer.w.tolist(), "b": layer.b.tolist()}
                          for layer in self.layers]}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "DenseNet":
        doc = json.loads(Path(path).read_text())
        return cls([Layer(np.asarray(entry["w"], dtype=np.float64),
                          np.asarray(entry["b"], dtype=np.float64))
                    for entry in doc["layers"]])


def init_net(widths: Sequence[int], rng: np.random.Generator) -> DenseNet:
    """Fresh network with uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights and biases.

    `widths` lists the input dimension followed by every layer's output width,
    e.g. (10, 100, 2) for one hidden layer of 100 units on 10-d inputs.
    """
    if len(widths) < 2:
        raise ValueError("widths must contain input and output dimensions")
    layers = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(Layer(rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                            rng.uniform(-bound, bound, size=fan_out)))
    return DenseNet(layers)


def cross_entropy(logits: Array, y: Array) -> Array:
    """Per-example softmax cross-entropy, shape (n,)."""
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(y)
    return logsumexp(logits, axis=1) - logits[np.arange(len(y)), y]


def class_margin(logits: Array, y: Array) -> Array:
    """Per-example margin: true-class logit minus the best other logit.

    A point counts as misclassified when the margin is <= 0 (ties go against
    the classifier, which keeps attack/certificate comparisons consistent).
    """
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(y)
    idx = np.arange(len(y))
    true = logits[idx, y]
    rest = logits.copy()
    rest[idx, y] = -np.inf
    return true - rest.max(axis=1)


def _xent_delta(logits: Array, y: Array) -> Array:
    """d(per-example CE)/d(logits): softmax minus one-hot."""
    delta = softmax(logits, axis=1)
    delta[np.arange(len(y)), y] -= 1.0
    return delta


def backward(net: DenseNet, x: Array, y: Array) -> tuple[float, list[Layer]]:
    """Mean cross-entropy loss and its parameter gradients.

    Returns (loss, grads) where grads mirrors net.layers with matching shapes.
    """
    y = np.atleast_1d(y)
    preacts, acts = net.forward_full(x)
    logits = preacts[-1]
    loss = float(cross_entropy(logits, y).mean())
    delta = _xent_delta(logits, y) / len(y)
    grads: list[Layer] = [None] * net.depth  # type: ignore[list-item]
    for i in range(net.depth - 1, -1, -1):
        grads[i] = Layer(delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ net.layers[i].w) * (preacts[i - 1] > 0)
    return loss, grads


def input_gradient(net: DenseNet, x: Array, y: Array) -> Array:
    """Per-example gradient of the (unreduced) cross-entropy w.r.t. the input."""
    single = np.ndim(x) == 1
    y = np.atleast_1d(y)
    preacts, _ = net.forward_full(x)
    delta = _xent_delta(preacts[-1], y)
    for i in range(net.depth - 1, 0, -1):
        delta = (delta @ net.layers[i].w) * (preacts[i - 1] > 0)
    g = delta @ net.layers[0].w
    return g[0] if single else g


def zero_grads(net: DenseNet) -> list[Layer]:
    return [Layer(np.zeros_like(l.w), np.zeros_like(l.b)) for l in net.layers]


def sgd_step(net: DenseNet, grads: list[Layer], velocity: list[Layer],
             lr: float, momentum: float) -> None:
    """In-place heavy-ball update: v <- momentum*v + g; theta <- theta - lr*v."""
    for layer, g, v in zip(net.layers, grads, velocity):
        v.w *= momentum
        v.w += g.w
        v.b *= momentum
        v.b += g.b
        layer.w -= lr * v.w
        layer.b -= lr * v.b


@dataclass
class TrainConfig:
    """Optimizer and schedule settings shared by all trainers.

    `ramp_start`/`ramp_epochs` describe the linear perturbation-budget ramp
    used by the certified trainers: the effective budget grows linearly from
    `ramp_start` at epoch 0 to the target over `ramp_epochs` epochs.
    """

    lr: float = 0.01
    momentum: float = 0.95
    epochs: int = 150
    batch_size: int = 64
    ramp_start: float = 0.01
    ramp_epochs: int = 3

    def eps_at(self, epoch: int, target: float) -> float:
        if self.ramp_epochs <= 0 or epoch >= self.ramp_epochs or target <= self.ramp_start:
            return target
        frac = epoch / self.ramp_epochs
        return self.ramp_start + frac * (target - self.ramp_start)


@dataclass
class TrainTrace:
    """Per-epoch training record."""

    loss: list[float] = field(default_factory=list)
    unstable: list[float] = field(default_factory=list)
    eps: list[float] = field(default_factory=list)

    @property
    def total_unstable(self) -> float:
        return float(sum(self.unstable))


GradFn = Callable[[DenseNet, Array, Array, float | None], tuple[float, list[Layer]]]


def run_sgd(net: DenseNet, data: LabeledSet, cfg: TrainConfig,
            rng: np.random.Generator, grad_fn: GradFn,
            epoch_hook: Callable[[DenseNet], float] | None = None,
            eps_target: float | None = None) -> TrainTrace:
    """Generic epoch loop: shuffled mini-batches (full batch when batch_size >= n),
    SGD with momentum, optional per-epoch metric hook and budget ramp.

    `grad_fn(net, xb, yb, eps)` returns (mean batch loss, gradients); `eps` is
    the ramped budget for this epoch, or None when no target was given.
    Raises RuntimeError if the loss goes non-finite.
    """
    n = len(data)
    velocity = zero_grads(net)
    trace = TrainTrace()
    full_batch = cfg.batch_size >= n
    for epoch in range(cfg.epochs):
        eps = cfg.eps_at(epoch, eps_target) if eps_target is not None else None
        order = np.arange(n) if full_batch else rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = grad_fn(net, data.x[idx], data.y[idx], eps)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch} (non-finite loss)")
            sgd_step(net, grads, velocity, cfg.lr, cfg.momentum)
            losses.append(loss)
        trace.loss.append(float(np.mean(losses)))
        if eps is not None:
            trace.eps.append(eps)
        if epoch_hook is not None:
            trace.unstable.append(float(epoch_hook(net)))
    return trace


def train_standard(net: DenseNet, data: LabeledSet, cfg: TrainConfig,
                   rng: np.random.Generator,
                   epoch_hook: Callable[[DenseNet], float] | None = None) -> TrainTrace:
    """Plain cross-entropy training; mutates `net` in place and returns the trace."""

    def grad_fn(net_, xb, yb, _eps):
        return backward(net_, xb, yb)

    return run_sgd(net, data, cfg, rng, grad_fn, epoch_hook=epoch_hook)
