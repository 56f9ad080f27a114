"""Shared fixtures and finite-difference helpers for the test suite."""

import numpy as np
import pytest

import robustlab as rl


@pytest.fixture
def make_net():
    """Factory for randomly initialized dense nets with a fixed seed."""

    def _make(widths=(4, 6, 2), seed=0):
        return rl.init_net(widths, np.random.default_rng(seed))

    return _make


@pytest.fixture
def make_threat():
    """Factory for threat models; signal directions come from `dir_seed`."""

    def _make(kind, eps, d, k=2, dir_seed=7):
        if kind == "linf":
            return rl.ThreatModel.linf(eps)
        if kind == "l2":
            return rl.ThreatModel.l2(eps)
        return rl.ThreatModel.signal(eps, rl.make_directions(d, k, dir_seed))

    return _make


@pytest.fixture
def tiny_spheres():
    p = rl.SpheresParams(d=5, r_inner=2.0, r_outer=6.0, n_train=40, seed=3)
    return rl.sample_spheres(p, "train")


def fd_param_grad(loss_fn, net, h=1e-6):
    """Central finite differences of a scalar loss over every net parameter.

    Returns gradients shaped like ``net.layers``. O(P) loss evaluations, so
    keep the nets tiny.
    """
    grads = []
    for layer in net.layers:
        gw = np.zeros_like(layer.w)
        gb = np.zeros_like(layer.b)
        for idx in np.ndindex(layer.w.shape):
            orig = layer.w[idx]
            layer.w[idx] = orig + h
            hi = loss_fn(net)
            layer.w[idx] = orig - h
            lo = loss_fn(net)
            layer.w[idx] = orig
            gw[idx] = (hi - lo) / (2 * h)
        for idx in np.ndindex(layer.b.shape):
            orig = layer.b[idx]
            layer.b[idx] = orig + h
            hi = loss_fn(net)
            layer.b[idx] = orig - h
            lo = loss_fn(net)
            layer.b[idx] = orig
            gb[idx] = (hi - lo) / (2 * h)
        grads.append(rl.Layer(gw, gb))
    return grads


def flat_grads(grads):
    return np.concatenate([np.concatenate([g.w.ravel(), g.b.ravel()]) for g in grads])


def rel_err(got, want):
    got, want = np.asarray(got, float), np.asarray(want, float)
    scale = max(np.linalg.norm(want), 1e-12)
    return np.linalg.norm(got - want) / scale


@pytest.fixture
def grad_check():
    """Compare an analytic parameter gradient against finite differences."""

    def _check(loss_fn, grad_fn, net, tol=1e-5):
        _, grads = grad_fn(net)
        fd = fd_param_grad(loss_fn, net)
        err = rel_err(flat_grads(grads), flat_grads(fd))
        assert err < tol, f"gradient mismatch: rel err {err:.3e}"
        return err

    return _check
