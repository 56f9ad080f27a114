"""Full-scale acceptance suite.

Runs the three headline ablation sweeps at protocol scale (spheres d=10,
n=500, 10^4 test points, MLP with 100 hidden units, 150 epochs, learning
rate swept over {0.1, 0.01, 0.001} per cell, 5 seeds) and checks one
numbered claim per test: the gap trends and anchors (C1-C3), the
unstable-neuron trend (C4), the error-ordering sandwich (C5), sampled
bound containment (C6), the closed-form verification report (C7a-C7e),
the structural reductions (C8), and bit-level determinism (C9).

The sweeps take a few hours on one core; everything else is minutes.
Deselect with `-m "not acceptance"` for a quick run.
"""

from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

import robustlab as rl
from robustlab import theory
from robustlab.experiments import (RunConfig, _cell, _row, ablate,
                                   gap_trend_correlation, run_seed)

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
EPS_VALUES = (1.0, 2.0, 3.0, 4.0, 5.0)
GAMMA_VALUES = (8.0, 12.0, 16.0, 20.0, 28.0)
K_VALUES = (1.0, 3.0, 5.0, 8.0, 10.0)


def sweep_config(threat: rl.ThreatSpec) -> RunConfig:
    """Protocol-scale spheres run: d=10, margin 20, 500 train / 10^4 test."""
    return RunConfig(dataset="spheres", threat=threat,
                     attack=rl.AttackConfig(steps=10, restarts=1),
                     eval_attack=rl.AttackConfig(steps=100, restarts=5),
                     seeds=SEEDS, hidden=(100,))


@pytest.fixture(scope="session")
def eps_sweep():
    return ablate(sweep_config(rl.ThreatSpec("l2", 5.0)), "epsilon", EPS_VALUES)


@pytest.fixture(scope="session")
def gamma_sweep():
    return ablate(sweep_config(rl.ThreatSpec("l2", 4.0)), "gamma", GAMMA_VALUES)


@pytest.fixture(scope="session")
def k_sweep():
    return ablate(sweep_config(rl.ThreatSpec("signal", 5.0, k=1)), "k", K_VALUES)


@pytest.fixture(scope="session")
def theory_report():
    return {r.name: r for r in theory.verification_report(quick=False, seed=0)}


def check(tag: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
    assert ok, f"{tag}: {detail}"


def gap_series(result, values, key):
    """COAP minus AT mean gap per sweep value, with the pooled standard error."""
    gaps, ses = [], []
    for v in values:
        gaps.append(result.summary_value(v, "coap", key)
                    - result.summary_value(v, "at", key))
        ses.append(np.hypot(result.summary_value(v, "coap", key + "_se"),
                            result.summary_value(v, "at", key + "_se")))
    return np.asarray(gaps), np.asarray(ses)


def se_drops(gaps, ses):
    """Steps where the gap falls by more than one pooled standard error."""
    return [i for i in range(len(gaps) - 1)
            if gaps[i + 1] < gaps[i] - np.hypot(ses[i], ses[i + 1])]


def fmt(arr) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in arr) + "]"


def test_c1_epsilon_sweep_robust_gap(eps_sweep):
    gaps, ses = gap_series(eps_sweep, EPS_VALUES, "rob_err_pgd")
    drops = se_drops(gaps, ses)
    anchor = gaps[-1] >= 0.10
    check("C1 epsilon sweep robust gap",
          not drops and anchor,
          f"coap-at robust gap over eps {EPS_VALUES}: {fmt(gaps)} "
          f"(se {fmt(ses)}); drops beyond pooled se at steps {drops}; "
          f"gap at eps=5 is {gaps[-1]:.4f}, need >= 0.10")


def test_c2_gamma_sweep_gaps_grow_as_margin_shrinks(gamma_sweep):
    order = sorted(GAMMA_VALUES, reverse=True)
    rob, rob_se = gap_series(gamma_sweep, order, "rob_err_pgd")
    std, std_se = gap_series(gamma_sweep, order, "std_err")
    rob_drops = se_drops(rob, rob_se)
    std_drops = se_drops(std, std_se)
    anchors = std[-1] >= 0.15 and rob[-1] >= 0.15
    check("C2 gamma sweep gaps grow as the margin shrinks",
          not rob_drops and not std_drops and anchors,
          f"gamma descending {order}: std gap {fmt(std)} (drops {std_drops}), "
          f"robust gap {fmt(rob)} (drops {rob_drops}); at gamma=8 std gap "
          f"{std[-1]:.4f} and robust gap {rob[-1]:.4f}, both need >= 0.15")


def test_c3_alignment_sweep_exact_robust_gap(k_sweep):
    rob, rob_se = gap_series(k_sweep, K_VALUES, "rob_err_exact")
    std, std_se = gap_series(k_sweep, K_VALUES, "std_err")
    rob_drops = se_drops(rob, rob_se)
    std_drops = se_drops(std, std_se)
    anchor = rob[-1] >= 0.20
    check("C3 alignment sweep exact robust gap",
          not rob_drops and not std_drops and anchor,
          f"k {K_VALUES}: std gap {fmt(std)} (drops {std_drops}), exact "
          f"robust gap {fmt(rob)} (drops {rob_drops}); gap at k=10 is "
          f"{rob[-1]:.4f}, need >= 0.20")


def test_c4_unstable_totals_track_each_axis(eps_sweep, gamma_sweep, k_sweep):
    rho_eps = gap_trend_correlation(eps_sweep)
    rho_k = gap_trend_correlation(k_sweep)
    rho_gamma = gap_trend_correlation(gamma_sweep, transform=lambda g: 1.0 / g)
    worst = min(rho_eps, rho_k, rho_gamma)
    check("C4 unstable-neuron totals grow with eps, k, and 1/gamma",
          worst >= 0.9,
          f"spearman(total unstable, axis) eps {rho_eps:.3f}, k {rho_k:.3f}, "
          f"1/gamma {rho_gamma:.3f}; all need >= 0.9")


def test_c5_error_ordering_has_zero_violations(eps_sweep, gamma_sweep, k_sweep):
    bad = []
    n_rows = 0
    for result in (eps_sweep, gamma_sweep, k_sweep):
        for row in result.rows:
            n_rows += 1
            chain = [(name, row[col]) for name, col in
                     (("std", "std_err"), ("pgd", "rob_err_pgd"),
                      ("exact", "rob_err_exact"), ("cert-coap", "cert_err"),
                      ("cert-ibp", "cert_err_ibp"))
                     if row[col] is not None]
            for (na, va), (nb, vb) in zip(chain, chain[1:]):
                if vb < va - 1e-12:
                    bad.append(f"{result.axis}={row['axis_value']} seed="
                               f"{row['seed']} {row['trainer']}: "
                               f"{nb}={vb:.4f} < {na}={va:.4f}")
    check("C5 error ordering std <= pgd <= exact <= cert-coap <= cert-ibp",
          not bad,
          f"{len(bad)} violations over {n_rows} trained networks"
          + ("" if not bad else "; first: " + bad[0]))


def test_sweep_grids_are_complete(eps_sweep, gamma_sweep, k_sweep):
    for result, values in ((eps_sweep, EPS_VALUES), (gamma_sweep, GAMMA_VALUES),
                           (k_sweep, K_VALUES)):
        assert len(result.rows) == len(values) * len(SEEDS) * 2
        got = {(r["axis_value"], r["seed"], r["trainer"]) for r in result.rows}
        assert len(got) == len(result.rows)


def sample_set(tm, d, n, rng):
    if tm.kind == "linf":
        return rng.uniform(-tm.eps, tm.eps, size=(n, d))
    if tm.kind == "l2":
        z = rng.normal(size=(n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return tm.eps * z * rng.uniform(0, 1, size=(n, 1)) ** (1 / d)
    which = rng.integers(0, tm.k, size=n)
    beta = rng.uniform(-tm.eps, tm.eps, size=n)
    return beta[:, None] * tm.directions[which]


def test_c6_sampled_points_respect_every_bound():
    shapes = ((6, 8, 2), (6, 10, 3), (5, 7, 6, 2), (7, 9, 4))
    rng = np.random.default_rng(2024)
    n_nets, n_inputs, n_samples = 100, 10, 1000
    tol = 1e-9
    violations = 0
    checked = 0
    for i in range(n_nets):
        widths = shapes[i % len(shapes)]
        d = widths[0]
        net = rl.init_net(widths, np.random.default_rng(500 + i))
        for kind in ("linf", "l2", "signal"):
            if kind == "linf":
                tm = rl.ThreatModel.linf(0.1)
            elif kind == "l2":
                tm = rl.ThreatModel.l2(0.5)
            else:
                tm = rl.ThreatModel.signal(
                    0.8, rl.make_directions(d, 3, int(rng.integers(2 ** 31))))
            xs = rng.normal(scale=1.5, size=(n_inputs, d))
            y = np.argmax(net.forward(xs), axis=1)
            ibp = rl.ibp_bounds(net, xs, tm)
            coap = rl.coap_layer_bounds(net, xs, tm)
            bound_mat = rl.margin_bound_matrix(net, xs, y, tm)
            for j in range(n_inputs):
                deltas = sample_set(tm, d, n_samples, rng)
                pre, _ = net.forward_full(xs[j] + deltas)
                for state in (ibp, coap):
                    layers = state.hidden + [state.output]
                    for p, (lb, ub) in zip(pre, layers):
                        checked += 1
                        if (p < lb[j] - tol).any() or (p > ub[j] + tol).any():
                            violations += 1
                margins = rl.class_margin(pre[-1], np.full(n_samples, y[j]))
                checked += 1
                if margins.min() < bound_mat[j].min() - tol:
                    violations += 1
    check("C6 sampled perturbations stay inside certified bounds",
          violations == 0,
          f"{violations} violations over {checked} containment checks "
          f"({n_nets} nets x {n_inputs} inputs x {n_samples} samples x 3 threats)")


def test_c7a_closed_form_gradients_match_finite_differences(theory_report):
    at = theory_report["adversarial-gradient-fd"]
    co = theory_report["relaxed-gradient-fd"]
    check("C7a adversarial and relaxed gradients vs finite differences",
          at.passed and co.passed, f"{at.detail}; {co.detail}")


def test_c7b_robust_risk_matches_monte_carlo(theory_report):
    r = theory_report["robust-risk-monte-carlo"]
    check("C7b closed-form robust risk vs monte carlo", r.passed, r.detail)


def test_c7c_tail_function_negative_beyond_threshold(theory_report):
    r = theory_report["f-negativity-above-threshold"]
    check("C7c tail function negative on [r_star, 10 r_star]", r.passed, r.detail)


def test_c7d_gaussian_cdf_difference_bound_holds(theory_report):
    r = theory_report["gaussian-cdf-difference-bound"]
    check("C7d gaussian cdf difference bound", r.passed, r.detail)


def test_c7e_one_step_separation_for_qualifying_configs(theory_report):
    r = theory_report["one-step-separation"]
    check("C7e one-step separation at rates 0.01, 0.1, 1.0", r.passed, r.detail)


def test_c8_reductions_to_closed_forms():
    rng = np.random.default_rng(8)
    # Single-direction first-axis threat: bounds must equal center +- eps|W e1|.
    worst_first = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 8))
        m = int(rng.integers(1, 6))
        w = rng.normal(size=(m, d))
        b = rng.normal(size=m)
        x = rng.normal(size=(1, d))
        eps = float(rng.uniform(0.1, 2.0))
        tm = rl.ThreatModel.signal(eps, np.eye(d)[:1])
        lb, ub = rl.first_layer_bounds(tm, x, w, b)
        center = x[0] @ w.T + b
        rad = eps * np.abs(w[:, 0])
        assert_allclose(lb[0], center - rad, rtol=1e-12, atol=1e-12)
        assert_allclose(ub[0], center + rad, rtol=1e-12, atol=1e-12)
        worst_first = max(worst_first,
                          float(np.max(np.abs(lb[0] - (center - rad)))),
                          float(np.max(np.abs(ub[0] - (center + rad)))))

    # Dual bound on the two-logit one-neuron network equals the case values.
    worst_dual = 0.0
    regimes = {"dead": 0, "active": 0, "unstable": 0}
    for _ in range(300):
        d = int(rng.integers(2, 5))
        theta = rng.normal(size=d)
        theta[0] = abs(theta[0]) + 0.05
        cfg = theory.OneNeuronConfig(
            theta=theta, a=float(rng.uniform(0.2, 2.0)),
            b=float(-rng.uniform(0.1, 2.0)), gamma=2.0, sigma=1.0,
            epsilon=float(rng.uniform(0.1, 1.5)))
        x = rng.normal(scale=2.0, size=d)
        label = 1 if rng.uniform() < 0.5 else -1
        lo, hi = theory.preactivation_interval(cfg, x)
        regimes["dead" if hi <= 0 else "active" if lo >= 0 else "unstable"] += 1
        net = rl.DenseNet([rl.Layer(cfg.theta[None, :], np.zeros(1)),
                           rl.Layer(np.array([[0.0], [cfg.a]]),
                                    np.array([0.0, cfg.b]))])
        q = rl.MarginQuery(1, 0) if label > 0 else rl.MarginQuery(0, 1)
        tm = rl.ThreatModel.signal(cfg.epsilon, np.eye(d)[:1])
        got = rl.dual_bound(net, x, q, tm)
        want = theory.coap_objective(cfg, x, label)
        assert_allclose(got, want, rtol=1e-12, atol=1e-12)
        worst_dual = max(worst_dual, abs(got - want))
    assert min(regimes.values()) > 10

    # Zero budget: every robust loss collapses to plain cross entropy.
    worst_zero = 0.0
    net = rl.init_net((5, 8, 3), np.random.default_rng(88))
    xs = rng.normal(size=(12, 5))
    y = rng.integers(0, 3, size=12)
    ce = float(rl.cross_entropy(net.forward(xs), y).mean())
    for kind in ("linf", "l2", "signal"):
        if kind == "signal":
            tm = rl.ThreatModel.signal(0.0, np.eye(5)[:2])
        else:
            tm = getattr(rl.ThreatModel, kind)(0.0)
        ibp = rl.ibp_robust_loss(net, xs, y, tm)
        coap = rl.coap_robust_loss(net, xs, y, tm)
        delta = rl.pgd_attack(net, xs, y, tm,
                              rl.AttackConfig(steps=3, restarts=1, seed=0))
        adv = float(rl.cross_entropy(net.forward(xs + delta), y).mean())
        for got in (ibp, coap, adv):
            assert abs(got - ce) <= 1e-9
            worst_zero = max(worst_zero, abs(got - ce))

    check("C8 structural reductions",
          True,
          f"first-layer closed form residual {worst_first:.2e} (tol 1e-12); "
          f"one-neuron dual residual {worst_dual:.2e} over 300 configs "
          f"({regimes}); zero-budget loss collapse residual {worst_zero:.2e} "
          f"(tol 1e-9)")


def test_c9_same_seed_rerun_is_bit_identical():
    diffs = []
    for trainer in ("at", "coap"):
        cfg = replace(sweep_config(rl.ThreatSpec("l2", 3.0)), trainer=trainer)
        lines = []
        for _ in range(2):
            sr, _ = run_seed(cfg, 0)
            row = _row(3.0, trainer, sr)
            lines.append(",".join("" if row[c] is None else _cell(row[c])
                                  for c in ("axis_value", "seed", "trainer",
                                            "std_err", "rob_err_pgd",
                                            "rob_err_exact", "cert_err",
                                            "total_unstable")))
        if lines[0] != lines[1]:
            diffs.append(f"{trainer}: {lines[0]} != {lines[1]}")
    check("C9 same-seed reruns emit bit-identical rows",
          not diffs,
          "two full-scale trainings per trainer, rows compared excluding "
          "wall time" + ("" if not diffs else "; " + "; ".join(diffs)))
