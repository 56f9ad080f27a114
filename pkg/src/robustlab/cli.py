"""Command line front end: train, evaluate, ablate, theory-verify."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .attacks import EVAL_MODES, evaluate
from .experiments import (RunConfig, ablate, load_config, make_datasets,
                          make_threat, run_seed, write_csv)
from .nets import DenseNet
from .theory import format_report, verification_report


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with RunConfig fields")
    p.add_argument("--dataset", choices=["spheres", "linsep"])
    p.add_argument("--n", type=int, help="training set size")
    p.add_argument("--d", type=int, help="input dimension")
    p.add_argument("--gamma", type=float, help="class separation")
    p.add_argument("--r-inner", dest="r_inner", type=float,
                   help="inner sphere radius (spheres only)")
    p.add_argument("--sigma", type=float, help="noise scale (linsep only)")
    p.add_argument("--threat", choices=["linf", "l2", "signal"])
    p.add_argument("--eps", type=float, help="perturbation budget")
    p.add_argument("--k", type=int, help="signal direction count")
    p.add_argument("--trainer", choices=["standard", "at", "ibp", "coap"])
    p.add_argument("--seeds", help="comma-separated run seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.dataset:
        cfg = replace(cfg, dataset=args.dataset)
    spheres, linsep, threat, train = cfg.spheres, cfg.linsep, cfg.threat, cfg.train
    if args.d is not None:
        spheres = replace(spheres, d=args.d)
        linsep = replace(linsep, d=args.d)
    if args.n is not None:
        spheres = replace(spheres, n_train=args.n)
        linsep = replace(linsep, n=args.n)
    if args.r_inner is not None:
        gap = spheres.r_outer - spheres.r_inner
        spheres = replace(spheres, r_inner=args.r_inner, r_outer=args.r_inner + gap)
    if args.gamma is not None:
        spheres = replace(spheres, r_outer=spheres.r_inner + args.gamma)
        linsep = replace(linsep, gamma=args.gamma)
    if args.sigma is not None:
        linsep = replace(linsep, sigma=args.sigma)
    if args.threat:
        threat = replace(threat, kind=args.threat)
    if args.eps is not None:
        threat = replace(threat, eps=args.eps)
    if args.k is not None:
        threat = replace(threat, k=args.k)
    if args.epochs is not None:
        train = replace(train, epochs=args.epochs)
    if args.lr is not None:
        train = replace(train, lr=args.lr)
    cfg = replace(cfg, spheres=spheres, linsep=linsep, threat=threat, train=train)
    if args.trainer:
        cfg = replace(cfg, trainer=args.trainer)
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
    return cfg


def _model_path(out: str, seed: int, multi: bool) -> Path:
    path = Path(out)
    if not multi:
        return path
    return path.with_name(f"{path.stem}-seed{seed}{path.suffix or '.json'}")


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    multi = len(cfg.seeds) > 1
    for seed in cfg.seeds:
        result, net = run_seed(cfg, seed)
        parts = [f"seed={seed}", f"std_err={result.standard_error:.4f}"]
        parts += [f"{mode}={err:.4f}" for mode, err in result.robust_error.items()]
        parts.append(f"total_unstable={result.total_unstable:.2f}")
        print(" ".join(parts))
        if args.out:
            path = _model_path(args.out, seed, multi)
            net.save(str(path))
            print(f"saved {path}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    net = DenseNet.load(args.model)
    seed = cfg.seeds[0]
    _, test_set = make_datasets(cfg, seed)
    tm = make_threat(cfg, seed)
    modes = args.modes.split(",") if args.modes else list(cfg.modes())
    shown_std = False
    for mode in modes:
        out = evaluate(net, test_set, tm, mode,
                       attack_cfg=replace(cfg.eval_attack, seed=(seed, 4)))
        if not shown_std:
            print(f"standard_error={out['standard_error']:.4f}")
            shown_std = True
        print(f"robust_error[{mode}]={out['robust_error']:.4f}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    values = [float(v) for v in args.values.split(",")]
    trainers = args.trainers.split(",") if args.trainers else ["at", "coap"]
    result = ablate(cfg, args.axis, values, trainers=trainers)
    write_csv(result.rows, args.out)
    print(f"wrote {len(result.rows)} rows to {args.out}")
    for entry in result.summary:
        metric = "rob_err_exact" if entry["rob_err_exact"] is not None else "rob_err_pgd"
        print(f"{args.axis}={entry['axis_value']} trainer={entry['trainer']} "
              f"{metric}={entry[metric]:.4f}+-{entry[metric + '_se']:.4f} "
              f"cert_err={entry['cert_err']:.4f} "
              f"total_unstable={entry['total_unstable']:.2f}")
    return 0


def _cmd_theory_verify(args: argparse.Namespace) -> int:
    results = verification_report(quick=args.quick, seed=args.seed)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="robustlab",
        description="Train, attack, and certify small robust networks.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress of long sweeps")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one network per seed")
    _add_common(p_train)
    p_train.add_argument("--out", help="checkpoint path (JSON)")
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a saved network")
    _add_common(p_eval)
    p_eval.add_argument("--model", required=True, help="checkpoint to load")
    p_eval.add_argument("--modes", help=f"comma list from {', '.join(EVAL_MODES)}")
    p_eval.set_defaults(fn=_cmd_evaluate)

    p_abl = sub.add_parser("ablate", help="sweep one axis and emit CSV")
    _add_common(p_abl)
    p_abl.add_argument("--axis", required=True, choices=["epsilon", "gamma", "k"])
    p_abl.add_argument("--values", required=True, help="comma-separated sweep values")
    p_abl.add_argument("--trainers", help="comma list (default at,coap)")
    p_abl.add_argument("--out", default="ablation.csv", help="CSV output path")
    p_abl.set_defaults(fn=_cmd_ablate)

    p_thy = sub.add_parser("theory-verify",
                           help="run the closed-form verification checks")
    p_thy.add_argument("--quick", action="store_true",
                       help="smaller sample sizes for a fast smoke run")
    p_thy.add_argument("--seed", type=int, default=0)
    p_thy.set_defaults(fn=_cmd_theory_verify)

    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
