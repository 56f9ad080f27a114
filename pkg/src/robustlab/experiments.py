"""Sweep runner: config, training pipeline, ablations, CSV emission.

A run is (dataset, threat, trainer, seeds): sample data, train one network
per seed, evaluate the error suite, and record the per-epoch unstable
fraction. Ablations repeat runs along one axis (epsilon, gamma, or k),
select the learning rate per cell by robust test error, and emit one CSV
row per (value, seed, trainer).

Seed bookkeeping: a run seed s derives every stream it needs
(data s, network init [s, 1], training [s, 2], evaluation attack (s, 4),
threat directions s), so repeating a run with the same seed is bit-identical.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
import tomli
from scipy.stats import spearmanr

from .attacks import AttackConfig, adv_train, evaluate
from .bounds import ibp_train, unstable_fraction
from .data import (LabeledSet, LinsepParams, SpheresParams, sample_linsep,
                   sample_spheres)
from .dual import coap_train
from .nets import DenseNet, TrainConfig, TrainTrace, init_net, train_standard
from .threat import ThreatModel, ThreatSpec

log = logging.getLogger(__name__)

TRAINERS = ("standard", "at", "ibp", "coap")
AXES = ("epsilon", "gamma", "k")
LEARNING_RATES = (0.1, 0.01, 0.001)

CSV_COLUMNS = ("axis_value", "seed", "trainer", "std_err", "rob_err_pgd",
               "rob_err_exact", "cert_err", "total_unstable", "wall_time_s")


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs; mirrors the TOML config layout."""

    dataset: str = "spheres"
    spheres: SpheresParams = field(default_factory=SpheresParams)
    linsep: LinsepParams = field(default_factory=LinsepParams)
    threat: ThreatSpec = field(default_factory=lambda: ThreatSpec("l2", 5.0))
    trainer: str = "at"
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=10, restarts=1))
    eval_attack: AttackConfig = field(default_factory=AttackConfig)
    eval_modes: tuple[str, ...] | None = None
    seeds: tuple[int, ...] = (0,)
    hidden: tuple[int, ...] = (100,)

    def __post_init__(self) -> None:
        if self.dataset not in ("spheres", "linsep"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.trainer not in TRAINERS:
            raise ValueError(f"unknown trainer {self.trainer!r}")
        if len(self.seeds) == 0:
            raise ValueError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.eval_modes is not None:
            object.__setattr__(self, "eval_modes", tuple(self.eval_modes))

    @property
    def dim(self) -> int:
        return self.spheres.d if self.dataset == "spheres" else self.linsep.d

    def modes(self) -> tuple[str, ...]:
        if self.eval_modes is not None:
            return self.eval_modes
        base = ("pgd", "certified-coap", "certified-ibp")
        if self.threat.kind == "signal":
            return base + ("exact-line-search",)
        return base

    def to_dict(self) -> dict:
        out = {
            "dataset": self.dataset,
            "trainer": self.trainer,
            "seeds": list(self.seeds),
            "hidden": list(self.hidden),
            "spheres": asdict(self.spheres),
            "linsep": asdict(self.linsep),
            "threat": self.threat.to_dict(),
            "train": asdict(self.train),
            "attack": _attack_dict(self.attack),
            "eval_attack": _attack_dict(self.eval_attack),
        }
        if self.eval_modes is not None:
            out["eval_modes"] = list(self.eval_modes)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        kw: dict = {}
        plain = {f.name for f in fields(cls)} - {"spheres", "linsep", "threat",
                                                 "train", "attack", "eval_attack"}
        for key in plain & raw.keys():
            kw[key] = raw[key]
        if "spheres" in raw:
            kw["spheres"] = SpheresParams(**raw["spheres"])
        if "linsep" in raw:
            kw["linsep"] = LinsepParams(**raw["linsep"])
        if "threat" in raw:
            kw["threat"] = ThreatSpec.from_dict(raw["threat"])
        if "train" in raw:
            kw["train"] = TrainConfig(**raw["train"])
        if "attack" in raw:
            kw["attack"] = AttackConfig(**raw["attack"])
        if "eval_attack" in raw:
            kw["eval_attack"] = AttackConfig(**raw["eval_attack"])
        return cls(**kw)


def _attack_dict(cfg: AttackConfig) -> dict:
    out = {"steps": cfg.steps, "restarts": cfg.restarts, "seed": cfg.seed}
    if cfg.step_size is not None:
        out["step_size"] = cfg.step_size
    return out


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        return RunConfig.from_dict(tomli.load(fh))


@dataclass
class SeedResult:
    seed: int
    standard_error: float
    robust_error: dict[str, float]
    unstable_per_epoch: list[float]
    total_unstable: float
    wall_time_s: float

    @property
    def certified_error(self) -> float:
        return self.robust_error.get("certified-coap", float("nan"))


@dataclass
class RunResult:
    config: RunConfig
    per_seed: list[SeedResult]

    def mean(self, key: str) -> float:
        vals = [sr.robust_error[key] if key in sr.robust_error
                else getattr(sr, key) for sr in self.per_seed]
        return float(np.mean(vals))


def make_datasets(cfg: RunConfig, seed: int) -> tuple[LabeledSet, LabeledSet]:
    if cfg.dataset == "spheres":
        p = replace(cfg.spheres, seed=seed)
        return sample_spheres(p, "train"), sample_spheres(p, "test")
    p = replace(cfg.linsep, seed=seed)
    # Disjoint substream for the held-out linsep sample.
    return sample_linsep(p), sample_linsep(replace(p, n=10_000, seed=seed + 90_001))


def make_threat(cfg: RunConfig, seed: int) -> ThreatModel:
    return cfg.threat.materialize(cfg.dim, fallback_dir_seed=seed)


def _train(cfg: RunConfig, net: DenseNet, data: LabeledSet, tm: ThreatModel,
           rng: np.random.Generator, hook) -> TrainTrace:
    if cfg.trainer == "standard":
        return train_standard(net, data, cfg.train, rng, epoch_hook=hook)
    if cfg.trainer == "at":
        return adv_train(net, data, tm, cfg.train, rng, attack_cfg=cfg.attack,
                         epoch_hook=hook)
    if cfg.trainer == "ibp":
        return ibp_train(net, data, tm, cfg.train, rng, epoch_hook=hook)
    return coap_train(net, data, tm, cfg.train, rng, epoch_hook=hook)


def run_seed(cfg: RunConfig, seed: int,
             modes: Sequence[str] | None = None) -> tuple[SeedResult, DenseNet]:
    """Trains and evaluates one seed; returns the result and the network."""
    t0 = time.perf_counter()
    train_set, test_set = make_datasets(cfg, seed)
    tm = make_threat(cfg, seed)
    net = init_net([cfg.dim, *cfg.hidden, train_set.n_classes],
                   np.random.default_rng([seed, 1]))

    def hook(n: DenseNet) -> float:
        return unstable_fraction(n, train_set, tm, "ibp")

    trace = _train(cfg, net, train_set, tm, np.random.default_rng([seed, 2]), hook)
    robust: dict[str, float] = {}
    std = float("nan")
    for mode in (modes if modes is not None else cfg.modes()):
        out = evaluate(net, test_set, tm, mode,
                       attack_cfg=replace(cfg.eval_attack, seed=(seed, 4)))
        std = out["standard_error"]
        robust[mode] = out["robust_error"]
    result = SeedResult(seed=seed, standard_error=std, robust_error=robust,
                        unstable_per_epoch=list(trace.unstable),
                        total_unstable=float(trace.total_unstable),
                        wall_time_s=time.perf_counter() - t0)
    return result, net


def run(cfg: RunConfig) -> RunResult:
    """Full pipeline over every seed in the config."""
    results = []
    for seed in cfg.seeds:
        log.info("run trainer=%s seed=%d", cfg.trainer, seed)
        result, _ = run_seed(cfg, seed)
        results.append(result)
    return RunResult(cfg, results)


def apply_axis(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    """Specializes the config to one sweep point."""
    if axis == "epsilon":
        return replace(cfg, threat=replace(cfg.threat, eps=float(value)))
    if axis == "gamma":
        if cfg.dataset != "spheres":
            raise ValueError("the gamma axis varies the spheres separation")
        spheres = replace(cfg.spheres, r_outer=cfg.spheres.r_inner + float(value))
        return replace(cfg, spheres=spheres)
    if axis == "k":
        if cfg.threat.kind != "signal":
            raise ValueError("the k axis needs the signal-aligned threat model")
        return replace(cfg, threat=replace(cfg.threat, k=int(value)))
    raise ValueError(f"unknown axis {axis!r}")


def _selection_mode(kind: str) -> str:
    # Exact error when available (signal segments), attack estimate otherwise.
    return "exact-line-search" if kind == "signal" else "pgd"


@dataclass
class AblationResult:
    axis: str
    rows: list[dict]
    summary: list[dict]

    def summary_value(self, axis_value: float, trainer: str, key: str) -> float:
        for entry in self.summary:
            if entry["axis_value"] == axis_value and entry["trainer"] == trainer:
                return entry[key]
        raise KeyError((axis_value, trainer, key))


def _row(axis_value: float, trainer: str, sr: SeedResult) -> dict:
    return {
        "axis_value": axis_value,
        "seed": sr.seed,
        "trainer": trainer,
        "std_err": sr.standard_error,
        "rob_err_pgd": sr.robust_error.get("pgd"),
        "rob_err_exact": sr.robust_error.get("exact-line-search"),
        "cert_err": sr.certified_error,
        # Not a CSV column; kept in memory for error-ordering audits.
        "cert_err_ibp": sr.robust_error.get("certified-ibp"),
        "total_unstable": sr.total_unstable,
        "wall_time_s": sr.wall_time_s,
    }


def _aggregate(axis_rows: list[dict]) -> list[dict]:
    """Mean and standard error over seeds for each (value, trainer) group."""
    groups: dict[tuple, list[dict]] = {}
    for row in axis_rows:
        groups.setdefault((row["axis_value"], row["trainer"]), []).append(row)
    summary = []
    for (value, trainer), rows in sorted(groups.items(), key=lambda kv: kv[0]):
        entry = {"axis_value": value, "trainer": trainer, "n_seeds": len(rows)}
        for key in ("std_err", "rob_err_pgd", "rob_err_exact", "cert_err",
                    "total_unstable"):
            vals = [row[key] for row in rows if row[key] is not None]
            if not vals:
                entry[key] = entry[key + "_se"] = None
                continue
            arr = np.asarray(vals, dtype=np.float64)
            entry[key] = float(arr.mean())
            entry[key + "_se"] = (float(arr.std(ddof=1) / np.sqrt(arr.size))
                                  if arr.size > 1 else 0.0)
        summary.append(entry)
    return summary


def ablate(base_cfg: RunConfig, axis: str, values: Sequence[float],
           seeds: Sequence[int] | None = None,
           trainers: Sequence[str] = ("at", "coap"),
           learning_rates: Sequence[float] = LEARNING_RATES) -> AblationResult:
    """Sweeps one axis, one CSV row per (value, seed, trainer).

    Per (value, trainer) the learning rate is chosen from `learning_rates`
    by the smallest mean robust test error (exact error for signal threats,
    PGD estimate otherwise; selection on the test set mirrors the protocol
    being reproduced). Only the selected rate's rows are reported. For
    signal threats the PGD column is evaluated on the selected networks
    after selection, which skips the slowest evaluation for discarded rates.
    """
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}")
    if len(values) == 0:
        raise ValueError("values must be nonempty")
    seeds = tuple(seeds) if seeds is not None else base_cfg.seeds
    rows = []
    for value in values:
        value_cfg = apply_axis(base_cfg, axis, value)
        signal = value_cfg.threat.kind == "signal"
        select_by = _selection_mode(value_cfg.threat.kind)
        modes = ["certified-coap", "certified-ibp", select_by]
        if not signal:
            modes = ["pgd", "certified-coap", "certified-ibp"]
        for trainer in trainers:
            candidates = []
            for lr in learning_rates:
                cfg = replace(value_cfg, trainer=trainer, seeds=seeds,
                              train=replace(value_cfg.train, lr=lr))
                cells = []
                try:
                    for seed in seeds:
                        log.info("ablate %s=%s trainer=%s lr=%s seed=%d",
                                 axis, value, trainer, lr, seed)
                        cells.append(run_seed(cfg, seed, modes=modes))
                except RuntimeError as err:
                    # A diverged run just disqualifies this learning rate.
                    log.warning("ablate %s=%s trainer=%s lr=%s dropped: %s",
                                axis, value, trainer, lr, err)
                    continue
                score = float(np.mean([sr.robust_error[select_by] for sr, _ in cells]))
                candidates.append((score, lr, cells))
            if not candidates:
                raise RuntimeError(
                    f"every learning rate diverged for trainer={trainer!r} "
                    f"at {axis}={value}")
            _, lr, cells = min(candidates, key=lambda c: (c[0], -c[1]))
            log.info("ablate %s=%s trainer=%s selected lr=%s", axis, value, trainer, lr)
            for seed, (sr, net) in zip(seeds, cells):
                if signal:
                    _, test_set = make_datasets(value_cfg, seed)
                    tm = make_threat(value_cfg, seed)
                    out = evaluate(net, test_set, tm, "pgd",
                                   attack_cfg=replace(value_cfg.eval_attack,
                                                      seed=(seed, 4)))
                    sr.robust_error["pgd"] = out["robust_error"]
                rows.append(_row(float(value), trainer, sr))
    return AblationResult(axis, rows, _aggregate(rows))


def write_csv(rows: list[dict], path: str) -> None:
    """Emits the fixed column set; None becomes an empty field."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(["" if row[c] is None else _cell(row[c])
                             for c in CSV_COLUMNS])


def _cell(value) -> str:
    # repr round-trips floats exactly, keeping determinism checks honest.
    return repr(float(value)) if isinstance(value, float) else str(value)


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row: dict = {}
            for key, text in raw.items():
                if text == "":
                    row[key] = None
                elif key in ("seed",):
                    row[key] = int(text)
                elif key in ("trainer",):
                    row[key] = text
                else:
                    row[key] = float(text)
            rows.append(row)
    return rows


def gap_trend_correlation(result: AblationResult, key: str = "total_unstable",
                          trainer: str = "coap", transform=None) -> float:
    """Spearman correlation between sweep values and per-value means."""
    values = sorted({row["axis_value"] for row in result.rows})
    means = [result.summary_value(v, trainer, key) for v in values]
    xs = [transform(v) if transform is not None else v for v in values]
    rho = spearmanr(xs, means).statistic
    return float(rho)
