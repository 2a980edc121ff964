"""Config-driven experiment runner: seed sweeps, method dispatch, artifacts.

`eirm run config.json` trains the configured methods over a seed sweep and
writes one trace CSV per (method, seed), a results table (CSV + markdown),
and a manifest. `eirm theory ...` fronts the equilibrium/invariance
certificates, exiting nonzero on failure. `eirm gen ...` writes benchmark
environments to the binary dataset cache.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .baselines import as_ensemble, pool_environments, train_erm, train_robust_minmax
from .datasets import (
    BENCHMARKS,
    DEFAULT_FLIP_PROBS,
    make_benchmark,
    save_environment,
)
from .game import (
    FIXED_PHI,
    VARIABLE_PHI,
    TerminationRule,
    TrainConfig,
    best_response_train,
    evaluate,
)
from .sem_game import default_sem_spec, train_sem_game
from .theory import QuadGameSpec, bounded_linear_ne, scalar_game_grid, verify_invariance, verify_nash
from .core import Rng
from . import nn

METHODS = ("F_IRM", "V_IRM", "ERM", "ERM_PER_ENV", "ROBUST", "ORACLE")

TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ExperimentConfig:
    benchmark: str = "COLORED_SHAPES"
    sizes: tuple = (2000, 2000, 2000)
    flip_probs: tuple = DEFAULT_FLIP_PROBS
    data_dir: str = None
    height: int = 16
    width: int = 16
    methods: tuple = METHODS
    n_seeds: int = 3
    seed: int = 0
    out_dir: str = "results"
    baseline_iters: int = 300
    baseline_lr: float = None  # None: inherit train.lr
    baseline_dropout: float = None  # None: inherit train.dropout_rate
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def validate(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"benchmark: unknown name {self.benchmark!r}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds: must be >= 1")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"methods: unknown method {m!r}")
        if len(self.sizes) != len(self.flip_probs):
            raise ConfigError("sizes: length must match flip_probs")
        if self.benchmark != "COLORED_SHAPES":
            data_dir = self.data_dir or os.environ.get("EIRM_DATA_DIR")
            if not data_dir or not os.path.isdir(data_dir):
                raise ConfigError(f"data_dir: {self.benchmark} needs an IDX corpus directory")


def load_config(path, preset: str = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    cfg = ExperimentConfig()
    train_raw = raw.pop("train", {})
    for key, value in raw.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"{key}: unknown config field")
        if isinstance(getattr(cfg, key), tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(cfg, key, value)
    term_raw = train_raw.pop("termination", {})
    unknown = set(train_raw) - TRAIN_FIELDS
    if unknown:
        raise ConfigError(f"train.{sorted(unknown)[0]}: unknown field")
    for key in ("hidden_dims", "phi_hidden_dims"):
        if key in train_raw:
            train_raw[key] = tuple(train_raw[key])
    cfg.train = dataclasses.replace(cfg.train, **train_raw)
    if term_raw:
        cfg.train = dataclasses.replace(
            cfg.train, termination=TerminationRule(**term_raw)
        )
    if preset:
        apply_preset(cfg, preset)
    cfg.validate()
    return cfg


def apply_preset(cfg: ExperimentConfig, preset: str) -> None:
    """desk: small/fast suite for a laptop CPU; paper: full-scale settings."""
    if preset == "desk":
        cfg.sizes = (2000, 2000, 2000)
        cfg.n_seeds = min(cfg.n_seeds, 3)
        # The game needs aggressive steps for the between-state oscillation to
        # develop at width 64; the single-objective baselines do not, and
        # diverge at these settings, so they get a tamer optimizer.
        cfg.baseline_iters = 300
        cfg.baseline_lr = 2.5e-3
        cfg.baseline_dropout = 0.1
        cfg.train = dataclasses.replace(
            cfg.train,
            lr=1e-2,
            hidden_dims=(64, 64),
            phi_hidden_dims=(64,),
            repr_dim=64,
            dropout_rate=0.75,
            max_iters=1500,
            termination=TerminationRule(
                window=20, quantile=0.25, min_steps=400, threshold=0.6
            ),
        )
    elif preset == "paper":
        cfg.sizes = (30000, 30000, 10000)
        cfg.baseline_iters = 500
        cfg.train = dataclasses.replace(
            cfg.train,
            hidden_dims=(390, 390),
            phi_hidden_dims=(390,),
            repr_dim=390,
            dropout_rate=0.75,
            max_iters=3000,
        )
    else:
        raise ConfigError(f"preset: unknown preset {preset!r}")


def baseline_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    """Baseline optimizer: fixed budget, no termination, optional lr/dropout override."""
    return dataclasses.replace(
        cfg.train,
        seed=seed,
        max_iters=cfg.baseline_iters,
        lr=cfg.baseline_lr if cfg.baseline_lr is not None else cfg.train.lr,
        dropout_rate=(
            cfg.baseline_dropout
            if cfg.baseline_dropout is not None
            else cfg.train.dropout_rate
        ),
        termination=TerminationRule(enabled=False),
    )


def _train_method(method, bench, cfg: ExperimentConfig, seed: int):
    """Returns a list of (row_label, train_acc, test_acc, trace)."""
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    base_cfg = baseline_config(cfg, seed)
    pooled = pool_environments(bench.train_envs)
    if method == "F_IRM":
        model, trace = best_response_train(
            bench.train_envs, train_cfg, FIXED_PHI, test_env=bench.test_env
        )
        return [(method, _acc(model, pooled), _acc(model, bench.test_env), trace)]
    if method == "V_IRM":
        model, trace = best_response_train(
            bench.train_envs, train_cfg, VARIABLE_PHI, test_env=bench.test_env
        )
        return [(method, _acc(model, pooled), _acc(model, bench.test_env), trace)]
    if method == "ERM":
        mlp, trace = train_erm(bench.train_envs, base_cfg, test_env=bench.test_env)
        model = as_ensemble(mlp)
        return [(method, _acc(model, pooled), _acc(model, bench.test_env), trace)]
    if method == "ERM_PER_ENV":
        rows = []
        for e, env in enumerate(bench.train_envs):
            mlp, trace = train_erm([env], base_cfg, test_env=bench.test_env)
            model = as_ensemble(mlp)
            rows.append(
                (f"ERM_ENV{e}", _acc(model, env), _acc(model, bench.test_env), trace)
            )
        return rows
    if method == "ROBUST":
        mlp, trace = train_robust_minmax(
            bench.train_envs, base_cfg, test_env=bench.test_env
        )
        model = as_ensemble(mlp)
        return [(method, _acc(model, pooled), _acc(model, bench.test_env), trace)]
    if method == "ORACLE":
        mlp, trace = train_erm([bench.oracle_env], base_cfg, test_env=bench.oracle_test)
        model = as_ensemble(mlp)
        return [
            (method, _acc(model, bench.oracle_env), _acc(model, bench.oracle_test), trace)
        ]
    raise ConfigError(f"methods: unknown method {method!r}")


def _acc(model, dataset) -> float:
    return evaluate(model, dataset)["accuracy"]


def run_experiment(cfg: ExperimentConfig, seed_offset: int = 0, out_dir=None) -> dict:
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    t0 = time.time()
    results = {}  # row label -> list of (train_acc, test_acc)
    seeds = [cfg.seed + seed_offset + i for i in range(cfg.n_seeds)]
    for seed in seeds:
        bench = make_benchmark(
            cfg.benchmark, cfg.sizes, seed, data_dir=cfg.data_dir,
            flip_probs=cfg.flip_probs, height=cfg.height, width=cfg.width,
        )
        for method in cfg.methods:
            for label, train_acc, test_acc, trace in _train_method(
                method, bench, cfg, seed
            ):
                trace.to_csv(os.path.join(out, f"trace_{label}_seed{seed}.csv"))
                results.setdefault(label, []).append((train_acc, test_acc))
    _write_table(results, out)
    manifest = {
        "config": _config_dict(cfg),
        "seeds": seeds,
        "version": __version__,
        "wall_time_s": round(time.time() - t0, 3),
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return results


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def _stats(pairs):
    arr = np.asarray(pairs, dtype=np.float64) * 100.0
    mean = arr.mean(axis=0)
    if arr.shape[0] >= 2:
        std = arr.std(axis=0, ddof=1)
        return mean, std
    return mean, None


def _write_table(results: dict, out: str) -> None:
    csv_lines = ["method,train_acc_mean,train_acc_std,test_acc_mean,test_acc_std"]
    md_lines = [
        "| Method | Train accuracy | Test accuracy |",
        "| --- | --- | --- |",
    ]
    for label, pairs in results.items():
        mean, std = _stats(pairs)
        if std is None:
            csv_lines.append(f"{label},{mean[0]:.6g},n/a,{mean[1]:.6g},n/a")
            md_lines.append(f"| {label} | {mean[0]:.2f} | {mean[1]:.2f} |")
        else:
            csv_lines.append(
                f"{label},{mean[0]:.6g},{std[0]:.6g},{mean[1]:.6g},{std[1]:.6g}"
            )
            md_lines.append(
                f"| {label} | {mean[0]:.2f} ± {std[0]:.2f} "
                f"| {mean[1]:.2f} ± {std[1]:.2f} |"
            )
    with open(os.path.join(out, "results.csv"), "w") as f:
        f.write("\n".join(csv_lines) + "\n")
    with open(os.path.join(out, "results.md"), "w") as f:
        f.write("\n".join(md_lines) + "\n")


def _write_report(kv: dict, text: str, path) -> None:
    print(text)
    if path:
        with open(path, "w") as f:
            for key, value in kv.items():
                f.write(f"{key}={value}\n")


def cmd_run(args) -> int:
    cfg = load_config(args.config, preset=args.preset)
    run_experiment(cfg, seed_offset=args.seed_offset, out_dir=args.out)
    return 0


def cmd_theory(args) -> int:
    report_path = args.report
    if args.sub == "grid":
        spec = QuadGameSpec(
            minimizers=(args.c1, args.c2), lo=args.lo, hi=args.hi, step=args.step
        )
        res = scalar_game_grid(spec)
        note = ""
        if not res.invariant_set:
            note = " (no invariant predictor exists on this instance)"
        text = (
            f"NE pairs: {len(res.ne_pairs)}, NE ensembles: {sorted(res.ne_ensembles)}\n"
            f"invariant set: {sorted(res.invariant_set)}{note}\n"
            f"equal={res.equal}"
        )
        _write_report(res.to_kv(), text, report_path)
        return 0
    if args.sub == "bounded":
        spec = QuadGameSpec(minimizers=(args.c1, args.c2), lo=args.lo, hi=args.hi)
        pair, interior = bounded_linear_ne(spec)
        kv = {"w1": pair[0], "w2": pair[1], "interior": interior}
        _write_report(kv, f"fixed point {pair}, interior={interior}", report_path)
        return 0
    # nash / invariance run against the linear-SEM scenario
    if args.checkpoints:
        spec = default_sem_spec()
        from .datasets import make_linear_sem

        envs, gamma = make_linear_sem(spec, Rng(args.seed).child("sem-data"))
        from .game import EnsembleModel
        from .sem_game import causal_projection

        classifiers = [nn.load_model(p) for p in args.checkpoints]
        model = EnsembleModel(
            classifiers,
            causal_projection(spec.n_causal + spec.n_spurious, spec.n_causal),
            FIXED_PHI,
        )
    else:
        model, envs, gamma = train_sem_game(seed=args.seed)
    if args.sub == "nash":
        report = verify_nash(
            model, envs, deviation_budget=args.budget, eps=args.eps,
            loss="squared", lr=2e-2, seed=args.seed,
        )
    else:
        report = verify_invariance(
            model, envs, n_perturb=args.samples, eps=args.eps,
            rng=Rng(args.seed), loss="squared", lr=2e-2,
        )
    _write_report(report.to_kv(), report.to_text(), report_path)
    return 0 if report.passed else 1


def cmd_gen(args) -> int:
    bench = make_benchmark(
        args.benchmark, tuple(args.sizes), args.seed, data_dir=args.data_dir,
        height=args.height, width=args.width,
    )
    os.makedirs(args.out, exist_ok=True)
    for env in [*bench.train_envs, bench.test_env, bench.oracle_env, bench.oracle_test]:
        path = os.path.join(args.out, f"{args.benchmark}_{env.env_id}.eenv")
        save_environment(env, path)
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eirm", description="Ensemble-game invariant risk minimization experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment suite")
    p_run.add_argument("config")
    p_run.add_argument("--preset", choices=("desk", "paper"))
    p_run.add_argument("--seed-offset", type=int, default=0)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run)

    p_th = sub.add_parser("theory", help="equilibrium and invariance certificates")
    th_sub = p_th.add_subparsers(dest="sub", required=True)
    for name in ("grid", "bounded"):
        p = th_sub.add_parser(name)
        p.add_argument("--c1", type=float, default=0.5)
        p.add_argument("--c2", type=float, default=0.5)
        p.add_argument("--lo", type=float, default=-2.0)
        p.add_argument("--hi", type=float, default=2.0)
        p.add_argument("--step", type=float, default=0.1)
        p.add_argument("--report", default=None)
    for name in ("nash", "invariance"):
        p = th_sub.add_parser(name)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--eps", type=float, default=1e-3)
        p.add_argument("--budget", type=int, default=500)
        p.add_argument("--samples", type=int, default=100)
        p.add_argument("--checkpoints", nargs="*", default=None,
                       help="per-environment classifier checkpoints to certify")
        p.add_argument("--report", default=None)
    p_th.set_defaults(func=cmd_theory)

    p_gen = sub.add_parser("gen", help="write benchmark environments to cache files")
    p_gen.add_argument("benchmark", choices=BENCHMARKS)
    p_gen.add_argument("--sizes", type=int, nargs="+", default=[2000, 2000, 2000])
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--data-dir", default=None)
    p_gen.add_argument("--height", type=int, default=16)
    p_gen.add_argument("--width", type=int, default=16)
    p_gen.add_argument("--out", default="datasets")
    p_gen.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
