"""Command-line interface: corpus generation, training, inference, evaluation,
and reward-weight ablation sweeps.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
`RLS_SEED` is the fallback seed when --seed is not given.

Training configs are flat ``key=value`` text files; unknown keys are hard
errors. See DEFAULT_CONFIG_KEYS for the full key list.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import dataio
from .baseline import sweep_sequencer
from .env import EnvConfig
from .errors import ContractError, DataError, NumericError, UsageError
from .metrics import leaf_speed_stats, mnse, reconstruct
from .nn import load_checkpoint, unpack_policy
from .ppo import TrainConfig, sequence, train
from .rewards import RewardWeights


def _parse_bool(text: str, key: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise UsageError(f"config key {key}: expected true/false, got {text!r}")


# key -> (target section, attribute, parser)
CONFIG_KEYS = {
    "iterations": ("train", "iterations", int),
    "episodes_per_iter": ("train", "episodes_per_iter", int),
    "clip_eps": ("train", "clip_eps", float),
    "entropy_coef": ("train", "entropy_coef", float),
    "value_coef": ("train", "value_coef", float),
    "gamma": ("train", "gamma", float),
    "gae_lambda": ("train", "gae_lambda", float),
    "update_epochs": ("train", "update_epochs", int),
    "minibatches": ("train", "minibatches", int),
    "max_grad_norm": ("train", "max_grad_norm", float),
    "lr": ("train", "lr", float),
    "weight_decay": ("train", "weight_decay", float),
    "seed": ("train", "seed", int),
    "value_target": ("train", "value_target", str),
    "shared_backbone": ("train", "shared_backbone", None),
    "augment_crops": ("train", "augment_crops", None),
    "horizon": ("env", "horizon", int),
    "max_leaf_step": ("env", "max_leaf_step", int),
    "mu_min": ("env", "mu_min", float),
    "mu_max": ("env", "mu_max", float),
    "obs_columns": ("env", "obs_columns", int),
    "literal_rewards": ("env", "literal_rewards", None),
    "per_pair_aperture": ("env", "per_pair_aperture", None),
    "lambda1": ("weights", "lambda1", float),
    "lambda2": ("weights", "lambda2", float),
    "lambda3": ("weights", "lambda3", float),
    "lambda4": ("weights", "lambda4", float),
    "lambda5": ("weights", "lambda5", float),
}

DEFAULT_HORIZON = 8


def read_config_file(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    out: dict[str, str] = {}
    for i, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise UsageError(f"{path}:{i}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def build_configs(overrides: dict[str, str]) -> tuple[TrainConfig, EnvConfig]:
    """Apply flat key=value overrides onto the defaults. Unknown keys are
    hard errors so ablation-script typos fail loudly."""
    train_kw: dict[str, object] = {}
    env_kw: dict[str, object] = {"horizon": DEFAULT_HORIZON}
    weights_kw: dict[str, float] = {}
    mu_min, mu_max = EnvConfig.__dataclass_fields__["mu_range"].default  # (0.5, 2.5)
    for key, raw in overrides.items():
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        section, attr, cast = CONFIG_KEYS[key]
        try:
            value = _parse_bool(raw, key) if cast is None else cast(raw)
        except ValueError:
            raise UsageError(f"config key {key}: bad value {raw!r}") from None
        if section == "train":
            train_kw[attr] = value
        elif section == "weights":
            weights_kw[attr] = value
        elif attr == "mu_min":
            mu_min = float(value)
        elif attr == "mu_max":
            mu_max = float(value)
        else:
            env_kw[attr] = value
    try:
        train_cfg = TrainConfig(**train_kw)
        env_cfg = EnvConfig(
            mu_range=(mu_min, mu_max),
            reward_weights=RewardWeights(**weights_kw),
            **env_kw,
        )
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    return train_cfg, env_cfg


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    raw = os.environ.get("RLS_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"RLS_SEED must be an integer, got {raw!r}") from None


def _load_corpus(manifest_path: str) -> tuple[dict[str, list[str]], list[str]]:
    splits = dataio.read_manifest(manifest_path)
    ordered = splits["train"] + splits["val"] + splits["test"]
    return splits, ordered


def _load_policy(path: str):
    params, meta = unpack_policy(load_checkpoint(path))
    for key in ("horizon", "obs_columns", "mu_min", "mu_max"):
        if key not in meta:
            raise DataError(f"{path}: checkpoint missing metadata {key!r}")
    env_cfg = EnvConfig(
        horizon=int(meta["horizon"]),
        max_leaf_step=params.max_leaf_step,
        mu_range=(meta["mu_min"], meta["mu_max"]),
        obs_columns=int(meta["obs_columns"]),
    )
    return params, env_cfg


# -- commands -------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    try:
        rows, cols = (int(t) for t in args.shape.lower().split("x"))
    except ValueError:
        raise UsageError(f"--shape must look like 8x32, got {args.shape!r}") from None
    seed = _resolve_seed(args.seed)
    cfg = dataio.SynthConfig(shape=(rows, cols), hard=args.hard, seed=seed)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output dir {args.out}: {exc}") from None
    root = np.random.SeedSequence([seed, rows, cols])
    names = []
    for i, child in enumerate(root.spawn(args.count)):
        grid = dataio.gen_fluence(cfg, np.random.default_rng(child))
        name = f"fluence_{i:04d}.flu"
        dataio.write_fluence(os.path.join(args.out, name), grid)
        names.append(name)
    manifest = os.path.join(args.out, "manifest.txt")
    dataio.write_manifest(manifest, {"train": names})
    print(f"wrote {args.count} fluences and {manifest}")
    return 0


def _split_probe(splits: dict[str, list[str]]) -> tuple[list[str], list[str]]:
    """Training paths and held-out probe paths (val split if present,
    otherwise a tail slice of the corpus)."""
    train_paths = splits["train"] or (splits["val"] + splits["test"])
    if splits["val"]:
        return train_paths, splits["val"]
    if len(train_paths) < 4:
        return train_paths, train_paths
    n_probe = min(8, max(1, len(train_paths) // 8))
    return train_paths[:-n_probe], train_paths[-n_probe:]


def cmd_train(args: argparse.Namespace) -> int:
    overrides = read_config_file(args.config) if args.config else {}
    if args.seed is not None or "seed" not in overrides:
        overrides = dict(overrides)
        overrides["seed"] = str(_resolve_seed(args.seed))
    train_cfg, env_cfg = build_configs(overrides)
    splits, _ = _load_corpus(args.corpus)
    train_paths, probe_paths = _split_probe(splits)
    if not train_paths:
        raise DataError(f"{args.corpus}: no training fluences listed")
    corpus = [dataio.read_fluence(p) for p in train_paths]
    probe = [dataio.read_fluence(p) for p in probe_paths]
    result = train(
        train_cfg,
        env_cfg,
        corpus,
        probe=probe,
        workers=args.workers,
        metrics_path=args.metrics,
        checkpoint_path=args.out,
    )
    final = result.metrics[-1]["probe_mnse"] if result.metrics else float("nan")
    print(
        f"trained {train_cfg.iterations} iterations on {len(corpus)} fluences; "
        f"probe_mnse={final}"
    )
    return 0


def cmd_sequence(args: argparse.Namespace) -> int:
    grid = dataio.read_fluence(args.fluence)
    params, env_cfg = _load_policy(args.ckpt)
    n_target = args.k if args.k is not None else env_cfg.horizon
    plan = sequence(grid, params, env_cfg, n_target_cp=n_target)
    dataio.write_plan(args.out, plan, mu_max=env_cfg.mu_range[1])
    err = mnse([(grid, reconstruct(plan, grid.shape))])
    print(f"mnse={err}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.ckpt is None and not args.baseline:
        raise UsageError("eval needs --ckpt, --baseline, or both")
    _, paths = _load_corpus(args.corpus)
    params = env_cfg = None
    if args.ckpt is not None:
        params, env_cfg = _load_policy(args.ckpt)
    horizon = args.k if args.k is not None else (
        env_cfg.horizon if env_cfg is not None else DEFAULT_HORIZON
    )
    mu_range = env_cfg.mu_range if env_cfg is not None else (0.5, 2.5)
    max_step = params.max_leaf_step if params is not None else 4

    rows = []
    for path in paths:
        grid = dataio.read_fluence(path)
        mnse_rls = mnse_base = None
        speed_plan = None
        if params is not None:
            plan = sequence(grid, params, env_cfg, n_target_cp=horizon)
            mnse_rls = mnse([(grid, reconstruct(plan, grid.shape))])
            speed_plan = plan
        if args.baseline:
            plan_b = sweep_sequencer(grid, horizon, mu_range, max_step)
            mnse_base = mnse([(grid, reconstruct(plan_b, grid.shape))])
            if speed_plan is None:
                speed_plan = plan_b
        speed = leaf_speed_stats(speed_plan)[0] if speed_plan.n_cp >= 2 else 0.0
        rows.append((os.path.basename(path), mnse_rls, mnse_base, speed))

    def fmt(x):
        return "" if x is None else repr(float(x))

    def mean_of(idx):
        vals = [r[idx] for r in rows if r[idx] is not None]
        return float(np.mean(vals)) if vals else None

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "mnse_rls", "mnse_baseline", "mean_abs_delta"])
        for name, a, bse, speed in rows:
            writer.writerow([name, fmt(a), fmt(bse), fmt(speed)])
        writer.writerow(["mean", fmt(mean_of(1)), fmt(mean_of(2)), fmt(mean_of(3))])
    print(f"evaluated {len(rows)} fluences -> {args.out}")
    return 0


ABLATION_PARAMS = ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5")


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.param not in ABLATION_PARAMS:
        raise UsageError(f"--param must be one of {', '.join(ABLATION_PARAMS)}")
    try:
        values = [float(t) for t in args.values.split(",") if t.strip() != ""]
    except ValueError:
        raise UsageError(f"--values must be a comma list of numbers, got {args.values!r}") from None
    if not values:
        raise UsageError("--values is empty")
    base_overrides = read_config_file(args.config) if args.config else {}
    base_overrides = dict(base_overrides)
    base_overrides["seed"] = str(_resolve_seed(args.seed))
    splits, paths = _load_corpus(args.corpus)
    train_paths, probe_paths = _split_probe(splits)
    corpus = [dataio.read_fluence(p) for p in train_paths]
    probe = [dataio.read_fluence(p) for p in probe_paths]
    eval_grids = [dataio.read_fluence(p) for p in paths]

    out_rows = []
    for value in values:
        overrides = dict(base_overrides)
        overrides[args.param] = repr(value)
        train_cfg, env_cfg = build_configs(overrides)
        result = train(train_cfg, env_cfg, corpus, probe=probe, workers=args.workers)
        pairs = []
        for grid in eval_grids:
            plan = sequence(grid, result.params, env_cfg)
            pairs.append((grid, reconstruct(plan, grid.shape)))
        out_rows.append((args.param, value, mnse(pairs)))
        print(f"{args.param}={value}: mnse={out_rows[-1][2]}")

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "mnse"])
        for param, value, err in out_rows:
            writer.writerow([param, repr(value), repr(err)])
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlseq",
        description="Multi-agent PPO leaf sequencer for 2D fluence maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic fluence corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of fluences")
    p.add_argument("--shape", default="8x32", help="grid shape as ROWSxCOLS")
    p.add_argument("--hard", action="store_true", help="multi-island heterogeneous mode")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the sequencer on a corpus")
    p.add_argument("--corpus", required=True, help="manifest file")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", default=None, help="metrics CSV output path")
    p.add_argument("--workers", type=int, default=1, help="parallel rollout workers")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sequence", help="sequence one fluence into a plan")
    p.add_argument("--fluence", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, default=None, help="control points in the output plan")
    p.add_argument("--out", required=True, help="plan output path")
    p.set_defaults(func=cmd_sequence)

    p = sub.add_parser("eval", help="evaluate a checkpoint and/or the sweep baseline")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--baseline", action="store_true", help="also run the sweep baseline")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one reward weight, training per value")
    p.add_argument("--corpus", required=True)
    p.add_argument("--param", required=True, help="lambda1..lambda5")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
