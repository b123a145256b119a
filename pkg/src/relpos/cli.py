"""Batch experiment front door.

Subcommands: dump-distances, param-count, gradcheck, train. Runs are
described by a flat key=value config file; all randomness flows from its
single `seed` key. Exit codes: 0 success, 1 check failure, 2 configuration
error, 3 data error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as dataio
from .autodiff import finite_diff_check
from .embeddings import (
    MODES,
    PositionalConfig,
    circle_classes,
    circle_distance_vector,
    learnable_param_count,
    save_distance_vector,
    sequence_distance_vector,
)
from .errors import (
    ConfigError,
    EmptyDatasetError,
    InvalidGeometryError,
    LabelOutOfRangeError,
    ParseError,
    RelposError,
)
from .grid import grid_from_patch_count
from .model import ModelConfig, forward, init_params, loss, named_parameters, parameter_count, save_checkpoint
from .train import TrainConfig, train, write_metrics_csv

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_SIZE_LIMIT = 1024

_REQUIRED = object()


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# key -> (caster, default); _REQUIRED marks keys a command may demand later
_SCHEMA = {
    "mode": (str, _REQUIRED),
    "class_token_policy": (str, "zero_row"),
    "unit_distance": (float, 1.0),
    "image_side": (int, _REQUIRED),
    "channels": (int, 1),
    "patch_size": (int, _REQUIRED),
    "embed_dim": (int, _REQUIRED),
    "heads": (int, _REQUIRED),
    "blocks": (int, _REQUIRED),
    "mlp_ratio": (float, 4.0),
    "classes": (int, None),
    "epochs": (int, 10),
    "batch_size": (int, 128),
    "base_lr": (float, 1e-3),
    "weight_decay": (float, 0.05),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "warmup_epochs": (int, 0),
    "seed": (int, 0),
    "task": (str, None),
    "noise_sigma": (float, 0.1),
    "count": (int, 512),
    "eval_fraction": (float, 0.25),
    "data_format": (str, None),
    "data_images": (str, None),
    "data_labels": (str, None),
    "out_dir": (str, None),
    "wall_clock": (_parse_bool, False),
}


def parse_run_config(path) -> dict:
    """Read a flat key=value file; unknown keys and missing files are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key=value, got {raw!r}")
        key, _, text = line.partition("=")
        key, text = key.strip(), text.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        caster, _ = _SCHEMA[key]
        try:
            values[key] = caster(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: line {lineno}: bad value for {key}: {exc}") from None
    for key in ("data_images", "data_labels"):
        if values[key] is not None and not Path(values[key]).is_file():
            raise ConfigError(f"{path}: referenced file does not exist: {values[key]}")
    if values["task"] is not None and values["data_format"] is not None:
        raise ConfigError(f"{path}: set either task or data_format, not both")
    return values


def _require(run: dict, *keys: str) -> None:
    missing = [k for k in keys if run[k] is _REQUIRED or run[k] is None]
    if missing:
        raise ConfigError(f"config is missing required keys: {', '.join(missing)}")


def _positional_config(run: dict, mode: str | None = None) -> PositionalConfig:
    try:
        return PositionalConfig(
            mode=mode if mode is not None else run["mode"],
            class_token_policy=run["class_token_policy"],
            unit=run["unit_distance"],
        )
    except (ValueError, RelposError) as exc:
        raise ConfigError(str(exc)) from exc


def _derive_classes(run: dict) -> int:
    if run["task"] == "quadrant":
        derived = 4
    elif run["task"] == "radial":
        side = run["image_side"] // run["patch_size"]
        _, derived = circle_classes(grid_from_patch_count(side * side))
    else:
        derived = None
    if run["classes"] is not None:
        if derived is not None and run["classes"] != derived:
            raise ConfigError(
                f"classes={run['classes']} contradicts the {run['task']} task ({derived} classes)"
            )
        return run["classes"]
    if derived is None:
        raise ConfigError("classes is required when no synthetic task is configured")
    return derived


def _model_config(run: dict, mode: str | None = None, classes: int | None = None) -> ModelConfig:
    _require(run, "mode", "image_side", "patch_size", "embed_dim", "heads", "blocks")
    try:
        return ModelConfig(
            image_side=run["image_side"],
            channels=run["channels"],
            patch_size=run["patch_size"],
            embed_dim=run["embed_dim"],
            heads=run["heads"],
            blocks=run["blocks"],
            mlp_ratio=run["mlp_ratio"],
            classes=classes if classes is not None else _derive_classes(run),
            positional=_positional_config(run, mode),
        )
    except (ValueError, RelposError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _train_config(run: dict) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=run["epochs"],
            batch_size=run["batch_size"],
            base_lr=run["base_lr"],
            weight_decay=run["weight_decay"],
            beta1=run["beta1"],
            beta2=run["beta2"],
            eps=run["eps"],
            warmup_epochs=run["warmup_epochs"],
            seed=run["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _resolve_out_dir(run: dict) -> Path:
    target = run["out_dir"] or os.environ.get("RELPOS_OUT_DIR") or "."
    out = Path(target)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_datasets(run: dict, seed: int):
    if run["task"] is not None:
        spec = dataio.SyntheticSpec(
            task=run["task"],
            image_side=run["image_side"],
            patch_size=run["patch_size"],
            noise_sigma=run["noise_sigma"],
            count=run["count"],
            seed=seed,
        )
        full = dataio.generate(spec)
    elif run["data_format"] is not None:
        _require(run, "data_images")
        full = dataio.load_images(
            run["data_images"],
            run["data_format"],
            labels_path=run["data_labels"],
            image_side=run["image_side"],
            channels=run["channels"],
        )
    else:
        raise ConfigError("configure either a synthetic task or a dataset file")
    return dataio.split_dataset(full, run["eval_fraction"], seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_dump_distances(args) -> int:
    grid = grid_from_patch_count(args.n)
    if args.kind == "sequence":
        dis = sequence_distance_vector(grid, args.d)
    elif args.kind == "circle":
        dis = circle_distance_vector(grid, args.d)
    else:
        raise ConfigError(f"unknown kind {args.kind!r}; choose sequence or circle")
    print(" ".join(f"{v:.12g}" for v in dis.values))
    out_path = args.out
    if out_path is None and os.environ.get("RELPOS_OUT_DIR"):
        out_dir = Path(os.environ["RELPOS_OUT_DIR"])
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / f"distances_{args.kind}_{args.n}.txt"
    if out_path is not None:
        save_distance_vector(out_path, dis)
    return EXIT_OK


def cmd_param_count(args) -> int:
    run = parse_run_config(args.config)
    print(f"{'mode':<14} {'positional':>12} {'total':>14}")
    for mode in MODES:
        cfg = _model_config(run, mode=mode)
        positional = learnable_param_count(cfg.positional, cfg.num_patches, cfg.embed_dim)
        print(f"{mode:<14} {positional:>12} {parameter_count(cfg):>14}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = parse_run_config(args.config)
    cfg = _model_config(run)
    if cfg.num_patches * cfg.embed_dim > GRADCHECK_SIZE_LIMIT:
        raise ConfigError(
            f"gradcheck guard: n*D = {cfg.num_patches * cfg.embed_dim} exceeds "
            f"{GRADCHECK_SIZE_LIMIT}; use a smaller configuration"
        )
    train_set, _ = _load_datasets(run, run["seed"])
    batch = train_set.images[: min(4, len(train_set))]
    labels = train_set.labels[: batch.shape[0]]
    params = init_params(cfg, run["seed"])

    worst = 0.0
    for name, tensor in named_parameters(params):
        err = finite_diff_check(lambda _: loss(forward(params, cfg, batch), labels), [tensor])
        print(f"{name:<22} max_rel_err={err:.3e}")
        worst = max(worst, err)
    print(f"worst={worst:.3e} tolerance={GRADCHECK_TOLERANCE:.0e}")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_CHECK_FAILED


def cmd_train(args) -> int:
    run = parse_run_config(args.config)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    cfg = _model_config(run)
    base_train_cfg = _train_config(run)
    out_dir = _resolve_out_dir(run)
    mode = cfg.positional.mode

    finals = []
    for seed in range(run["seed"], run["seed"] + args.seeds):
        train_set, eval_set = _load_datasets(run, seed)
        result = train(cfg, replace(base_train_cfg, seed=seed), train_set, eval_set)
        write_metrics_csv(
            result.metrics,
            out_dir / f"metrics_{mode}_seed{seed}.csv",
            wall_clock=run["wall_clock"],
        )
        save_checkpoint(out_dir / f"checkpoint_{mode}_seed{seed}.txt", cfg, result.params)
        final = result.metrics[-1].eval_top1
        finals.append(final)
        if args.seeds > 1:
            print(f"mode={mode} seed={seed} eval_top1={final:.6f}")
    if args.seeds == 1:
        print(f"mode={mode} eval_top1={finals[0]:.6f}")
    else:
        arr = np.asarray(finals)
        print(f"mode={mode} eval_top1_mean={arr.mean():.6f} eval_top1_std={arr.std():.6f}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relpos", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dump-distances", help="print and save a distance vector")
    p.add_argument("--n", type=int, required=True, help="patch count (perfect square >= 9)")
    p.add_argument("--kind", choices=("sequence", "circle"), required=True)
    p.add_argument("--d", type=float, default=1.0, help="unit distance")
    p.add_argument("--out", type=Path, default=None, help="output file path")
    p.set_defaults(handler=cmd_dump_distances)

    p = sub.add_parser("param-count", help="positional and total parameter counts per mode")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_param_count)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("train", help="train, evaluate, and write metrics/checkpoint files")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=1, help="repeat with seeds seed..seed+k-1")
    p.set_defaults(handler=cmd_train)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except RelposError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(
            exc, (ParseError, EmptyDatasetError, LabelOutOfRangeError, InvalidGeometryError)
        ):
            return EXIT_DATA
        return EXIT_CONFIG


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
