"""Command-line front end: run / compare / sweep driven by TOML experiment files.

The CLI is a thin shell over the harness API; anything it can do is reachable
programmatically with identical results. Exit codes: 0 success, 1 runtime
failure, 2 config error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .config import ComponentMask, PrismHyperparams, TrainConfig
from .data import SyntheticConfig
from .harness import (
    ComparisonRow,
    ExperimentConfig,
    IdxPaths,
    PartitionConfig,
    alpha_sensitivity_sweep,
    compare_algorithms,
    inference_weight_sweep,
    run_experiment,
    sweep_table,
    write_rounds_csv,
    write_summary_json,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

DEFAULT_OUT = "runs"
OUT_ENV_VAR = "FEDPRISM_OUT"


class ConfigError(ValueError):
    """Bad experiment config; the message names the offending key."""


_TOP_KEYS = {
    "name",
    "algorithm",
    "rounds",
    "client_fraction",
    "eval_every",
    "seed",
    "seeds",
    "hidden_dims",
    "ifca_clusters",
    "output_dir",
    "dataset",
    "partition",
    "train",
    "prism",
    "sweep",
    "compare",
}
_SYNTHETIC_KEYS = {
    "kind",
    "latent_clusters",
    "classes_per_cluster",
    "input_dim",
    "n_clients",
    "samples_per_client",
    "test_samples_per_client",
    "cluster_noise",
    "seed",
}
_IDX_KEYS = {"kind", "train_images", "train_labels", "test_images", "test_labels"}
_PARTITION_KEYS = {"scheme", "alpha", "shards_per_client", "n_clients", "seed"}
_TRAIN_KEYS = {"epochs", "lr", "momentum", "batch_size"}
_PRISM_KEYS = {
    "n_clusters",
    "beta",
    "tau",
    "eta_cluster",
    "eta_alpha",
    "warmup_rounds",
    "recluster_every",
    "temperature",
    "init_alpha",
    "cluster_init_sigma",
    "kmeans_max_iters",
    "component_mask",
    "alpha_override",
    "inference_weight_override",
}
_MASK_KEYS = {"use_global", "use_cluster", "use_private"}
_SWEEP_KEYS = {"kind", "values"}
_COMPARE_KEYS = {"algorithms", "seeds"}


def _check_keys(table: dict, allowed: set[str], where: str) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key '{where}{key}'")


def _build_section(table: dict, allowed: set[str], where: str, factory, **extra):
    _check_keys(table, allowed, where)
    try:
        return factory(**{**table, **extra})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid [{where.rstrip('.')}] section: {err}") from err


def _build_dataset(table: dict, base_dir: Path):
    kind = table.get("kind", "synthetic")
    if kind == "synthetic":
        body = {k: v for k, v in table.items() if k != "kind"}
        return _build_section(body, _SYNTHETIC_KEYS, "dataset.", SyntheticConfig)
    if kind == "idx":
        body = {k: v for k, v in table.items() if k != "kind"}
        _check_keys(body, _IDX_KEYS, "dataset.")
        missing = sorted(_IDX_KEYS - {"kind"} - set(body))
        if missing:
            raise ConfigError(f"missing key 'dataset.{missing[0]}'")
        resolved = {k: str((base_dir / v).resolve()) for k, v in body.items()}
        return IdxPaths(**resolved)
    raise ConfigError(f"unknown key 'dataset.kind' value {kind!r}")


def build_experiment_config(doc: dict, base_dir: Path) -> ExperimentConfig:
    """Turn a parsed TOML document into an ExperimentConfig, rejecting
    unknown keys and surfacing validation failures with the bad key named."""
    _check_keys(doc, _TOP_KEYS, "")
    kwargs: dict = {}
    for key in ("name", "algorithm", "rounds", "client_fraction", "eval_every", "seed", "ifca_clusters"):
        if key in doc:
            kwargs[key] = doc[key]
    if "hidden_dims" in doc:
        kwargs["hidden_dims"] = tuple(doc["hidden_dims"])
    if "dataset" in doc:
        kwargs["dataset"] = _build_dataset(dict(doc["dataset"]), base_dir)
    if "partition" in doc:
        kwargs["partition"] = _build_section(
            dict(doc["partition"]), _PARTITION_KEYS, "partition.", PartitionConfig
        )
    if "train" in doc:
        kwargs["train"] = _build_section(dict(doc["train"]), _TRAIN_KEYS, "train.", TrainConfig)
    if "prism" in doc:
        body = dict(doc["prism"])
        mask = None
        if "component_mask" in body:
            mask = _build_section(
                dict(body.pop("component_mask")), _MASK_KEYS, "prism.component_mask.", ComponentMask
            )
        if mask is not None:
            body["component_mask"] = mask
        kwargs["prism"] = _build_section(body, _PRISM_KEYS, "prism.", PrismHyperparams)
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def _parse_literal(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_override(doc: dict, spec: str) -> None:
    """Apply a dotted key=value override onto the raw config document."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    key, raw = spec.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override key '{key}' crosses the scalar '{part}'")
    node[parts[-1]] = _parse_literal(raw.strip())


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err


def _resolve_out_dir(args, doc: dict, base_dir: Path) -> Path:
    if args.out:
        out = Path(args.out)
    elif "output_dir" in doc:
        out = base_dir / str(doc["output_dir"])
    elif os.environ.get(OUT_ENV_VAR):
        out = Path(os.environ[OUT_ENV_VAR])
    else:
        out = Path(DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_seeds(raw: str | None) -> list[int] | None:
    if raw is None:
        return None
    try:
        return [int(s) for s in raw.split(",") if s.strip() != ""]
    except ValueError as err:
        raise ConfigError(f"--seeds must be a comma-separated integer list: {err}") from err


def _seed_list(args, doc: dict, config: ExperimentConfig) -> list[int]:
    seeds = _parse_seeds(args.seeds)
    if seeds is None and "seeds" in doc:
        seeds = [int(s) for s in doc["seeds"]]
    if not seeds:
        seeds = [config.seed]
    return seeds


def _save_run(result, out_dir: Path, stem: str) -> tuple[Path, Path]:
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    write_rounds_csv(result.reports, csv_path)
    write_summary_json(result, json_path)
    return csv_path, json_path


def _print_result(result, csv_path: Path, json_path: Path) -> None:
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    final = result.final
    print(
        f"{result.config.name} seed={result.config.seed} final: "
        f"global={final.global_acc:.4f} local={final.mean_local_acc:.4f}"
    )


def cmd_run(args) -> int:
    doc = load_config_file(args.config)
    for override in args.set or []:
        apply_override(doc, override)
    base_dir = Path(args.config).resolve().parent
    config = build_experiment_config(doc, base_dir)
    out_dir = _resolve_out_dir(args, doc, base_dir)
    for seed in _seed_list(args, doc, config):
        result = run_experiment(replace(config, seed=seed))
        _print_result(result, *_save_run(result, out_dir, f"{config.name}_{seed}"))
    return EXIT_OK


def _write_comparison_csv(rows: list[ComparisonRow], path: Path) -> None:
    lines = ["algorithm,global_mean,global_std,local_mean,local_std"]
    for row in rows:
        lines.append(
            f"{row.algorithm},{row.global_mean:.6f},{row.global_std:.6f},"
            f"{row.local_mean:.6f},{row.local_std:.6f}"
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_compare(args) -> int:
    doc = load_config_file(args.config)
    for override in args.set or []:
        apply_override(doc, override)
    base_dir = Path(args.config).resolve().parent
    compare_block = dict(doc.pop("compare", {}))
    _check_keys(compare_block, _COMPARE_KEYS, "compare.")
    algorithms = list(compare_block.get("algorithms", []))
    if not algorithms:
        raise ConfigError("compare.algorithms must list at least one algorithm")
    config = build_experiment_config(doc, base_dir)
    out_dir = _resolve_out_dir(args, doc, base_dir)
    seeds = _parse_seeds(args.seeds) or [int(s) for s in compare_block.get("seeds", [])] or [config.seed]

    configs = [
        replace(config, algorithm=algo, name=f"{config.name}_{algo}") for algo in algorithms
    ]
    try:
        rows = compare_algorithms(configs, seeds)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    for row, cfg in zip(rows, configs):
        for seed, result in zip(seeds, row.results):
            _print_result(result, *_save_run(result, out_dir, f"{cfg.name}_{seed}"))
    table_path = out_dir / f"{config.name}_comparison.csv"
    _write_comparison_csv(rows, table_path)
    print(f"wrote {table_path}")
    for row in rows:
        print(
            f"{row.algorithm:10s} glob {100 * row.global_mean:6.2f} ± {100 * row.global_std:4.2f}"
            f" | loc {100 * row.local_mean:6.2f} ± {100 * row.local_std:4.2f}"
        )
    return EXIT_OK


def _dedup(values: list[float]) -> list[float]:
    seen: list[float] = []
    for v in values:
        if v in seen:
            print(f"warning: duplicate sweep value {v!r} ignored", file=sys.stderr)
        else:
            seen.append(v)
    return seen


def cmd_sweep(args) -> int:
    doc = load_config_file(args.config)
    for override in args.set or []:
        apply_override(doc, override)
    base_dir = Path(args.config).resolve().parent
    sweep_block = dict(doc.pop("sweep", {}))
    _check_keys(sweep_block, _SWEEP_KEYS, "sweep.")
    kind = sweep_block.get("kind")
    if kind not in ("alpha", "inference_weight"):
        raise ConfigError("sweep.kind must be 'alpha' or 'inference_weight'")
    values = _dedup([float(v) for v in sweep_block.get("values", [])])
    if not values:
        raise ConfigError("sweep.values must list at least one value")
    config = build_experiment_config(doc, base_dir)
    out_dir = _resolve_out_dir(args, doc, base_dir)

    try:
        if kind == "alpha":
            points = alpha_sensitivity_sweep(config, values)
        else:
            points = inference_weight_sweep(config, values)
    except ValueError as err:
        raise ConfigError(str(err)) from err

    for point in points:
        name = point.result.config.name
        _print_result(point.result, *_save_run(point.result, out_dir, f"{name}_{config.seed}"))
    table = sweep_table(points, kind)
    combined = out_dir / f"{config.name}_{kind}_sweep.csv"
    lines = [f"{kind},final_global,best_global,final_local,best_local"]
    for row in table:
        lines.append(
            f"{row[kind]:g},{row['final_global']:.6f},{row['best_global']:.6f},"
            f"{row['final_local']:.6f},{row['best_local']:.6f}"
        )
    combined.write_text("\n".join(lines) + "\n")
    print(f"wrote {combined}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedprism", description="Deterministic federated-learning experiments."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in (("run", cmd_run), ("compare", cmd_compare), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--out", help="output directory (default: config output_dir, "
                                     f"${OUT_ENV_VAR}, or ./{DEFAULT_OUT})")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted paths allowed, repeatable)")
        p.add_argument("--seeds", help="comma-separated seed list")
        p.set_defaults(handler=handler)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
