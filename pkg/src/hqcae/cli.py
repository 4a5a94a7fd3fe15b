"""Command-line driver: ``hqcae {prepare,run,grid,loao,noise,report}``.

Exit codes: 0 success, 2 usage/config error, 3 missing input file,
4 invalid data, 5 a run failed (e.g. training diverged), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import evalstats, experiment
from .data import SchemaError
from .experiment import ExperimentConfig, ExperimentError, RunStore
from .models import ConfigError

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_RUN_FAILED = 0, 1, 2, 3, 4, 5

log = logging.getLogger("hqcae")


class RunFailed(RuntimeError):
    pass


def _resolve(args) -> ExperimentConfig:
    cfg = experiment.load_config(args.config)
    out = args.out or os.environ.get(experiment.OUT_ENV)
    if out:
        cfg.out = Path(out)
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    if getattr(args, "seed", None) is not None and args.command in ("grid", "loao", "noise"):
        cfg.seeds = (args.seed,)
    return cfg


def _dataset(args, cfg: ExperimentConfig) -> str:
    if args.dataset:
        cfg.dataset(args.dataset)
        return args.dataset
    if len(cfg.datasets) == 1:
        return next(iter(cfg.datasets))
    raise ExperimentError(f"--dataset is required (configured: {sorted(cfg.datasets)})")


def _print_rows(title: str, rows: list[dict]) -> None:
    print(f"== {title}")
    print(evalstats.format_table(rows))


def cmd_prepare(args, cfg: ExperimentConfig) -> int:
    dataset_id = _dataset(args, cfg)
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    for seed in seeds:
        split, path = experiment.prepare(cfg, dataset_id, seed)
        summary = split.summary()
        summary.update(seed=seed, snapshot=str(path), content_hash=split.content_hash(), config_hash=cfg.config_hash)
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_run(args, cfg: ExperimentConfig) -> int:
    dataset_id = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    results = experiment.run_cell(cfg, dataset_id, args.model, seed)
    RunStore(cfg.out).append(results)
    for r in results:
        print(r.to_json())
    if any(r.status != "ok" for r in results):
        raise RunFailed(results[0].extra.get("error", "run failed"))
    return EXIT_OK


def cmd_grid(args, cfg: ExperimentConfig) -> int:
    dataset_id = _dataset(args, cfg)
    store = RunStore(cfg.out)
    tasks = experiment.grid_tasks(cfg, dataset_id)
    new = experiment.run_many(cfg, tasks, store, resume=not args.force)
    print(f"{len(new)} new run records ({len(tasks)} cells x detections) -> {store.path}")
    written = experiment.write_reports(cfg, store, dataset_id)
    full = [r for r in store.read(dataset_id) if r.protocol == evalstats.FULL_TEST]
    _print_rows("best classical vs best HQC", evalstats.best_vs_best(full))
    _print_rows("design factors (HQC runs)", evalstats.factor_tests(full))
    _print_rows("placement x measurement", evalstats.interaction_table(full))
    for name, path in written.items():
        print(f"wrote {name}: {path}")
    failed = [r for r in new if r.status != "ok"]
    if failed:
        raise RunFailed(f"{len(failed)} grid run record(s) failed; see {store.path}")
    return EXIT_OK


def cmd_loao(args, cfg: ExperimentConfig) -> int:
    dataset_id = _dataset(args, cfg)
    store = RunStore(cfg.out)
    roles, results = experiment.run_loao(cfg, dataset_id, store)
    summary, breakdown = evalstats.loao_table(results, roles)
    _print_rows("full test vs leave-one-attack-out", summary)
    _print_rows("per held-out category", breakdown)
    experiment.write_reports(cfg, store, dataset_id)
    return EXIT_OK


def cmd_noise(args, cfg: ExperimentConfig) -> int:
    dataset_id = _dataset(args, cfg)
    store = RunStore(cfg.out)
    config_id, detection, rows = experiment.run_noise(cfg, dataset_id, store, args.model, args.detection)
    _print_rows(f"coherent over-rotation sweep: {config_id} ({detection})", rows)
    written = experiment.write_reports(cfg, store, dataset_id)
    print(f"wrote noise: {written['noise']}")
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig) -> int:
    store = RunStore(cfg.out)
    datasets = [args.dataset] if args.dataset else sorted({r.dataset for r in store.read()})
    if not datasets:
        raise ExperimentError(f"no run records in {store.path}")
    for dataset_id in datasets:
        for name, path in experiment.write_reports(cfg, store, dataset_id).items():
            print(f"{dataset_id}: wrote {name}: {path}")
    return EXIT_OK


COMMANDS = {
    "prepare": (cmd_prepare, "build and cache the train/test snapshot"),
    "run": (cmd_run, "train and evaluate one model for one seed"),
    "grid": (cmd_grid, "run the full configuration grid over all seeds"),
    "loao": (cmd_loao, "leave-one-attack-out protocol"),
    "noise": (cmd_noise, "coherent gate-noise sweep over the best HQC model"),
    "report": (cmd_report, "regenerate report tables from the run store"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment INI file (default: synthetic dataset only)")
    common.add_argument("--dataset", help="dataset id from the config")
    common.add_argument("--seed", type=int, help="restrict to one seed")
    common.add_argument("--out", type=Path, help=f"output directory (env {experiment.OUT_ENV} also works)")
    common.add_argument("--workers", type=int, help="process pool width")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hqcae", description="Hybrid quantum-classical autoencoder experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "run":
            p.add_argument("--model", default="classical-ae",
                           help="config id, e.g. classical-vae-reg, hqc-early-expval-ae, supervised")
        if name == "grid":
            p.add_argument("--force", action="store_true", help="re-run cells already in the store")
        if name == "noise":
            p.add_argument("--model", help="HQC config id (default: best HQC in the store)")
            p.add_argument("--detection", help="detection mechanism when --model is given")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command][0](args, cfg)
    except FileNotFoundError as exc:
        print(f"error[missing-file]: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SchemaError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            print(f"error[config]: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ExperimentError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailed as exc:
        print(f"error[run-failed]: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    except Exception as exc:  # noqa: BLE001
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
