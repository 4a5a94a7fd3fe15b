"""Experiment configuration, run execution and the run-record store.

Output directory layout::

    <out>/snapshots/<dataset>-seed<k>-<schema hash>.npz
    <out>/models/<dataset>/<config id>/seed<k>.npz         trained parameters
    <out>/models/<dataset>/<config id>/seed<k>.det.npz     threshold + isolation forest
    <out>/runs.jsonl                                       append-only run records
    <out>/reports/<dataset>/*.csv

The seed of a run drives the split sampling (for sampled or synthetic
datasets), the weight initialisation, shuffling and the detectors.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import anomaly, data, evalstats, models, nncore
from .qsim import avg_gate_fidelity
from .evalstats import FULL_TEST, RunResult
from .models import ModelConfig

logger = logging.getLogger(__name__)

OUT_ENV = "HQCAE_OUT"
RUNS_FILE = "runs.jsonl"


class ExperimentError(RuntimeError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass
class DatasetEntry:
    dataset_id: str
    kind: str = "csv"                      # csv | synthetic
    schema: str | None = None
    files: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.dataset_id, "kind": self.kind, "schema": self.schema,
                "files": {k: [str(p) for p in v] for k, v in self.files.items()}, "options": self.options}


@dataclass
class ExperimentConfig:
    datasets: dict[str, DatasetEntry]
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: Path = Path("hqcae-out")
    workers: int = 1
    noise_sigmas: tuple[float, ...] = evalstats.DEFAULT_SIGMAS
    noise_seed: int = 0
    families: tuple[str, ...] = models.FAMILIES
    detections: tuple[str, ...] = models.DETECTIONS
    train: nncore.TrainConfig = field(default_factory=nncore.TrainConfig)
    model: dict = field(default_factory=dict)
    percentile: float = 95.0
    iforest_trees: int = 100
    iforest_psi: int = 256
    loao_models: dict = field(default_factory=lambda: {"classical": "auto", "hqc": "auto"})
    loao_detection: str = "recon_threshold"

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ExperimentError("seed list must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ExperimentError("seed list contains duplicates")
        if self.workers < 1:
            raise ExperimentError("workers must be >= 1")
        for entry in self.datasets.values():
            if entry.kind == "csv" and entry.schema not in data.BUILTIN_SCHEMAS and not Path(entry.schema or "").is_file():
                raise ExperimentError(f"dataset {entry.dataset_id}: schema {entry.schema!r} not found")

    def to_dict(self) -> dict:
        """Everything that affects numeric results (output dir and pool width excluded)."""
        return {
            "datasets": {k: v.to_dict() for k, v in sorted(self.datasets.items())},
            "seeds": list(self.seeds),
            "noise_sigmas": list(self.noise_sigmas),
            "noise_seed": self.noise_seed,
            "families": list(self.families),
            "detections": list(self.detections),
            "train": dataclasses.asdict(self.train),
            "model": self.model,
            "percentile": self.percentile,
            "iforest_trees": self.iforest_trees,
            "iforest_psi": self.iforest_psi,
            "loao_models": self.loao_models,
            "loao_detection": self.loao_detection,
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dataset(self, dataset_id: str) -> DatasetEntry:
        if dataset_id not in self.datasets:
            raise ExperimentError(f"dataset {dataset_id!r} is not configured (known: {sorted(self.datasets)})")
        return self.datasets[dataset_id]

    def model_config(self, config_id: str, dataset_id: str, seed: int) -> ModelConfig:
        m = dict(self.model)
        kwargs = dict(
            dataset=dataset_id,
            seed=seed,
            train=dataclasses.replace(self.train, seed=seed),
            encoder_widths=tuple(m.pop("encoder_widths", (32, 16))),
            latent_dim=m.pop("latent_dim", 8),
        )
        if config_id != "supervised":
            kwargs.update(m)
        return models.parse_config_id(config_id, **kwargs)

    def grid_ids(self) -> list[str]:
        return [c.config_id for c in models.enumerate_grid(["_"], families=self.families,
                                                           **self._quantum_overrides())]

    def _quantum_overrides(self) -> dict:
        return {k: v for k, v in self.model.items() if k in ("alpha", "beta", "n_qubits", "n_layers", "entanglement")}


DEFAULT_CONFIG = """\
[experiment]
seeds = 0, 1, 2, 3, 4
noise_sigmas = 0.0, 0.01, 0.03, 0.1, 0.3, 1.0

[dataset:synthetic]
kind = synthetic
"""


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse the INI experiment format. Relative file paths resolve against ``base_dir``."""
    base_dir = base_dir or Path.cwd()
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ExperimentError(f"malformed config: {exc}") from None
    known = {"experiment", "train", "model", "detection", "loao"}
    for section in cp.sections():
        if section not in known and not section.startswith("dataset:"):
            raise ExperimentError(f"unknown config section [{section}]")

    exp = cp["experiment"] if cp.has_section("experiment") else {}
    kw: dict = {}
    try:
        if "seeds" in exp:
            kw["seeds"] = _ints(exp["seeds"])
        if "out" in exp:
            out = Path(exp["out"])
            kw["out"] = out if out.is_absolute() else base_dir / out
        if "workers" in exp:
            kw["workers"] = int(exp["workers"])
        if "noise_sigmas" in exp:
            kw["noise_sigmas"] = _floats(exp["noise_sigmas"])
        if "noise_seed" in exp:
            kw["noise_seed"] = int(exp["noise_seed"])
        if "families" in exp:
            kw["families"] = _strs(exp["families"])
        if "detections" in exp:
            kw["detections"] = _strs(exp["detections"])

        if cp.has_section("train"):
            t = cp["train"]
            casts = {"batch_size": int, "max_epochs": int, "patience": int, "min_delta": float,
                     "validation_fraction": float, "lr": float}
            unknown = set(t) - set(casts)
            if unknown:
                raise ExperimentError(f"unknown [train] keys {sorted(unknown)}")
            kw["train"] = nncore.TrainConfig(**{k: casts[k](v) for k, v in t.items()})

        if cp.has_section("model"):
            m = cp["model"]
            casts = {"encoder_widths": _ints, "latent_dim": int, "n_qubits": int, "n_layers": int,
                     "entanglement": str, "alpha": float, "beta": float}
            unknown = set(m) - set(casts)
            if unknown:
                raise ExperimentError(f"unknown [model] keys {sorted(unknown)}")
            kw["model"] = {k: casts[k](v) for k, v in m.items()}

        if cp.has_section("detection"):
            d = cp["detection"]
            kw["percentile"] = d.getfloat("percentile", 95.0)
            kw["iforest_trees"] = d.getint("iforest_trees", 100)
            kw["iforest_psi"] = d.getint("iforest_psi", 256)

        if cp.has_section("loao"):
            s = cp["loao"]
            kw["loao_models"] = {"classical": s.get("classical", "auto"), "hqc": s.get("hqc", "auto")}
            kw["loao_detection"] = s.get("detection", "recon_threshold")
    except ValueError as exc:
        raise ExperimentError(f"malformed config value: {exc}") from None

    datasets = {}
    for section in cp.sections():
        if not section.startswith("dataset:"):
            continue
        ds_id = section.split(":", 1)[1].strip()
        s = dict(cp[section])
        kind = s.pop("kind", "csv")
        if kind == "synthetic":
            opts = {k: (float(v) if k in ("noise", "shift") else int(v)) for k, v in s.items()}
            datasets[ds_id] = DatasetEntry(ds_id, "synthetic", options=opts)
            continue
        schema = s.pop("schema", ds_id)
        if schema not in data.BUILTIN_SCHEMAS:
            p = Path(schema)
            schema = str(p if p.is_absolute() else base_dir / p)
        files = {}
        for key, value in s.items():
            paths = [Path(v) for v in _strs(value)]
            files[key] = [p if p.is_absolute() else base_dir / p for p in paths]
        datasets[ds_id] = DatasetEntry(ds_id, "csv", schema, files)
    if not datasets:
        raise ExperimentError("config defines no [dataset:<id>] section")
    return ExperimentConfig(datasets, **kw)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config(DEFAULT_CONFIG)
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


# ---------------------------------------------------------------------------
# snapshots


def _schema_hash(entry: DatasetEntry) -> str:
    if entry.kind == "synthetic":
        blob = json.dumps({"synthetic": entry.options}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
    return data.load_schema(entry.schema).fingerprint()


def snapshot_path(cfg: ExperimentConfig, dataset_id: str, seed: int) -> Path:
    entry = cfg.dataset(dataset_id)
    return cfg.out / "snapshots" / data.snapshot_name(dataset_id, seed, _schema_hash(entry))


def prepare(cfg: ExperimentConfig, dataset_id: str, seed: int) -> tuple[data.DatasetSplit, Path]:
    entry = cfg.dataset(dataset_id)
    if entry.kind == "synthetic":
        split = data.synthetic_dataset(seed, **entry.options)
        split.dataset_id = dataset_id
    else:
        files = {k: v if len(v) > 1 or k == "files" else v[0] for k, v in entry.files.items()}
        split = data.make_splits(dataset_id, files, seed, data.load_schema(entry.schema))
    path = split.save(snapshot_path(cfg, dataset_id, seed),
                      {"config_hash": cfg.config_hash, "seed": seed, "schema_hash": _schema_hash(entry)})
    return split, path


def load_split(cfg: ExperimentConfig, dataset_id: str, seed: int) -> data.DatasetSplit:
    """Load the cached snapshot, preparing it first when absent."""
    path = snapshot_path(cfg, dataset_id, seed)
    if path.exists():
        return data.DatasetSplit.load(path)
    logger.info("snapshot %s missing; preparing", path.name)
    return prepare(cfg, dataset_id, seed)[0]


# ---------------------------------------------------------------------------
# run store


class RunStore:
    """Append-only JSON-lines store. Only the parent process writes."""

    def __init__(self, out: Path) -> None:
        self.path = Path(out) / RUNS_FILE

    def append(self, results: list[RunResult]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            for r in results:
                fh.write(r.to_json() + "\n")
            fh.flush()

    def read(self, dataset: str | None = None) -> list[RunResult]:
        """Latest record per run key."""
        latest = {}
        for r in evalstats.read_results(self.path):
            if dataset is None or r.dataset == dataset:
                latest[r.key] = r
        return list(latest.values())

    def done(self, config_hash: str) -> set[tuple]:
        return {r.key for r in self.read() if r.status == "ok" and r.extra.get("config_hash") == config_hash}


# ---------------------------------------------------------------------------
# single runs


def model_path(cfg: ExperimentConfig, dataset_id: str, config_id: str, seed: int) -> Path:
    return cfg.out / "models" / dataset_id / config_id / f"seed{seed}.npz"


@dataclass
class Trained:
    model: models.AutoencoderModel | models.SupervisedModel
    threshold: anomaly.ThresholdDetector | None
    forest: anomaly.IsolationForest | None
    meta: dict


def _fit_detectors(cfg: ExperimentConfig, model, x_normal: np.ndarray, seed: int):
    threshold = anomaly.fit_threshold(model.reconstruction_errors(x_normal), cfg.percentile)
    z = model.latents(x_normal)
    psi = min(cfg.iforest_psi, z.shape[0])
    forest = anomaly.iforest_fit(z, cfg.iforest_trees, psi, seed)
    return threshold, forest


def train_model(cfg: ExperimentConfig, split: data.DatasetSplit, config_id: str, seed: int,
                x: np.ndarray | None = None, y: np.ndarray | None = None) -> Trained:
    mcfg = cfg.model_config(config_id, split.dataset_id, seed)
    model = models.build_model(mcfg, split.n_features)
    start = time.perf_counter()
    if mcfg.objective == "supervised":
        x = split.x_train if x is None else x
        y = split.y_train if y is None else y
        if len(set(np.asarray(y).tolist())) < 2:
            raise ExperimentError("supervised training needs both normal and attack rows")
        res = nncore.train_loop(model, x, mcfg.train, y=y.astype(float))
        threshold = forest = None
    else:
        x = split.x_train_normal if x is None else x
        res = nncore.train_loop(model, x, mcfg.train)
        threshold, forest = _fit_detectors(cfg, model, x, seed)
    meta = {
        "config_hash": cfg.config_hash,
        "train_seconds": time.perf_counter() - start,
        "epochs_run": res.epochs_run,
        "best_epoch": res.best_epoch,
        "best_val_loss": res.best_val_loss,
        "n_parameters": model.n_parameters(),
        "split_hash": split.content_hash(),
    }
    return Trained(model, threshold, forest, meta)


def save_trained(path: Path, trained: Trained) -> None:
    meta = dict(trained.meta)
    if trained.threshold is not None:
        meta["threshold"] = trained.threshold.to_dict()
    models.save_model(path, trained.model, meta)
    if trained.forest is not None:
        np.savez(path.with_suffix(".det.npz"), **trained.forest.to_arrays())


def load_trained(path: Path) -> Trained:
    model, header = models.load_model(path)
    threshold = forest = None
    if "threshold" in header:
        t = header["threshold"]
        threshold = anomaly.ThresholdDetector(t["percentile"], t["tau"])
    det = path.with_suffix(".det.npz")
    if det.exists():
        with np.load(det) as d:
            forest = anomaly.IsolationForest.from_arrays({k: d[k] for k in d.files})
    return Trained(model, threshold, forest, header)


def scores_for(trained: Trained, detection: str, x: np.ndarray, noise=None) -> np.ndarray:
    if isinstance(trained.model, models.SupervisedModel):
        return trained.model.predict_proba(x)
    if detection == "recon_threshold":
        return trained.model.reconstruction_errors(x, noise=noise)
    if detection == "latent_iforest":
        return trained.forest.score(trained.model.latents(x, noise=noise))
    raise ExperimentError(f"unknown detection mechanism {detection!r}")


def _base_extra(cfg: ExperimentConfig, trained: Trained) -> dict:
    mcfg = trained.model.cfg
    extra = {k: trained.meta[k] for k in ("config_hash", "epochs_run", "best_epoch", "split_hash")}
    if mcfg.qspec is not None:
        q = mcfg.qspec
        extra["qspec"] = {"n_qubits": q.n_qubits, "n_layers": q.n_layers, "embedding": q.embedding,
                          "measurement": q.measurement, "entanglement": q.entanglement}
    return extra


def evaluate(cfg: ExperimentConfig, trained: Trained, split: data.DatasetSplit, config_id: str, seed: int,
             detections, protocol: str = FULL_TEST, x=None, y=None, wall_time: float = 0.0) -> list[RunResult]:
    x = split.x_test if x is None else x
    y = split.y_test if y is None else y
    out = []
    for detection in detections:
        s = scores_for(trained, detection, x)
        extra = _base_extra(cfg, trained)
        if detection == "recon_threshold" and trained.threshold is not None:
            flags = trained.threshold.classify(s)
            extra["tau"] = trained.threshold.tau
            extra["flagged_normal"] = float(flags[y == 0].mean()) if (y == 0).any() else None
            extra["flagged_attack"] = float(flags[y == 1].mean()) if (y == 1).any() else None
        factors = dict(trained.model.cfg.factors)
        factors.pop("detection")
        out.append(RunResult(config_id, split.dataset_id, seed, detection, protocol,
                             evalstats.auroc(s, y), wall_time, "ok", factors, extra))
    return out


def _failed(cfg, config_id, dataset_id, seed, detections, protocol, exc) -> list[RunResult]:
    return [RunResult(config_id, dataset_id, seed, d, protocol, float("nan"), 0.0, "failed", {},
                      {"config_hash": cfg.config_hash, "error": f"{type(exc).__name__}: {exc}"})
            for d in detections]


def run_cell(cfg: ExperimentConfig, dataset_id: str, config_id: str, seed: int,
             detections=None) -> list[RunResult]:
    """Train one model, fit its detectors, score the full test set; one record per detection."""
    detections = tuple(detections or (("supervised",) if config_id == "supervised" else cfg.detections))
    start = time.perf_counter()
    try:
        split = load_split(cfg, dataset_id, seed)
        trained = train_model(cfg, split, config_id, seed)
        save_trained(model_path(cfg, dataset_id, config_id, seed), trained)
        return evaluate(cfg, trained, split, config_id, seed, detections,
                        wall_time=time.perf_counter() - start)
    except (nncore.TrainingDivergedError, FloatingPointError) as exc:
        logger.error("%s/%s seed %d failed: %s", dataset_id, config_id, seed, exc)
        return _failed(cfg, config_id, dataset_id, seed, detections, FULL_TEST, exc)


def _run_cell_task(args) -> list[dict]:
    cfg, dataset_id, config_id, seed, detections = args
    return [dataclasses.asdict(r) for r in run_cell(cfg, dataset_id, config_id, seed, detections)]


def run_many(cfg: ExperimentConfig, tasks: list[tuple[str, str, int]], store: RunStore,
             resume: bool = True) -> list[RunResult]:
    """Execute (dataset, config id, seed) cells in a process pool; the caller's process appends records."""
    done = store.done(cfg.config_hash) if resume else set()
    pending = []
    for dataset_id, config_id, seed in tasks:
        dets = ("supervised",) if config_id == "supervised" else cfg.detections
        if all((config_id, dataset_id, seed, d, FULL_TEST) in done for d in dets):
            continue
        pending.append((cfg, dataset_id, config_id, seed, dets))
    logger.info("%d cells to run (%d already in the store)", len(pending), len(tasks) - len(pending))
    # snapshots are written once up front so workers never race on them
    for dataset_id, seed in sorted({(t[1], t[3]) for t in pending}):
        load_split(cfg, dataset_id, seed)

    results: list[RunResult] = []
    if cfg.workers == 1 or len(pending) <= 1:
        for task in pending:
            rs = [RunResult(**d) for d in _run_cell_task(task)]
            store.append(rs)
            results.extend(rs)
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for out in pool.map(_run_cell_task, pending):
                rs = [RunResult(**d) for d in out]
                store.append(rs)
                results.extend(rs)
    return results


def grid_tasks(cfg: ExperimentConfig, dataset_id: str) -> list[tuple[str, str, int]]:
    return [(dataset_id, cid, seed) for cid in cfg.grid_ids() for seed in cfg.seeds]


# ---------------------------------------------------------------------------
# leave-one-attack-out


def _resolve_role(cfg: ExperimentConfig, store: RunStore, dataset_id: str, family: str) -> str:
    choice = cfg.loao_models[family]
    if choice != "auto":
        return choice
    summaries = [s for s in evalstats.aggregate(r for r in store.read(dataset_id) if r.protocol == FULL_TEST)
                 if s.config_id.startswith(family) and s.detection == cfg.loao_detection]
    if summaries:
        return summaries[0].config_id
    return "classical-ae" if family == "classical" else "hqc-early-expval-ae"


def loao_roles(cfg: ExperimentConfig, store: RunStore, dataset_id: str) -> dict[str, tuple[str, str]]:
    return {
        "Supervised (Classical)": ("supervised", "supervised"),
        "Unsupervised (Classical)": (_resolve_role(cfg, store, dataset_id, "classical"), cfg.loao_detection),
        "Unsupervised (HQC)": (_resolve_role(cfg, store, dataset_id, "hqc"), cfg.loao_detection),
    }


def _load_or_train(cfg, split, dataset_id, config_id, seed) -> Trained:
    path = model_path(cfg, dataset_id, config_id, seed)
    if path.exists():
        trained = load_trained(path)
        if (trained.meta.get("config_hash") == cfg.config_hash
                and trained.meta.get("split_hash") == split.content_hash()):
            return trained
    trained = train_model(cfg, split, config_id, seed)
    save_trained(path, trained)
    return trained


def loao_seed(cfg: ExperimentConfig, dataset_id: str, roles: dict, seed: int) -> list[RunResult]:
    """All LOAO records for one seed: supervised retrained per plan, unsupervised trained once."""
    split = load_split(cfg, dataset_id, seed)
    plans = data.make_loao_plans(split)
    out = []
    for config_id, detection in roles.values():
        start = time.perf_counter()
        if config_id == "supervised":
            full = _load_or_train(cfg, split, dataset_id, config_id, seed)
            out += evaluate(cfg, full, split, config_id, seed, (detection,), wall_time=time.perf_counter() - start)
            for plan in plans:
                t0 = time.perf_counter()
                trained = train_model(cfg, split, config_id, seed, plan.train_x, plan.train_y)
                rs = evaluate(cfg, trained, split, config_id, seed, (detection,), f"loao:{plan.held_out}",
                              plan.eval_x, plan.eval_y, time.perf_counter() - t0)
                rs[0].extra.update(train_rows=int(len(plan.train_y)),
                                   held_out_in_train=int((plan.train_cat == plan.held_out).sum()))
                out += rs
        else:
            trained = _load_or_train(cfg, split, dataset_id, config_id, seed)
            out += evaluate(cfg, trained, split, config_id, seed, (detection,), wall_time=time.perf_counter() - start)
            for plan in plans:
                out += evaluate(cfg, trained, split, config_id, seed, (detection,), f"loao:{plan.held_out}",
                                plan.eval_x, plan.eval_y)
    sizes = {f"loao:{p.held_out}": int(len(p.eval_y)) for p in plans}
    for r in out:
        if r.protocol in sizes:
            r.extra["eval_rows"] = sizes[r.protocol]
    return out


def _loao_task(args) -> list[dict]:
    cfg, dataset_id, roles, seed = args
    return [dataclasses.asdict(r) for r in loao_seed(cfg, dataset_id, roles, seed)]


def run_loao(cfg: ExperimentConfig, dataset_id: str, store: RunStore) -> tuple[dict, list[RunResult]]:
    roles = loao_roles(cfg, store, dataset_id)
    tasks = [(cfg, dataset_id, roles, seed) for seed in cfg.seeds]
    for seed in cfg.seeds:
        load_split(cfg, dataset_id, seed)
    results: list[RunResult] = []
    if cfg.workers == 1:
        outputs = map(_loao_task, tasks)
        for out in outputs:
            rs = [RunResult(**d) for d in out]
            store.append(rs)
            results += rs
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for out in pool.map(_loao_task, tasks):
                rs = [RunResult(**d) for d in out]
                store.append(rs)
                results += rs
    return roles, results


# ---------------------------------------------------------------------------
# noise sweep


def noise_protocol(sigma: float) -> str:
    return f"noise:{sigma:g}"


def best_hqc(cfg: ExperimentConfig, store: RunStore, dataset_id: str) -> evalstats.Summary:
    """Highest mean AUROC over seeds; ties go to the lower std."""
    full = [r for r in store.read(dataset_id) if r.protocol == FULL_TEST and r.config_id.startswith("hqc")]
    summaries = evalstats.aggregate(full)
    if not summaries:
        raise ExperimentError(f"no completed HQC runs for {dataset_id}; run the grid first")
    return summaries[0]


def run_noise(cfg: ExperimentConfig, dataset_id: str, store: RunStore,
              config_id: str | None = None, detection: str | None = None):
    if config_id is None:
        best = best_hqc(cfg, store, dataset_id)
        config_id, detection = best.config_id, best.detection
    detection = detection or "recon_threshold"
    if not config_id.startswith("hqc"):
        raise ExperimentError("the noise sweep needs an HQC model")
    by_seed = {}
    for seed in cfg.seeds:
        split = load_split(cfg, dataset_id, seed)
        trained = _load_or_train(cfg, split, dataset_id, config_id, seed)
        by_seed[seed] = (split, trained)
    # every seed owns its split; sweep each separately and merge rows
    per_seed_rows = {
        seed: evalstats.noise_sweep({seed: lambda n, t=trained, s=split: scores_for(t, detection, s.x_test, n)},
                                    split.y_test, cfg.noise_sigmas, cfg.noise_seed)
        for seed, (split, trained) in by_seed.items()
    }
    records = []
    for i, sigma in enumerate(cfg.noise_sigmas):
        for seed, rows in per_seed_rows.items():
            row = rows[i]
            records.append(RunResult(
                config_id, dataset_id, seed, detection, noise_protocol(sigma), row.per_seed[seed], 0.0, "ok",
                by_seed[seed][1].model.cfg.factors | {"detection": detection},
                {"config_hash": cfg.config_hash, "sigma": sigma, "f_avg": row.f_avg, "r": row.r,
                 "noise_seed": evalstats.noise_seed(cfg.noise_seed, seed, i) if sigma else None},
            ))
    store.append(records)
    return config_id, detection, noise_table(records, cfg.noise_sigmas)


def noise_table(records: list[RunResult], sigmas=None) -> list[dict]:
    groups: dict[float, list[RunResult]] = {}
    for r in records:
        if r.protocol.startswith("noise:") and r.status == "ok":
            groups.setdefault(float(r.extra["sigma"]), []).append(r)
    rows = []
    for sigma in sorted(groups) if sigmas is None else sigmas:
        rs = sorted(groups.get(float(sigma), []), key=lambda r: r.seed)
        if not rs:
            continue
        v = np.array([r.auroc for r in rs])
        f_avg, r_inf = avg_gate_fidelity(float(sigma))
        rows.append({"sigma": float(sigma), "F_avg": f_avg, "r": r_inf, "mean_auroc": float(v.mean()),
                     "std_auroc": float(v.std(ddof=1)) if v.size > 1 else 0.0, "n_seeds": int(v.size)})
    return rows


# ---------------------------------------------------------------------------
# reports


def write_reports(cfg: ExperimentConfig, store: RunStore, dataset_id: str) -> dict[str, Path]:
    """Regenerate every table for ``dataset_id`` from the run store alone."""
    results = store.read(dataset_id)
    if not results:
        raise ExperimentError(f"no run records for {dataset_id} in {store.path}")
    rdir = cfg.out / "reports" / dataset_id
    header = {"config_hash": cfg.config_hash, "dataset": dataset_id, "seeds": ",".join(map(str, cfg.seeds))}
    failed = [r for r in results if r.status != "ok"]
    if failed:
        header["failed_runs"] = len(failed)
    written = {}
    full = [r for r in results if r.protocol == FULL_TEST]
    if full:
        summary = [dataclasses.asdict(s) for s in evalstats.aggregate(full, len(cfg.seeds))]
        expected = {(cid, d) for cid in cfg.grid_ids() for d in cfg.detections}
        present = {(s["config_id"], s["detection"]) for s in summary}
        missing = sorted(expected - present)
        h = dict(header, missing_cells=len(missing)) if missing else header
        written["summary"] = evalstats.write_csv(rdir / "summary.csv", summary, h)
        written["best_vs_best"] = evalstats.write_csv(rdir / "best_vs_best.csv", evalstats.best_vs_best(full), header)
        if any(r.config_id.startswith("hqc") for r in full):
            written["factors"] = evalstats.write_csv(rdir / "factors.csv", evalstats.factor_tests(full), header)
            written["interaction"] = evalstats.write_csv(rdir / "interaction.csv", evalstats.interaction_table(full), header)
    if any(r.protocol.startswith("loao:") for r in results):
        roles = loao_roles(cfg, store, dataset_id)
        summary, breakdown = evalstats.loao_table(results, roles)
        h = dict(header, loao_std="mean over seeds per held-out category, then std across categories")
        written["loao"] = evalstats.write_csv(rdir / "loao.csv", summary, h)
        written["loao_breakdown"] = evalstats.write_csv(rdir / "loao_breakdown.csv", breakdown, header)
    noisy = [r for r in results if r.protocol.startswith("noise:")]
    if noisy:
        # the most recently swept model wins
        chosen = (noisy[-1].config_id, noisy[-1].detection)
        noisy = [r for r in noisy if (r.config_id, r.detection) == chosen]
        h = dict(header, model=f"{chosen[0]} ({chosen[1]})")
        written["noise"] = evalstats.write_csv(rdir / "noise.csv", noise_table(noisy), h)
    return written
