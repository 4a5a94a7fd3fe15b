"""AUROC, seed aggregation, paired t-tests, noise sweeps and the report tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .qsim import NoiseConfig, avg_gate_fidelity

logger = logging.getLogger(__name__)

DEFAULT_SIGMAS = (0.0, 0.01, 0.03, 0.1, 0.3, 1.0)
FULL_TEST = "full_test"


@dataclass
class RunResult:
    config_id: str
    dataset: str
    seed: int
    detection: str
    protocol: str
    auroc: float
    wall_time: float = 0.0
    status: str = "ok"
    factors: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.status == "ok" and not 0.0 <= self.auroc <= 1.0:
            raise ValueError(f"auroc must lie in [0, 1], got {self.auroc}")

    @property
    def key(self) -> tuple:
        return (self.config_id, self.dataset, self.seed, self.detection, self.protocol)

    @property
    def cell(self) -> tuple:
        """Everything except the seed."""
        return (self.dataset, self.config_id, self.detection, self.protocol)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> RunResult:
        return cls(**json.loads(line))


def read_results(path: str | Path) -> list[RunResult]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open() as fh:
        return [RunResult.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# metrics


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg), ties count one half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    ranks = stats.rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class Summary:
    dataset: str
    config_id: str
    detection: str
    protocol: str
    mean: float
    std: float
    n: int


def _sample_std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(results: Iterable[RunResult], expected_seeds: int | None = None) -> list[Summary]:
    """Mean and sample std across seeds per cell, best first. Cells with one seed are dropped."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in results:
        if r.status == "ok":
            groups[r.cell].append(r.auroc)
    out = []
    for cell, values in groups.items():
        if len(values) < 2:
            logger.warning("cell %s has a single seed; excluded from aggregation", cell)
            continue
        if expected_seeds is not None and len(values) < expected_seeds:
            logger.warning("cell %s is missing %d seeds", cell, expected_seeds - len(values))
        v = np.asarray(values)
        out.append(Summary(*cell, float(v.mean()), _sample_std(v), len(v)))
    out.sort(key=lambda s: (-s.mean, s.std, s.config_id, s.detection))
    return out


@dataclass
class StatTestResult:
    delta: float
    ci_low: float
    ci_high: float
    p_value: float
    d_z: float
    significant: bool
    n: int
    t_stat: float
    note: str = ""

    def row(self) -> dict:
        return {
            "delta": self.delta,
            "ci99_low": self.ci_low,
            "ci99_high": self.ci_high,
            "p": self.p_value,
            "d_z": self.d_z,
            "significant": self.significant,
        }


def paired_ttest(a: np.ndarray, b: np.ndarray, alpha: float = 0.01) -> StatTestResult:
    """Two-sided paired t-test on ``a - b`` with a ``1 - alpha`` confidence interval."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return StatTestResult(0.0, 0.0, 0.0, 1.0, 0.0, False, n, 0.0, "all differences zero")
        return StatTestResult(
            mean, mean, mean, 0.0, math.copysign(math.inf, mean), True, n,
            math.copysign(math.inf, mean), "zero-variance differences"
        )
    se = sd / math.sqrt(n)
    t = mean / se
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    half = float(stats.t.ppf(1.0 - alpha / 2.0, n - 1)) * se
    return StatTestResult(mean, mean - half, mean + half, p, mean / sd, p < alpha, n, t)


# ---------------------------------------------------------------------------
# noise sweep


@dataclass
class NoiseRow:
    sigma: float
    f_avg: float
    r: float
    mean_auroc: float
    std_auroc: float
    per_seed: dict


def noise_seed(base_seed: int, run_seed: int, sigma_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, run_seed, sigma_index]).generate_state(1)[0])


def noise_sweep(
    scorers: dict[int, Callable[[NoiseConfig | None], np.ndarray]],
    labels: np.ndarray,
    sigmas: Iterable[float] = DEFAULT_SIGMAS,
    base_seed: int = 0,
) -> list[NoiseRow]:
    """Evaluate each seed's scorer under every noise level.

    ``scorers`` maps the model seed to a function returning anomaly scores for
    the test set given a noise configuration (``None`` = noiseless).
    """
    rows = []
    for i, sigma in enumerate(sigmas):
        per_seed = {}
        for seed, scorer in sorted(scorers.items()):
            noise = None if sigma == 0 else NoiseConfig(sigma, noise_seed(base_seed, seed, i))
            per_seed[seed] = auroc(scorer(noise), labels)
        values = np.array(list(per_seed.values()))
        f_avg, r = avg_gate_fidelity(sigma)
        rows.append(NoiseRow(float(sigma), f_avg, r, float(values.mean()), _sample_std(values), per_seed))
    return rows


# ---------------------------------------------------------------------------
# report tables

FACTORS = (
    ("Detection Mechanism", "detection", ("recon_threshold", "latent_iforest"),
     ("Recon. Error Thresholding", "Downstream Model (IF)")),
    ("Variational Objective", "variational", (False, True), ("Standard AE", "VAE")),
    ("Latent Regularization", "latent_reg", (False, True), ("Without Regularization", "With Regularization")),
    ("QLayer Placement", "placement", ("early", "late"), ("Early Stage", "Late Stage")),
    ("QLayer Measurement", "measurement", ("expval", "probs"), ("Expectation Value", "Probabilities")),
)


def _family(r: RunResult) -> str:
    return r.factors.get("family", r.config_id.split("-")[0])


def _ok(results: Iterable[RunResult], protocol: str = FULL_TEST) -> list[RunResult]:
    return [r for r in results if r.status == "ok" and r.protocol == protocol]


def best_vs_best(results: Iterable[RunResult], alpha: float = 0.01) -> list[dict]:
    """Best classical vs best HQC cell per dataset, paired by seed (delta = HQC - classical)."""
    results = _ok(results)
    rows = []
    for dataset in sorted({r.dataset for r in results}):
        summaries = aggregate(r for r in results if r.dataset == dataset)
        best = {}
        for fam in ("classical", "hqc"):
            cands = [s for s in summaries if s.config_id.startswith(fam)]
            if cands:
                best[fam] = cands[0]
        row = {"dataset": dataset}
        for fam, s in best.items():
            row[f"{fam}_config"] = f"{s.config_id} ({s.detection})"
            row[f"{fam}_mean"] = s.mean
            row[f"{fam}_std"] = s.std
        if len(best) == 2:
            by_seed = {
                fam: {r.seed: r.auroc for r in results
                      if (r.dataset, r.config_id, r.detection) == (dataset, s.config_id, s.detection)}
                for fam, s in best.items()
            }
            seeds = sorted(set(by_seed["classical"]) & set(by_seed["hqc"]))
            if len(seeds) >= 2:
                test = paired_ttest(
                    np.array([by_seed["hqc"][k] for k in seeds]),
                    np.array([by_seed["classical"][k] for k in seeds]),
                    alpha,
                )
                row.update(test.row())
                row["delta_pct"] = 100.0 * test.delta / row["classical_mean"]
        rows.append(row)
    return rows


def factor_tests(results: Iterable[RunResult], alpha: float = 0.01) -> list[dict]:
    """Paired tests for each design factor over HQC runs.

    Pairs share dataset, seed and every other factor level.
    """
    hqc = [r for r in _ok(results) if _family(r) == "hqc"]
    rows = []
    for name, key, levels, labels in FACTORS:
        buckets: dict[tuple, dict] = defaultdict(dict)
        level_values: dict = {lv: [] for lv in levels}
        for r in hqc:
            factors = dict(r.factors, detection=r.detection)
            level = factors.get(key)
            if level not in levels:
                continue
            level_values[level].append(r.auroc)
            others = tuple(sorted((k, v) for k, v in factors.items() if k != key))
            buckets[(r.dataset, r.seed, others)][level] = r.auroc
        pairs = [(b[levels[0]], b[levels[1]]) for b in buckets.values() if len(b) == 2]
        row = {"factor": name, "first": labels[0], "second": labels[1]}
        for tag, lv in zip(("first", "second"), levels):
            v = np.asarray(level_values[lv])
            row[f"{tag}_mean"] = float(v.mean()) if v.size else math.nan
            row[f"{tag}_std"] = _sample_std(v) if v.size else math.nan
        row["n_pairs"] = len(pairs)
        if len(pairs) >= 2:
            a, b = map(np.array, zip(*pairs))
            row.update(paired_ttest(a, b, alpha).row())
        rows.append(row)
    return rows


def interaction_table(results: Iterable[RunResult]) -> list[dict]:
    """Mean and std of HQC AUROC for each placement x measurement combination."""
    hqc = [r for r in _ok(results) if _family(r) == "hqc"]
    rows = []
    for placement in ("early", "late"):
        row = {"placement": placement}
        for measurement in ("expval", "probs"):
            v = np.array([r.auroc for r in hqc
                          if r.factors.get("placement") == placement and r.factors.get("measurement") == measurement])
            row[f"{measurement}_mean"] = float(v.mean()) if v.size else math.nan
            row[f"{measurement}_std"] = _sample_std(v) if v.size else math.nan
        rows.append(row)
    return rows


def loao_table(results: Iterable[RunResult], roles: dict[str, tuple[str, str]]) -> tuple[list[dict], list[dict]]:
    """Summary rows for the full-test and leave-one-attack-out protocols.

    ``roles`` maps a row label (e.g. "Supervised (Classical)") to
    ``(config_id, detection)``. LOAO cells average seeds within each held-out
    category first, then report mean and std across categories. Returns the
    summary rows and the per-category breakdown.
    """
    results = [r for r in results if r.status == "ok"]
    summary, breakdown = [], []
    datasets = sorted({r.dataset for r in results})
    for protocol in ("Full Test", "LOAO"):
        for label, (config_id, detection) in roles.items():
            row = {"protocol": protocol, "model": label}
            for dataset in datasets:
                mine = [r for r in results
                        if (r.dataset, r.config_id, r.detection) == (dataset, config_id, detection)]
                if protocol == "Full Test":
                    v = np.array([r.auroc for r in mine if r.protocol == FULL_TEST])
                else:
                    per_cat: dict[str, list[float]] = defaultdict(list)
                    for r in mine:
                        if r.protocol.startswith("loao:"):
                            per_cat[r.protocol[5:]].append(r.auroc)
                    for cat, vals in sorted(per_cat.items()):
                        breakdown.append({"dataset": dataset, "model": label, "held_out": cat,
                                          "mean": float(np.mean(vals)), "std": _sample_std(np.array(vals)),
                                          "n_seeds": len(vals)})
                    v = np.array([np.mean(vals) for _, vals in sorted(per_cat.items())])
                row[f"{dataset}_mean"] = float(v.mean()) if v.size else math.nan
                row[f"{dataset}_std"] = _sample_std(v) if v.size else math.nan
            summary.append(row)
    return summary, breakdown


def noise_rows(rows: list[NoiseRow]) -> list[dict]:
    return [{"sigma": r.sigma, "F_avg": r.f_avg, "r": r.r, "mean_auroc": r.mean_auroc, "std_auroc": r.std_auroc}
            for r in rows]


def write_csv(path: str | Path, rows: list[dict], header: dict | None = None) -> Path:
    """Write dict rows; ``header`` entries become leading ``# key: value`` comment lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}: {v}\n")
        if rows:
            fields = list(dict.fromkeys(k for row in rows for k in row))
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    return path


def format_table(rows: list[dict], digits: int = 4) -> str:
    if not rows:
        return "(no rows)"
    fields = list(dict.fromkeys(k for row in rows for k in row))

    def fmt(v) -> str:
        if isinstance(v, bool):
            return "yes" if v else "no"
        if isinstance(v, float):
            return "-" if math.isnan(v) else f"{v:.{digits}f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.3e}"
        return str(v)

    cells = [[fmt(row.get(f, "")) for f in fields] for row in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) for i, f in enumerate(fields)]
    buf = io.StringIO()
    buf.write("  ".join(f.ljust(w) for f, w in zip(fields, widths)) + "\n")
    for c in cells:
        buf.write("  ".join(x.ljust(w) for x, w in zip(c, widths)) + "\n")
    return buf.getvalue().rstrip("\n")
