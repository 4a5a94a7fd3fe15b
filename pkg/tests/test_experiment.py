import json

import numpy as np
import pytest

from hqcae import evalstats, experiment, models
from hqcae.experiment import ExperimentError, RunStore

SMALL = """
[experiment]
seeds = 0, 1
out = out

[train]
max_epochs = 2
batch_size = 128

[dataset:synthetic]
kind = synthetic
n_normal = 300
n_test_normal = 100
n_anomalies = 20
n_train_anomalies = 20
dim = 16
"""


@pytest.fixture
def cfg(tmp_path):
    return experiment.parse_config(SMALL, tmp_path)


def test_parse_defaults():
    cfg = experiment.load_config(None)
    assert cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg.noise_sigmas == evalstats.DEFAULT_SIGMAS
    assert list(cfg.datasets) == ["synthetic"]
    assert len(cfg.grid_ids()) == 20


def test_parse_small(cfg, tmp_path):
    assert cfg.seeds == (0, 1)
    assert cfg.out == tmp_path / "out"
    assert cfg.train.max_epochs == 2
    assert cfg.datasets["synthetic"].options["dim"] == 16


def test_hash_stable_and_ignores_out(tmp_path):
    a = experiment.parse_config(SMALL, tmp_path)
    b = experiment.parse_config(SMALL.replace("out = out", "out = elsewhere\nworkers = 3"), tmp_path)
    c = experiment.parse_config(SMALL.replace("max_epochs = 2", "max_epochs = 3"), tmp_path)
    assert a.config_hash == b.config_hash
    assert a.config_hash != c.config_hash


@pytest.mark.parametrize("text, match", [
    ("[experiment]\nseeds = 0\n", "dataset"),
    ("[experiment]\nseeds =\n[dataset:s]\nkind = synthetic\n", "seed"),
    ("[bogus]\n[dataset:s]\nkind = synthetic\n", "bogus"),
    ("[train]\nepochs = 3\n[dataset:s]\nkind = synthetic\n", "epochs"),
    ("[dataset:x]\nschema = /no/such/schema.ini\n", "schema"),
    ("[experiment]\nworkers = zero\n[dataset:s]\nkind = synthetic\n", "malformed"),
])
def test_config_errors(text, match):
    with pytest.raises(ExperimentError, match=match):
        experiment.parse_config(text)


def test_model_overrides(tmp_path):
    cfg = experiment.parse_config(SMALL + "\n[model]\nn_qubits = 3\nn_layers = 1\nlatent_dim = 4\n", tmp_path)
    m = cfg.model_config("hqc-late-probs-vae", "synthetic", 1)
    assert m.qspec.n_qubits == 3 and m.qspec.n_layers == 1 and m.latent_dim == 4
    assert m.train.seed == 1 and m.seed == 1
    assert cfg.model_config("supervised", "synthetic", 0).objective == "supervised"


def test_prepare_is_deterministic(cfg):
    a, pa = experiment.prepare(cfg, "synthetic", 0)
    b, pb = experiment.prepare(cfg, "synthetic", 0)
    assert pa == pb and a.content_hash() == b.content_hash()
    loaded = experiment.load_split(cfg, "synthetic", 0)
    assert loaded.content_hash() == a.content_hash()


def test_unknown_dataset(cfg):
    with pytest.raises(ExperimentError, match="nsl"):
        experiment.prepare(cfg, "nsl", 0)


def test_run_cell_records_and_artifacts(cfg):
    rs = experiment.run_cell(cfg, "synthetic", "hqc-early-expval-ae", 0)
    assert [r.detection for r in rs] == list(models.DETECTIONS)
    for r in rs:
        assert r.status == "ok" and 0 <= r.auroc <= 1
        assert r.extra["config_hash"] == cfg.config_hash
        assert r.extra["qspec"] == {"n_qubits": 4, "n_layers": 2, "embedding": "amplitude",
                                    "measurement": "expval", "entanglement": "all_pairs"}
        assert r.factors["placement"] == "early"
    path = experiment.model_path(cfg, "synthetic", "hqc-early-expval-ae", 0)
    trained = experiment.load_trained(path)
    assert trained.meta["config_hash"] == cfg.config_hash and trained.meta["seed"] == 0
    split = experiment.load_split(cfg, "synthetic", 0)
    scores = experiment.scores_for(trained, "recon_threshold", split.x_test)
    assert evalstats.auroc(scores, split.y_test) == rs[0].auroc
    scores = experiment.scores_for(trained, "latent_iforest", split.x_test)
    assert evalstats.auroc(scores, split.y_test) == rs[1].auroc


def test_run_cell_deterministic(cfg):
    a = experiment.run_cell(cfg, "synthetic", "classical-vae-reg", 1)
    b = experiment.run_cell(cfg, "synthetic", "classical-vae-reg", 1)
    assert [r.auroc for r in a] == [r.auroc for r in b]


def test_run_cell_records_divergence(cfg, monkeypatch):
    from hqcae import nncore

    def boom(*a, **k):
        raise nncore.TrainingDivergedError("non-finite training loss")

    monkeypatch.setattr(nncore, "train_loop", boom)
    rs = experiment.run_cell(cfg, "synthetic", "classical-ae", 0)
    assert all(r.status == "failed" for r in rs)
    assert "non-finite" in rs[0].extra["error"]


def test_store_append_and_latest(tmp_path):
    store = RunStore(tmp_path)
    r1 = evalstats.RunResult("classical-ae", "d", 0, "recon_threshold", "full_test", 0.5)
    r2 = evalstats.RunResult("classical-ae", "d", 0, "recon_threshold", "full_test", 0.7)
    store.append([r1])
    store.append([r2])
    assert len(store.path.read_text().splitlines()) == 2
    [latest] = store.read()
    assert latest.auroc == 0.7


def test_grid_resume_and_reports(tmp_path):
    cfg = experiment.parse_config(SMALL.replace("seeds = 0, 1", "seeds = 0, 1\nfamilies = classical"), tmp_path)
    store = RunStore(cfg.out)
    tasks = experiment.grid_tasks(cfg, "synthetic")
    assert len(tasks) == 4 * 2
    first = experiment.run_many(cfg, tasks, store)
    assert len(first) == 4 * 2 * 2
    again = experiment.run_many(cfg, tasks, store)
    assert again == []
    written = experiment.write_reports(cfg, store, "synthetic")
    assert {"summary", "best_vs_best"} <= set(written)
    text = written["summary"].read_text()
    assert f"# config_hash: {cfg.config_hash}" in text


def test_reports_pure_function_of_store(tmp_path):
    cfg = experiment.parse_config(SMALL.replace("seeds = 0, 1", "seeds = 0, 1\nfamilies = classical"), tmp_path)
    store = RunStore(cfg.out)
    experiment.run_many(cfg, experiment.grid_tasks(cfg, "synthetic"), store)
    a = experiment.write_reports(cfg, store, "synthetic")["summary"].read_text()
    before = store.path.read_text()
    b = experiment.write_reports(cfg, store, "synthetic")["summary"].read_text()
    assert a == b and store.path.read_text() == before


def test_loao_mechanics(cfg):
    store = RunStore(cfg.out)
    roles, results = experiment.run_loao(cfg, "synthetic", store)
    assert set(roles) == {"Supervised (Classical)", "Unsupervised (Classical)", "Unsupervised (HQC)"}
    loao = [r for r in results if r.protocol.startswith("loao:")]
    # 3 model roles x 2 categories x 2 seeds
    assert len(loao) == 12
    for r in loao:
        if r.config_id == "supervised":
            assert r.extra["held_out_in_train"] == 0
    split = experiment.load_split(cfg, "synthetic", 0)
    per_cat = (split.y_test == 0).sum() + (split.cat_test == "scatter").sum()
    assert all(r.extra["eval_rows"] == per_cat for r in loao if r.protocol == "loao:scatter")
    summary, breakdown = evalstats.loao_table(results, roles)
    assert [row["protocol"] for row in summary] == ["Full Test"] * 3 + ["LOAO"] * 3
    assert len(breakdown) == 6


def test_noise_requires_hqc_runs(cfg):
    with pytest.raises(ExperimentError, match="HQC"):
        experiment.run_noise(cfg, "synthetic", RunStore(cfg.out))


def test_noise_sigma_zero_matches_noiseless(cfg):
    store = RunStore(cfg.out)
    tasks = [("synthetic", "hqc-early-expval-ae", s) for s in cfg.seeds]
    base = experiment.run_many(cfg, tasks, store)
    config_id, detection, rows = experiment.run_noise(cfg, "synthetic", store)
    assert config_id == "hqc-early-expval-ae"
    clean = {r.seed: r.auroc for r in base if r.detection == detection}
    noisy0 = {r.seed: r.auroc for r in store.read() if r.protocol == experiment.noise_protocol(0.0)}
    assert noisy0 == clean
    assert [row["sigma"] for row in rows] == list(cfg.noise_sigmas)
    assert rows[1]["r"] == pytest.approx(1.6666e-5, rel=1e-3)
    assert "noise" in experiment.write_reports(cfg, store, "synthetic")


def test_best_hqc_tie_break(cfg):
    store = RunStore(cfg.out)

    def rec(cid, seed, a):
        return evalstats.RunResult(cid, "synthetic", seed, "recon_threshold", "full_test", a,
                                   factors={"family": "hqc"})

    store.append([rec("hqc-early-expval-ae", 0, 0.5), rec("hqc-early-expval-ae", 1, 0.75),
                  rec("hqc-late-probs-ae", 0, 0.625), rec("hqc-late-probs-ae", 1, 0.625),
                  rec("classical-ae", 0, 0.99), rec("classical-ae", 1, 0.99)])
    best = experiment.best_hqc(cfg, store, "synthetic")
    assert best.config_id == "hqc-late-probs-ae"


def test_worker_pool_matches_serial(tmp_path):
    text = SMALL.replace("seeds = 0, 1", "seeds = 0, 1\nfamilies = classical")
    serial = experiment.parse_config(text, tmp_path / "a")
    pooled = experiment.parse_config(text.replace("out = out", "out = out\nworkers = 2"), tmp_path / "a")
    pooled.out = tmp_path / "b" / "out"
    tasks = [("synthetic", "classical-ae", s) for s in (0, 1)]
    a = experiment.run_many(serial, tasks, RunStore(serial.out))
    b = experiment.run_many(pooled, tasks, RunStore(pooled.out))
    assert sorted((r.key, r.auroc) for r in a) == sorted((r.key, r.auroc) for r in b)


def test_csv_dataset_end_to_end(tmp_path):
    rng = np.random.default_rng(0)
    for name, n in (("train.csv", 200), ("test.csv", 80)):
        lab = rng.integers(0, 2, n)
        lines = ["v1,v2,kind,cat,y"]
        for y in lab:
            v = rng.normal(size=2) + 4 * y
            lines.append(f"{v[0]},{v[1]},{rng.choice(['a', 'b'])},{'x' if y else 'none'},{y}")
        (tmp_path / name).write_text("\n".join(lines) + "\n")
    (tmp_path / "toy.ini").write_text(
        "[dataset]\nid = toy\nnormal_labels = 0\n\n[columns]\nv1 = numeric\nv2 = numeric\n"
        "kind = categorical\ncat = attack_category\ny = label\n")
    text = ("[experiment]\nseeds = 0\nout = out\n[train]\nmax_epochs = 2\n"
            "[dataset:toy]\nschema = toy.ini\ntrain = train.csv\ntest = test.csv\n")
    cfg = experiment.parse_config(text, tmp_path)
    split, path = experiment.prepare(cfg, "toy", 0)
    assert split.n_features == 4
    meta = json.loads(str(np.load(path)["meta"]))
    assert meta["config_hash"] == cfg.config_hash and meta["seed"] == 0
    [r1, r2] = experiment.run_cell(cfg, "toy", "classical-ae", 0)
    assert r1.status == "ok"
