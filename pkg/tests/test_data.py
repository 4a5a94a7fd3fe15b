import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hqcae import data
from hqcae.data import FeatureSchema, SchemaError


def toy_schema(**kw):
    cols = {"dur": "numeric", "proto": "categorical", "cat": "attack_category", "label": "label"}
    return FeatureSchema("toy", kw.pop("columns", cols), **kw)


def write(path, text):
    path.write_text(text)
    return path


TOY = "dur,proto,cat,label\n1.0,tcp,Normal,0\n2.0,udp,DoS,1\n3.0,tcp,Probe,1\n"


# --- schema


def test_builtin_schemas_load():
    for name in data.BUILTIN_SCHEMAS:
        s = data.load_schema(name)
        assert s.dataset_id == name
        assert s.label_column


def test_nsl_kdd_schema_is_positional_with_41_features():
    s = data.load_schema("nsl_kdd")
    assert not s.header
    feats = [c for c, k in s.columns.items() if k in ("numeric", "categorical")]
    assert len(feats) == 41
    assert s.category_map["neptune"] == "dos"


def test_schema_needs_one_label():
    with pytest.raises(SchemaError):
        FeatureSchema("x", {"a": "numeric"})
    with pytest.raises(SchemaError):
        FeatureSchema("x", {"a": "label", "b": "label"})


def test_schema_at_most_one_category():
    with pytest.raises(SchemaError):
        FeatureSchema("x", {"a": "label", "b": "attack_category", "c": "attack_category"})


def test_schema_unknown_kind():
    with pytest.raises(SchemaError):
        FeatureSchema("x", {"a": "label", "b": "float"})


def test_schema_from_path(tmp_path):
    p = write(tmp_path / "s.ini", "[dataset]\nid = mine\n\n[columns]\nv = numeric\ny = label\n")
    s = data.load_schema(p)
    assert s.dataset_id == "mine" and s.columns == {"v": "numeric", "y": "label"}


def test_missing_schema_file():
    with pytest.raises(FileNotFoundError):
        data.load_schema("/nonexistent/schema.ini")


# --- parse_csv


def test_parse_three_rows_in_order(tmp_path):
    rec = data.parse_csv(write(tmp_path / "a.csv", TOY), toy_schema(normal_labels=("0",)))
    assert len(rec) == 3
    assert list(rec.frame["dur"]) == [1.0, 2.0, 3.0]
    assert list(rec.labels) == [0, 1, 1]
    assert list(rec.categories) == ["normal", "DoS", "Probe"]


def test_parse_empty_data_section(tmp_path):
    rec = data.parse_csv(write(tmp_path / "a.csv", "dur,proto,cat,label\n"), toy_schema())
    assert len(rec) == 0 and rec.n_dropped == 0


def test_parse_drops_non_numeric(tmp_path):
    text = TOY + "abc,tcp,DoS,1\n4.0,,DoS,1\ninf,tcp,DoS,1\n5.0,tcp,Normal,0\n"
    rec = data.parse_csv(write(tmp_path / "a.csv", text), toy_schema())
    assert len(rec) == 4
    assert rec.n_dropped == 3


def test_parse_header_mismatch(tmp_path):
    with pytest.raises(SchemaError, match="proto"):
        data.parse_csv(write(tmp_path / "a.csv", "dur,cat,label\n1,Normal,0\n"), toy_schema())


def test_parse_unlisted_column_without_default(tmp_path):
    with pytest.raises(SchemaError, match="extra"):
        data.parse_csv(write(tmp_path / "a.csv", "dur,proto,cat,label,extra\n1,tcp,Normal,0,5\n"), toy_schema())


def test_parse_default_kind_numeric(tmp_path):
    rec = data.parse_csv(write(tmp_path / "a.csv", "dur,proto,cat,label,extra\n1,tcp,Normal,0,5\n"),
                         toy_schema(default_kind="numeric"))
    assert list(rec.frame.columns) == ["dur", "proto", "extra"]


def test_parse_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        data.parse_csv(tmp_path / "nope.csv", toy_schema())


def test_parse_headerless(tmp_path):
    cols = {"a": "numeric", "p": "categorical", "label": "label", "diff": "drop"}
    s = FeatureSchema("h", cols, header=False, normal_labels=("normal",), category_source="label",
                      category_map={"smurf": "dos"})
    rec = data.parse_csv(write(tmp_path / "a.txt", "1,tcp,normal,20\n2,udp,smurf,15\n"), s)
    assert list(rec.frame.columns) == ["a", "p"]
    assert list(rec.categories) == ["normal", "dos"]
    with pytest.raises(SchemaError):
        data.parse_csv(write(tmp_path / "b.txt", "1,tcp,normal\n"), s)


def test_parse_strips_header_whitespace(tmp_path):
    s = FeatureSchema("c", {"Label": "label"}, default_kind="numeric", normal_labels=("BENIGN",),
                      category_source="label")
    rec = data.parse_csv(write(tmp_path / "a.csv", " Flow Duration, Label\n5, BENIGN\n7, DDoS\n"), s)
    assert list(rec.frame.columns) == ["Flow Duration"]
    assert list(rec.labels) == [0, 1]
    assert list(rec.categories) == ["normal", "DDoS"]


# --- one-hot


def _records(values):
    frame = pd.DataFrame({"proto": np.array(values, dtype=object)})
    n = len(values)
    return data.RawRecords(frame, np.zeros(n, dtype=np.int64), np.full(n, "normal", dtype=object))


def test_one_hot_basic():
    s = toy_schema()
    m, cats = data.one_hot_encode(_records(["a", "b"]), s)
    assert cats == {"proto": ["a", "b"]}
    np.testing.assert_array_equal(m, [[1, 0], [0, 1]])


def test_one_hot_sorted_columns():
    m, _ = data.one_hot_encode(_records(["b", "a"]), toy_schema())
    np.testing.assert_array_equal(m, [[0, 1], [1, 0]])


def test_one_hot_unseen_is_zero_block():
    s = toy_schema()
    _, cats = data.one_hot_encode(_records(["a", "b"]), s)
    m, _ = data.one_hot_encode(_records(["c", "a"]), s, cats)
    np.testing.assert_array_equal(m, [[0, 0], [1, 0]])


# --- scaler


def test_scaler_population_std():
    sc = data.fit_standardize(np.array([[2.0], [4.0]]))
    assert sc.mean[0] == 3.0 and sc.std[0] == 1.0
    np.testing.assert_allclose(data.apply(sc, np.array([[2.0], [4.0]])), [[-1.0], [1.0]])


def test_scaler_constant_column():
    sc = data.fit_standardize(np.array([[5.0], [5.0], [5.0]]))
    np.testing.assert_array_equal(sc.transform(np.array([[5.0], [5.0], [5.0]])), 0.0)
    assert np.all(sc.std > 0)


def test_scaler_empty():
    with pytest.raises(ValueError):
        data.fit_standardize(np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_scaler_centres_fit_data(x):
    sc = data.fit_standardize(x)
    z = sc.transform(x)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-8)
    assert np.all(sc.std > 0)
    varying = np.ptp(x, axis=0) > 1e-6 * (np.abs(x).max(axis=0) + 1)
    np.testing.assert_allclose(z.std(axis=0)[varying], 1.0, rtol=1e-6)


# --- splits


def _unsw_like(tmp_path, n_train=40, n_test=30, seed=0):
    rng = np.random.default_rng(seed)

    def frame(n):
        lab = rng.integers(0, 2, n)
        return pd.DataFrame({
            "id": np.arange(n), "dur": rng.normal(size=n), "proto": rng.choice(["tcp", "udp"], n),
            "service": rng.choice(["-", "http"], n), "state": rng.choice(["FIN", "INT"], n),
            "sbytes": rng.integers(0, 100, n),
            "attack_cat": np.where(lab == 1, rng.choice(["DoS", "Exploits"], n), "Normal"), "label": lab,
        })

    tr, te = tmp_path / "train.csv", tmp_path / "test.csv"
    frame(n_train).to_csv(tr, index=False)
    frame(n_test).to_csv(te, index=False)
    return {"train": tr, "test": te}


def test_official_split_counts(tmp_path):
    files = _unsw_like(tmp_path)
    with open(files["test"], "a") as fh:
        fh.write("99,bad,tcp,-,FIN,1,Normal,0\n")
    sp = data.make_splits("unsw_nb15", files, seed=0)
    assert len(sp.y_train) == 40 and len(sp.y_test) == 30
    assert sp.provenance["dropped_rows"] == 1
    assert set(sp.attack_categories) <= {"DoS", "Exploits"}
    # dur, sbytes + proto(2) + service(2) + state(2)
    assert sp.n_features == 8
    assert (sp.y_train[sp.y_train == 0] == 0).all()
    assert len(sp.x_train_normal) == int((sp.y_train == 0).sum())


def test_normal_view_has_no_attacks(tmp_path):
    sp = data.make_splits("unsw_nb15", _unsw_like(tmp_path), seed=0)
    view = sp.x_train_normal
    assert view.shape[0] == (sp.y_train == 0).sum()


def test_missing_file_named(tmp_path):
    files = _unsw_like(tmp_path)
    files["test"] = tmp_path / "UNSW_missing.csv"
    with pytest.raises(FileNotFoundError, match="UNSW_missing.csv"):
        data.make_splits("unsw_nb15", files)


def test_no_test_leakage(tmp_path):
    files = _unsw_like(tmp_path)
    a = data.make_splits("unsw_nb15", files, seed=0)
    test = pd.read_csv(files["test"])
    test.sample(frac=1.0, random_state=3).to_csv(files["test"], index=False)
    b = data.make_splits("unsw_nb15", files, seed=0)
    np.testing.assert_array_equal(a.scaler.mean, b.scaler.mean)
    np.testing.assert_array_equal(a.scaler.std, b.scaler.std)
    assert a.categories == b.categories


def _cic_like(tmp_path, rows_per_file=(500, 300, 200)):
    rng = np.random.default_rng(1)
    paths = []
    for name, n in zip(("Monday-WorkingHours.csv", "Tuesday.csv", "Wednesday.csv"), rows_per_file):
        lab = rng.choice(["BENIGN", "DoS Hulk", "PortScan"], n)
        df = pd.DataFrame({" Flow Duration": rng.integers(0, 1000, n), " Fwd Packets": rng.normal(size=n),
                           " Label": lab})
        df.to_csv(tmp_path / name, index=False)
        paths.append(tmp_path / name)
    return {"files": paths}


def test_cic_excludes_monday_and_samples_exactly(tmp_path):
    sp = data.make_splits("cic_ids2017", _cic_like(tmp_path), seed=7)
    total = 300 + 200
    assert len(sp.y_train) == round(0.05 * total)
    assert len(sp.y_train) + len(sp.y_test) == total
    assert any("Monday" in p for p in sp.provenance["excluded"])
    sp2 = data.make_splits("cic_ids2017", _cic_like(tmp_path), seed=7)
    assert sp.content_hash() == sp2.content_hash()


def test_cic_exact_five_percent_large(tmp_path):
    sp = data.make_splits("cic_ids2017", _cic_like(tmp_path, (10, 60000, 40000)), seed=0)
    assert len(sp.y_train) == 5000


# --- snapshot


def test_snapshot_roundtrip(tmp_path):
    sp = data.synthetic_dataset(0, n_normal=50, n_anomalies=10, n_test_normal=20, n_train_anomalies=4, dim=8)
    path = sp.save(tmp_path / data.snapshot_name("synthetic", 0, "abc"))
    back = data.DatasetSplit.load(path)
    assert back.content_hash() == sp.content_hash()
    np.testing.assert_array_equal(back.cat_test, sp.cat_test)
    assert back.provenance == sp.provenance


# --- LOAO


def test_loao_plans_synthetic():
    sp = data.synthetic_dataset(0, n_normal=100, n_anomalies=20, n_test_normal=50, n_train_anomalies=20, dim=8)
    plans = data.make_loao_plans(sp)
    assert [p.held_out for p in plans] == sorted(data.SYNTHETIC_CATEGORIES)
    assert {p.held_out for p in plans} == set(sp.attack_categories)
    for p in plans:
        assert (p.train_cat == p.held_out).sum() == 0
        assert set(p.eval_cat) == {"normal", p.held_out}
        assert set(p.eval_y) == {0, 1}
        assert (p.eval_y == 0).sum() == (sp.y_test == 0).sum()


def test_loao_needs_categories():
    sp = data.synthetic_dataset(0, n_normal=50, n_anomalies=0, n_test_normal=20, n_train_anomalies=0, dim=4)
    with pytest.raises(ValueError):
        data.make_loao_plans(sp)


# --- synthetic


def test_synthetic_deterministic():
    a, b = data.synthetic_dataset(3), data.synthetic_dataset(3)
    np.testing.assert_array_equal(a.x_train, b.x_train)
    np.testing.assert_array_equal(a.x_test, b.x_test)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != data.synthetic_dataset(4).content_hash()


def test_synthetic_shapes_and_categories():
    sp = data.synthetic_dataset(0)
    assert sp.x_train_normal.shape == (2000, 32)
    assert sp.x_test.shape == (1200, 32)
    assert (sp.y_test == 1).sum() == 200
    anomalies = sp.cat_test[sp.y_test == 1]
    assert list(anomalies[:4]) == ["scatter", "shift", "scatter", "shift"]


def test_synthetic_no_anomalies():
    sp = data.synthetic_dataset(0, n_anomalies=0)
    assert (sp.y_test == 0).all()


def test_synthetic_dim_check():
    with pytest.raises(ValueError):
        data.synthetic_dataset(0, dim=1)


def test_synthetic_normals_near_subspace():
    sp = data.synthetic_dataset(0, noise=0.0)
    x = sp.x_train_normal
    s = np.linalg.svd(x - x.mean(0), compute_uv=False)
    assert s[4] < 1e-8 * s[0]
