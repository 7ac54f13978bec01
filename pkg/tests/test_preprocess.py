import itertools
import logging
import math

import numpy as np
import pytest
from scipy import stats

from hybrid_ids.preprocess import (UNSEEN, Dataset, Transform, TransformFormatError, apply_one_hot,
                                   collinear_drops, correlation, fit_impute, fit_one_hot,
                                   fit_transform, impute_missing, make_windows, mi_scores, minmax_scale,
                                   apply_minmax, fit_minmax, mutual_information, one_hot_encode,
                                   prune_collinear, sample_skewness, select_top_k, smote,
                                   smote_dataset, stratified_split)

nan = math.nan


def make_ds(columns, labels=None, kinds=None, classes=None):
    n = len(next(iter(columns.values())))
    cols, kk = {}, {}
    for name, values in columns.items():
        kind = (kinds or {}).get(name)
        if kind is None:
            kind = "categorical" if any(isinstance(v, str) or v is None for v in values) else "continuous"
        cols[name] = np.array(values, dtype=object if kind == "categorical" else float)
        kk[name] = kind
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    classes = classes or [f"c{i}" for i in range(int(labels.max()) + 1)]
    return Dataset(cols, kk, labels, classes)


# ------------------------------------------------------------------ imputation

def test_mean_imputation():
    # a 4th row keeps the missing share under the drop threshold
    ds = impute_missing(make_ds({"x": [1.0, nan, 3.0, 2.0]}), {"x": "mean"})
    np.testing.assert_array_equal(ds.columns["x"], [1.0, 2.0, 3.0, 2.0])


def test_heavy_missing_column_dropped(caplog):
    ds = make_ds({"x": [1, nan, 3, nan, 5, 6, nan, 8, nan, 10], "y": list(range(10))})
    out = impute_missing(ds)
    assert "x" not in out.columns and "y" in out.columns
    assert out.provenance[-1]["drop"] == ["x"]


def test_fully_missing_column_warns(caplog):
    with caplog.at_level(logging.WARNING):
        out = impute_missing(make_ds({"x": [nan] * 4, "y": [1.0, 2, 3, 4]}))
    assert "x" not in out.columns
    assert "entirely missing" in caplog.text


def test_skewed_column_routes_to_median():
    values = [1.0] * 8 + [10.0]
    skew = stats.skew(values)  # independent Fisher-Pearson oracle
    assert 2.3 < skew < 2.6
    assert sample_skewness(np.array(values)) == pytest.approx(skew, abs=1e-12)
    step = fit_impute(make_ds({"x": values + [nan]}))
    assert step["policy"]["x"] == "median"
    assert step["fill"]["x"] == np.median(values)


def test_symmetric_column_routes_to_mean():
    step = fit_impute(make_ds({"x": [1.0, 2.0, 3.0, 4.0, nan]}))
    assert step["policy"]["x"] == "mean" and step["fill"]["x"] == 2.5


def test_categorical_mode_fill():
    ds = impute_missing(make_ds({"p": ["tcp", "udp", "tcp", None]}))
    assert list(ds.columns["p"]) == ["tcp", "udp", "tcp", "tcp"]


def test_unknown_policy_rejected():
    with pytest.raises(ValueError, match="policy"):
        fit_impute(make_ds({"x": [1.0, nan, 3.0, 4.0]}), {"x": "bogus"})


# -------------------------------------------------------------------- encoding

def test_one_hot_row():
    ds = one_hot_encode(make_ds({"proto": ["tcp", "udp", "icmp"]}))
    row = [ds.columns[f"proto={c}"][1] for c in ("tcp", "udp", "icmp", UNSEEN)]
    assert row == [0, 1, 0, 0]


def test_one_hot_unseen_value():
    step = fit_one_hot(make_ds({"proto": ["tcp", "udp", "icmp"]}))
    out = apply_one_hot(make_ds({"proto": ["sctp"]}), step)
    assert out.columns[f"proto={UNSEEN}"][0] == 1.0
    assert sum(out.columns[f"proto={c}"][0] for c in ("tcp", "udp", "icmp")) == 0.0


# --------------------------------------------------------------------- scaling

def test_minmax_examples():
    ds, ranges = minmax_scale(make_ds({"a": [2.0, 4.0, 6.0], "b": [5.0, 5.0, 5.0]}))
    np.testing.assert_array_equal(ds.columns["a"], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(ds.columns["b"], [0.0, 0.0, 0.0])
    assert ranges["a"] == (2.0, 6.0)


def test_minmax_clamps_test_values():
    step = fit_minmax(make_ds({"a": [2.0, 4.0, 6.0]}))
    out = apply_minmax(make_ds({"a": [100.0, -3.0]}), step)
    np.testing.assert_array_equal(out.columns["a"], [1.0, 0.0])


# ----------------------------------------------------------------- correlation

def test_correlation_examples():
    x = np.linspace(-2, 3, 40)
    assert correlation(x, 2 * x) == pytest.approx(1.0, abs=1e-12)
    assert correlation(x, x ** 3, "spearman") == pytest.approx(1.0, abs=1e-12)
    assert correlation(x, x ** 3) < 1.0


def test_correlation_matches_direct_formula(rng):
    x = rng.normal(size=60)
    y = 0.4 * x + rng.normal(size=60)
    n = x.size
    # textbook single-pass formula
    num = n * np.sum(x * y) - x.sum() * y.sum()
    den = math.sqrt(n * np.sum(x * x) - x.sum() ** 2) * math.sqrt(n * np.sum(y * y) - y.sum() ** 2)
    assert correlation(x, y) == pytest.approx(num / den, abs=1e-12)
    rho = stats.spearmanr(x, y).statistic
    assert correlation(x, y, "spearman") == pytest.approx(rho, abs=1e-12)


def test_correlation_errors():
    with pytest.raises(ValueError):
        correlation([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        correlation([1], [1])
    with pytest.raises(ValueError):
        correlation([1, 2], [1, 2], "kendall")
    assert correlation([1, 1, 1], [1, 2, 3]) == 0.0


# ------------------------------------------------------------ collinear pruning

def test_duplicate_column_pruned(rng):
    x = rng.normal(size=100)
    ds = make_ds({"a": x, "b": x.copy(), "c": rng.normal(size=100)})
    out = prune_collinear(ds, scores={"a": 1.0, "b": 1.0, "c": 0.0})
    assert list(out.columns) == ["a", "c"]  # tie drops the later column


def test_lower_mi_member_dropped(rng):
    x = rng.normal(size=100)
    ds = make_ds({"a": x, "b": 3 * x + 1})
    assert collinear_drops(ds, {"a": 0.1, "b": 0.5}) == ["a"]


def test_independent_columns_survive():
    rng = np.random.default_rng(7)
    ds = make_ds({f"x{i}": rng.normal(size=500) for i in range(6)})
    assert collinear_drops(ds, {n: 0.0 for n in ds.columns}) == []


def _max_abs_corr(ds, names):
    worst = 0.0
    for a, b in itertools.combinations(names, 2):
        for kind in ("pearson", "spearman"):
            worst = max(worst, abs(correlation(ds.columns[a], ds.columns[b], kind)))
    return worst


def test_chain_rescan(rng):
    a = rng.normal(size=300)
    b = a + 0.2 * rng.normal(size=300)
    c = b + 0.2 * rng.normal(size=300)
    d = rng.normal(size=300)
    ds = make_ds({"a": a, "b": b, "c": c, "d": d})
    assert _max_abs_corr(ds, ["a", "b"]) > 0.85 and _max_abs_corr(ds, ["b", "c"]) > 0.85
    out = prune_collinear(ds, 0.85, {"a": 0.3, "b": 0.2, "c": 0.1, "d": 0.0})
    assert "d" in out.columns
    assert _max_abs_corr(out, list(out.columns)) <= 0.85


# ---------------------------------------------------------- mutual information

def test_mi_constant_column_is_zero():
    assert mutual_information(np.ones(50), np.arange(50) % 2) == 0.0


def test_mi_identity_is_ln2():
    y = np.arange(200) % 2
    assert mutual_information(y.astype(float), y) == pytest.approx(math.log(2), abs=1e-12)


def test_mi_matches_contingency_oracle(rng):
    x = rng.integers(0, 4, 300).astype(float)
    y = (x + rng.integers(0, 2, 300)) % 3
    n = x.size
    mi = 0.0
    for xv in np.unique(x):
        for yv in np.unique(y):
            nxy = np.sum((x == xv) & (y == yv))
            if nxy:
                nx, ny = np.sum(x == xv), np.sum(y == yv)
                mi += nxy / n * math.log(n * nxy / (nx * ny))
    assert mutual_information(x, y) == pytest.approx(mi, abs=1e-12)


def test_mi_ties_share_bin():
    x = np.array([0.0] * 60 + [1.0] * 40)
    y = (x > 0).astype(int)
    # 2 distinct values never split, even with many bins requested
    assert mutual_information(x, y, bins=10) == pytest.approx(
        mutual_information(x, y, bins=2), abs=1e-15)


# ------------------------------------------------------------------- top-k

def test_top_k_identity_warns_on_excess(caplog):
    ds = make_ds({"a": [1.0, 2], "b": [3.0, 4]})
    assert list(select_top_k(ds, {"a": 0, "b": 1}, 2).columns) == ["a", "b"]
    with caplog.at_level(logging.WARNING):
        assert list(select_top_k(ds, {"a": 0, "b": 1}, 5).columns) == ["a", "b"]
    assert "exceeds" in caplog.text


def test_top_k_keeps_label_copy(rng):
    y = rng.integers(0, 3, 300)
    ds = make_ds({"n1": rng.normal(size=300), "copy": y.astype(float), "n2": rng.normal(size=300)}, y)
    out = select_top_k(ds, mi_scores(ds), 1)
    assert list(out.columns) == ["copy"]


def test_top_k_expected_pair(rng):
    y = np.arange(400) % 2
    noise = rng.random(400)
    cols = {
        "weak": np.where(noise < 0.6, y, 1 - y).astype(float),
        "none": rng.random(400),
        "strong": np.where(noise < 0.95, y, 1 - y).astype(float),
        "mid": np.where(rng.random(400) < 0.8, y, 1 - y).astype(float),
    }
    ds = make_ds(cols, y)
    scores = mi_scores(ds)
    oracle = sorted(cols, key=lambda n: -scores[n])[:2]
    assert set(oracle) == {"strong", "mid"}
    assert list(select_top_k(ds, scores, 2).columns) == ["strong", "mid"]


# ------------------------------------------------------------------- split

def test_split_published_counts():
    labels = np.zeros(2_540_044, dtype=np.int8)
    labels[:300_000] = 1
    labels[:7] = 2
    tr, te = stratified_split(labels, 0.8, seed=0)
    assert tr.size == 2_032_035 and te.size == 508_009


def test_split_small_and_disjoint():
    tr, te = stratified_split(np.zeros(10), 0.8, seed=3)
    assert (tr.size, te.size) == (8, 2)
    labels = np.array([0] * 13 + [1] * 7 + [2] * 5)
    tr, te = stratified_split(labels, 0.8, seed=1)
    assert np.intersect1d(tr, te).size == 0
    assert np.union1d(tr, te).size == labels.size
    assert tr.size == math.floor(0.8 * labels.size)
    for c, n in zip(range(3), (13, 7, 5)):
        assert abs(np.sum(labels[tr] == c) - 0.8 * n) < 1.0


def test_split_seeded_and_validated():
    labels = np.arange(50) % 3
    a = stratified_split(labels, 0.8, seed=5)
    b = stratified_split(labels, 0.8, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        stratified_split(labels, 1.0)
    with pytest.raises(ValueError, match="fewer than 2"):
        stratified_split(np.array([0, 0, 1]), 0.8)


# ------------------------------------------------------------------- SMOTE

def test_smote_segment_geometry():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0], [6.0, 5.0], [5.0, 6.0], [6.0, 6.0]])
    y = np.array([1, 1, 0, 0, 0, 0])
    res = smote(x, y, k_neighbors=1, target_ratio=1.0, seed=0)
    syn = res.features[6:]
    assert syn.shape == (2, 2)
    np.testing.assert_array_equal(syn[:, 0], syn[:, 1])
    assert np.all((syn >= 0.0) & (syn <= 1.0))
    np.testing.assert_allclose(syn[:, 0], np.where(res.base == 0, res.lam, 1 - res.lam), atol=1e-15)


def test_smote_grows_minority(rng):
    x = rng.normal(size=(110, 3))
    y = np.array([0] * 100 + [1] * 10)
    res = smote(x, y, target_ratio=1.0, seed=0)
    assert np.bincount(res.labels).tolist() == [100, 100]
    np.testing.assert_array_equal(res.features[:110], x)
    assert np.all(y[res.base] == 1) and np.all(y[res.neighbor] == 1)


def test_smote_skips_singleton(caplog, rng):
    x = rng.normal(size=(11, 2))
    y = np.array([0] * 10 + [1])
    with caplog.at_level(logging.WARNING):
        res = smote(x, y, target_ratio=1.0)
    assert res.features.shape == (11, 2)
    assert "single sample" in caplog.text


def test_smote_dataset_provenance(rng):
    ds = make_ds({"a": rng.random(30), "b": rng.random(30)}, [0] * 24 + [1] * 6)
    out, res = smote_dataset(ds, target_ratio=0.5)
    assert out.n_rows == 36 and res.base.size == 6
    assert out.provenance[-1]["synthetic_per_class"] == [0, 6]


# ------------------------------------------------------------------- windows

@pytest.mark.parametrize("n, count", [(100, 11), (50, 1)])
def test_window_counts(n, count):
    ws = make_windows(np.arange(n) % 3, 50, 5)
    assert len(ws) == count
    assert ws.index[-1, -1] == 50 - 1 + (count - 1) * 5


def test_short_sequence_warns(caplog):
    with caplog.at_level(logging.WARNING):
        ws = make_windows(np.zeros(49), 50, 5)
    assert len(ws) == 0 and "no windows" in caplog.text


def test_window_label_is_last_event():
    labels = np.array([0, 0, 1, 0, 2, 2])
    ws = make_windows(labels, 3, 1)
    assert ws.labels.tolist() == [1, 0, 2, 2]


# ---------------------------------------------------------------- transform

def _raw(rng, n):
    return make_ds({
        "dur": np.where(rng.random(n) < 0.1, nan, rng.exponential(2.0, n)),
        "bytes": rng.exponential(100.0, n),
        "proto": list(rng.choice(["tcp", "udp", "icmp"], n)),
        "flag": list(rng.choice(["a", "b"], n)),
    }, rng.integers(0, 3, n), kinds={"proto": "categorical", "flag": "categorical"})


def test_transform_replay_bit_exact(tmp_path, rng):
    train, test = _raw(rng, 200), _raw(rng, 50)
    transform, fitted = fit_transform(train, k=4)
    path = tmp_path / "t.json"
    transform.save(path)
    loaded = Transform.load(path)
    np.testing.assert_array_equal(loaded.apply(train).features, fitted.features)
    np.testing.assert_array_equal(loaded.apply(test).features, transform.apply(test).features)
    assert loaded.feature_names == list(fitted.columns)
    assert len(fitted.columns) == 4


def test_transform_format_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    with pytest.raises(TransformFormatError):
        Transform.load(bad)
    with pytest.raises(TransformFormatError):
        Transform.from_dict({"format": "other", "steps": [], "classes": []})
    with pytest.raises(TransformFormatError, match="unknown"):
        Transform.from_dict({"format": "hybrid-ids-transform/1", "steps": [{"op": "x"}], "classes": []})


def test_features_rejects_unencoded():
    with pytest.raises(ValueError, match="categorical"):
        make_ds({"p": ["a", "b"]}).features
