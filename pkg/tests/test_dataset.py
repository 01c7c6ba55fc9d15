import math
from itertools import combinations_with_replacement

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vcplab.dataset import (
    STD_FLOOR,
    DataError,
    Dataset,
    ExpansionSpec,
    expand_polynomial,
    fit_standardizer,
    impute_means,
    load_csv,
    make_synthetic_gaussians,
    split,
)

CSV_WITH_GAP = "a,b,label\n1,10,0\n2,,1\n3,30,0\n4,40,1\n"


@pytest.fixture
def gap_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text(CSV_WITH_GAP)
    return path


def test_load_drop(gap_csv):
    d = load_csv(gap_csv, "label", "drop")
    assert d.m == 3 and d.feature_names == ("a", "b")
    assert d.labels.tolist() == [0, 0, 1]


def test_load_mean_imputes_observed_mean(gap_csv):
    d = load_csv(gap_csv, "label", "mean")
    assert d.m == 4
    assert d.features[1, 1] == pytest.approx((10 + 30 + 40) / 3)


def test_load_keep_leaves_nan(gap_csv):
    d = load_csv(gap_csv, "label", "keep")
    assert math.isnan(d.features[1, 1])


@pytest.mark.parametrize("token", ["", "nan", "NaN", "NAN"])
def test_missing_tokens(tmp_path, token):
    path = tmp_path / "t.csv"
    path.write_text(f"x,y\n1,0\n{token},1\n3,1\n")
    assert load_csv(path, "y", "drop").m == 2


def test_label_column_anywhere(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("y,x\n1,0.5\n0,1.5\n")
    d = load_csv(path, "y")
    assert d.labels.tolist() == [1, 0] and d.features[:, 0].tolist() == [0.5, 1.5]


def test_non_binary_label(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("x,y\n1,0\n2,2\n")
    with pytest.raises(DataError, match="non-binary"):
        load_csv(path, "y")


def test_parse_error_has_location(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("x,y\n1,0\nabc,1\n2,1\n")
    with pytest.raises(DataError, match=r"line 3, column 'x'"):
        load_csv(path, "y")


@pytest.mark.parametrize("body,match", [
    ("x,y\n1,0\n", "fewer than 2"),
    ("x,z\n1,0\n2,1\n", "label column"),
    ("", "empty"),
    ("x,y\n1,0\n2\n", "fields"),
])
def test_load_errors(tmp_path, body, match):
    path = tmp_path / "t.csv"
    path.write_text(body)
    with pytest.raises(DataError, match=match):
        load_csv(path, "y")


def test_unknown_policy(gap_csv):
    with pytest.raises(DataError):
        load_csv(gap_csv, "label", "median")


def test_missing_labels_are_dropped(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("x,y\n1,0\n2,\n3,1\n")
    assert load_csv(path, "y").m == 2


def test_impute_from_reference_only():
    train = Dataset(np.array([[1.0], [3.0], [np.nan]]), np.array([0, 1, 0]))
    test = Dataset(np.array([[np.nan], [100.0]]), np.array([1, 0]))
    tr, te = impute_means(train, test)
    assert tr.features[2, 0] == 2.0 and te.features[0, 0] == 2.0 and te.features[1, 0] == 100.0


def test_dataset_is_immutable():
    d = Dataset(np.zeros((2, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        d.features[0, 0] = 1.0


@pytest.mark.parametrize("labels", [[0, 2], [0, -1], [0.5, 1]])
def test_dataset_rejects_bad_labels(labels):
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), np.array(labels))


# standardization


def test_two_point_statistics():
    stats = fit_standardizer(Dataset(np.array([[1.0], [3.0]]), np.array([0, 1])))
    assert stats.means[0] == 2.0 and stats.std_devs[0] == 1.0


def test_constant_column_is_floored():
    d = Dataset(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]]), np.array([0, 1, 0]))
    stats = fit_standardizer(d)
    assert stats.std_devs[0] == STD_FLOOR
    assert np.all(stats.apply(d).features[:, 0] == 0.0)


def test_standardized_moments(rng):
    d = Dataset(rng.normal(3.0, 7.0, (50, 4)), rng.integers(0, 2, 50))
    z = fit_standardizer(d).apply(d).features
    assert np.abs(z.mean(axis=0)).max() <= 1e-12
    assert np.abs(z.std(axis=0) - 1).max() <= 1e-9


def test_standardizer_needs_two_rows():
    with pytest.raises(DataError):
        fit_standardizer(Dataset(np.zeros((1, 2)), np.array([1])))


@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=30))
def test_standardize_roundtrip(values):
    X = np.array(values[: len(values) // 2 * 2]).reshape(-1, 2)
    d = Dataset(X, np.zeros(len(X), dtype=int))
    stats = fit_standardizer(d)
    ok = stats.std_devs > STD_FLOOR
    back = stats.invert(stats.apply(X))
    assert np.allclose(back[:, ok], X[:, ok], atol=1e-9)


# polynomial expansion


def test_expansion_dimension_table_value():
    assert ExpansionSpec(6, 9).output_dim == 5005
    assert expand_polynomial(np.ones(9), ExpansionSpec(6, 9)).shape == (5005,)


@pytest.mark.parametrize("n", range(1, 11))
@pytest.mark.parametrize("d", range(1, 7))
def test_expansion_dimension_count(n, d):
    spec = ExpansionSpec(d, n)
    assert spec.output_dim == math.comb(n + d, d) == len(spec.monomials())
    assert ExpansionSpec(d, n, include_bias=False).output_dim == math.comb(n + d, d) - 1


def test_expansion_graded_lex_order():
    x1, x2 = 2.0, 3.0
    out = expand_polynomial(np.array([x1, x2]), ExpansionSpec(2, 2))
    assert out.tolist() == [1, x1, x2, x1 * x1, x1 * x2, x2 * x2]
    assert ExpansionSpec(2, 2).names() == ["1", "x1", "x2", "x1^2", "x1*x2", "x2^2"]


def test_expansion_zero_input():
    out = expand_polynomial(np.zeros(3), ExpansionSpec(3, 3))
    assert out[0] == 1.0 and not out[1:].any()


def test_expansion_without_bias():
    out = expand_polynomial(np.array([2.0, 3.0]), ExpansionSpec(2, 2, include_bias=False))
    assert out.tolist() == [2, 3, 4, 6, 9]


def test_expansion_dimension_mismatch():
    with pytest.raises(ValueError):
        expand_polynomial(np.zeros(3), ExpansionSpec(2, 2))


@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.integers(1, 4))
def test_expansion_matches_brute_force(x, d):
    x = np.array(x)
    expected = [1.0] + [float(np.prod(x[list(c)])) for k in range(1, d + 1)
                        for c in combinations_with_replacement(range(3), k)]
    assert np.allclose(expand_polynomial(x, ExpansionSpec(d, 3)), expected, rtol=1e-12, atol=1e-12)


def test_expansion_rows_match_vectors(rng):
    X = rng.normal(size=(5, 3))
    spec = ExpansionSpec(3, 3)
    rows = expand_polynomial(X, spec)
    assert all(np.array_equal(rows[i], expand_polynomial(X[i], spec)) for i in range(5))


# splitting and synthetic data


def test_split_sizes_and_determinism():
    d = make_synthetic_gaussians(10, 2, 1.0, 0)
    tr, te = split(d, 0.2, 7)
    assert (tr.m, te.m) == (8, 2)
    tr2, _ = split(d, 0.2, 7)
    assert np.array_equal(tr.features, tr2.features)


def test_split_seed_changes_permutation():
    d = make_synthetic_gaussians(40, 2, 1.0, 0)
    assert not np.array_equal(split(d, 0.25, 1)[0].features, split(d, 0.25, 2)[0].features)


@given(st.integers(4, 60).filter(lambda m: m % 2 == 0), st.floats(0.05, 0.6), st.integers(0, 1000))
def test_split_partitions(m, f, seed):
    d = Dataset(np.arange(m, dtype=float)[:, None], np.arange(m) % 2)
    try:
        tr, te = split(d, f, seed)
    except DataError:
        return
    assert tr.m == math.ceil(round(m * (1 - f), 9))
    assert sorted(tr.features[:, 0].tolist() + te.features[:, 0].tolist()) == list(range(m))


@pytest.mark.parametrize("f", [0.0, 1.0, 0.01])
def test_split_empty_side(f):
    with pytest.raises(DataError):
        split(make_synthetic_gaussians(10, 2, 1.0, 0), f, 0)


def test_synthetic_layout():
    d = make_synthetic_gaussians(4000, 3, 4.0, 1)
    assert d.labels.sum() == 2000
    assert d.features[d.labels == 0, 0].mean() == pytest.approx(-2.0, abs=0.1)
    assert d.features[d.labels == 1, 0].mean() == pytest.approx(2.0, abs=0.1)
    assert np.abs(d.features[:, 1:].mean(axis=0)).max() < 0.1
    assert np.array_equal(d.features, make_synthetic_gaussians(4000, 3, 4.0, 1).features)


def test_synthetic_label_noise_exact_count():
    clean = make_synthetic_gaussians(200, 2, 2.0, 5)
    noisy = make_synthetic_gaussians(200, 2, 2.0, 5, label_noise=0.1)
    assert (clean.labels != noisy.labels).sum() == 20


@pytest.mark.parametrize("m", [3, 5, 2])
def test_synthetic_needs_even_m(m):
    with pytest.raises(DataError):
        make_synthetic_gaussians(m, 2, 1.0, 0)
