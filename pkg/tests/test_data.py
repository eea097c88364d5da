import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbdm.data import (MixtureSpec, benchmark_spec, generate_dataset, make_longtail_counts, read_csv, true_density,
                       write_csv)


def test_counts_examples():
    c = make_longtail_counts(5000, 10, 0.01)
    assert c[0] == 5000 and c[9] == 50
    np.testing.assert_array_equal(make_longtail_counts(100, 1, 0.5), [100])
    np.testing.assert_array_equal(make_longtail_counts(100, 2, 1.0), [100, 100])
    with pytest.raises(ValueError):
        make_longtail_counts(100, 3, 0.0)


@settings(max_examples=60, deadline=None)
@given(n0=st.integers(1, 5000), K=st.integers(2, 12), imb=st.floats(0.001, 1.0))
def test_head_tail_ratio(n0, K, imb):
    c = make_longtail_counts(n0, K, imb)
    assert c[0] == n0 and np.all(c >= 1) and np.all(np.diff(c) <= 0)
    if n0 * imb >= 1:
        assert abs(c[-1] - n0 * imb) <= 1


def test_generate_dataset_contract():
    spec = benchmark_spec()
    counts = make_longtail_counts(2000, 8, 0.01)
    a, b = generate_dataset(spec, counts, 5), generate_dataset(spec, counts, 5)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(np.bincount(a.y), counts)
    for k in range(8):
        xs = a.class_samples(k)
        tol = 4 * spec.sigma / np.sqrt(len(xs))
        assert np.all(np.abs(xs.mean(0) - spec.centers[k][0]) < tol)
    with pytest.raises(ValueError):
        generate_dataset(spec, counts[:3], 0)


def test_density_peak_value():
    spec = MixtureSpec(centers=([[1.0, -1.0]],), sigma=0.3)
    assert true_density(spec, np.array([1.0, -1.0]), 0) == pytest.approx(1 / (2 * np.pi * 0.09), rel=1e-14)


def test_density_integrates_to_one():
    spec = benchmark_spec(K=4, modes_per_class=2)
    g = np.linspace(-3.2, 3.2, 801)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], 1)
    h = g[1] - g[0]
    for k in range(4):
        assert abs(true_density(spec, pts, k).sum() * h * h - 1.0) < 1e-3
    prior = np.array([0.4, 0.3, 0.2, 0.1])
    assert abs(true_density(spec, pts, None, prior).sum() * h * h - 1.0) < 1e-3


def test_marginal_reflection_symmetry():
    spec = MixtureSpec(centers=([[1.0, 0.5]], [[-1.0, 0.5]]), sigma=0.4)
    x = np.random.default_rng(0).normal(size=(20, 2))
    refl = x * np.array([-1.0, 1.0])
    np.testing.assert_allclose(true_density(spec, x, None, [0.5, 0.5]), true_density(spec, refl, None, [0.5, 0.5]),
                               rtol=1e-13)
    with pytest.raises(ValueError):
        true_density(spec, x, None, [0.6, 0.6])


def test_spec_validation():
    with pytest.raises(ValueError):
        MixtureSpec(centers=([[0.0, 0.0]],), sigma=0.0)
    with pytest.raises(ValueError):
        MixtureSpec(centers=([[0.0, 0.0], [1.0, 1.0]],), sigma=1.0, weights=([0.3, 0.3],))
    spec = benchmark_spec(modes_per_class=2)
    again = MixtureSpec.from_dict(spec.to_dict())
    assert all(np.array_equal(a, b) for a, b in zip(spec.centers, again.centers))


def test_csv_roundtrip(tmp_path):
    ds = generate_dataset(benchmark_spec(K=3), [5, 3, 1], 0)
    write_csv(tmp_path / "d.csv", ds.x, ds.y)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x0,x1,y"
    x, y = read_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(x, ds.x)
    np.testing.assert_array_equal(y, ds.y)
