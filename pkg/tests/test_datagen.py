import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from sharpdro.datagen import (
    AdditiveGaussian,
    CorruptedDataset,
    Quantize,
    SeverityDistribution,
    SyntheticSpec,
    apply_corruption,
    class_means,
    corrupt,
    generate_synthetic,
    load_csv,
    poisson_pmf,
    sample_severities,
    severity_probs,
)
from sharpdro.errors import DomainError, IngestionError, PreconditionError

# published three-decimal severity probabilities for lambda = 1
PUBLISHED_PROBS = (0.367, 0.367, 0.184, 0.061, 0.015, 0.003)


def test_pmf_matches_scipy():
    for lam in (0.001, 0.5, 1.0, 3.7):
        for s in range(12):
            assert poisson_pmf(s, lam) == pytest.approx(stats.poisson.pmf(s, lam), rel=1e-12)


def test_pmf_published_values_and_identity():
    assert abs(poisson_pmf(0, 1.0) - PUBLISHED_PROBS[0]) < 1e-3
    assert abs(poisson_pmf(5, 1.0) - PUBLISHED_PROBS[5]) < 1e-3
    assert poisson_pmf(1, 1.0) == poisson_pmf(0, 1.0)


def test_pmf_domain_errors():
    with pytest.raises(DomainError):
        poisson_pmf(0, 0.0)
    with pytest.raises(DomainError):
        poisson_pmf(-1, 1.0)
    with pytest.raises(DomainError):
        SeverityDistribution(lam=-2.0)


def test_clamp_probabilities():
    p = severity_probs(SeverityDistribution(1.0, 5, "clamp"))
    expected = [stats.poisson.pmf(s, 1.0) for s in range(5)] + [stats.poisson.sf(4, 1.0)]
    np.testing.assert_allclose(p, expected, rtol=1e-12)
    np.testing.assert_allclose(p, (0.3679, 0.3679, 0.1839, 0.0613, 0.0153, 0.0037), atol=5e-5)


def test_renormalize_probabilities():
    p = severity_probs(SeverityDistribution(1.0, 5, "renormalize"))
    raw = stats.poisson.pmf(np.arange(6), 1.0)
    np.testing.assert_allclose(p, raw / 0.999406, rtol=1e-6)


@given(st.floats(0.01, 20), st.integers(0, 12), st.sampled_from(["clamp", "renormalize"]))
def test_probabilities_sum_to_one(lam, S, mode):
    p = severity_probs(SeverityDistribution(lam, S, mode))
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)


def test_severity_frequencies_within_three_standard_errors():
    dist = SeverityDistribution(1.0, 5)
    n = 100_000
    s = sample_severities(n, dist, seed=11)
    freq = np.bincount(s, minlength=6) / n
    p = severity_probs(dist)
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) <= 3 * se)
    assert abs(freq[0] - 0.3679) < 0.01
    # the whole histogram also passes a chi-square goodness-of-fit test
    assert stats.chisquare(np.bincount(s, minlength=6), p * n).pvalue > 1e-3


def test_small_rate_is_mostly_clean():
    s = sample_severities(10_000, SeverityDistribution(0.001, 5), seed=0)
    assert (s == 0).mean() > 0.99


def test_severity_sampling_is_deterministic_and_thread_invariant():
    dist = SeverityDistribution()
    a = sample_severities(5000, dist, seed=3)
    np.testing.assert_array_equal(a, sample_severities(5000, dist, seed=3))
    np.testing.assert_array_equal(a, sample_severities(5000, dist, seed=3, workers=4))
    assert not np.array_equal(a, sample_severities(5000, dist, seed=4))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6),
       st.sampled_from([AdditiveGaussian(0.3), Quantize(16, 8.0)]))
def test_severity_zero_is_identity(x, kind):
    x = np.array(x)
    out = apply_corruption(x, 0, kind, seed=1, index=7)
    np.testing.assert_array_equal(out, x)


def test_gaussian_noise_scale():
    kind = AdditiveGaussian(0.1)
    X = np.zeros((10_000, 3))
    out = corrupt(X, np.full(10_000, 5), kind, seed=2)
    assert np.all(np.abs(out.std(axis=0) - 0.5) < 0.02)


def test_gaussian_distortion_grows_with_severity():
    kind, d, n = AdditiveGaussian(0.4), 6, 20_000
    X = np.ones((n, d))
    prev = 0.0
    for s in range(1, 6):
        dist2 = ((corrupt(X, np.full(n, s), kind, seed=s) - X) ** 2).sum(axis=1).mean()
        expected = d * (s * 0.4) ** 2
        assert abs(dist2 - expected) <= 0.05 * expected
        assert dist2 > prev
        prev = dist2


def test_quantize_grid():
    kind = Quantize(16, 8.0)
    assert kind.step(1) == 0.5 and kind.step(3) == 2.0
    on_grid = np.array([0.5, -1.0, 2.5, 0.0])
    np.testing.assert_array_equal(apply_corruption(on_grid, 1, kind, 0, 0), on_grid)
    out = apply_corruption(np.array([0.7, -0.9, 3.1]), 2, kind, 0, 0)
    np.testing.assert_array_equal(out, [1.0, -1.0, 3.0])


def test_apply_corruption_agrees_with_vectorised_corrupt():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 4))
    sev = np.arange(20) % 6
    kind = AdditiveGaussian(0.3)
    batch = corrupt(X, sev, kind, seed=9, tag="t")
    rows = np.array([apply_corruption(X[i], sev[i], kind, 9, i, "t") for i in range(20)])
    np.testing.assert_array_equal(batch, rows)


def test_class_means_form_a_regular_simplex():
    m = class_means(4, 10, 6.0)
    dists = [np.linalg.norm(m[i] - m[j]) for i in range(4) for j in range(i + 1, 4)]
    np.testing.assert_allclose(dists, 6.0, rtol=1e-12)
    np.testing.assert_allclose(m.mean(axis=0), 0.0, atol=1e-12)


def test_class_means_axis_fallback():
    m = class_means(5, 2, 2.0)
    assert np.count_nonzero(m, axis=1).max() == 1
    dists = [np.linalg.norm(m[i] - m[j]) for i in range(5) for j in range(i + 1, 5)]
    assert min(dists) >= 2.0 / math.sqrt(2) - 1e-12


def _synthetic(seed=0, workers=1, **kw):
    spec = SyntheticSpec(**{"num_classes": 3, "dim": 4, "n_train": 1000, "n_test_per_severity": 50, **kw})
    return generate_synthetic(spec, SeverityDistribution(1.0, 5), AdditiveGaussian(0.5), seed, workers)


def test_balanced_test_set():
    tr, te = _synthetic()
    assert len(tr) == 1000
    assert len(te) == 6 * 50
    np.testing.assert_array_equal(np.bincount(te.severity), [50] * 6)


def test_zero_spread_clean_samples_sit_on_means():
    tr, te = _synthetic(within_class_sigma=0.0)
    means = class_means(3, 4, 3.0)
    clean = te.group(0)
    np.testing.assert_array_equal(clean.X, means[clean.y])


def test_synthetic_determinism_across_runs_and_workers():
    a_tr, a_te = _synthetic(seed=5)
    b_tr, b_te = _synthetic(seed=5, workers=3)
    assert a_tr.content_hash() == b_tr.content_hash()
    assert a_te.content_hash() == b_te.content_hash()
    np.testing.assert_array_equal(a_tr.X, b_tr.X)
    assert _synthetic(seed=6)[0].content_hash() != a_tr.content_hash()


def test_dataset_is_read_only_and_round_trips(tmp_path):
    tr, _ = _synthetic()
    with pytest.raises(ValueError):
        tr.X[0, 0] = 1.0
    path = tmp_path / "d.npz"
    tr.save(path)
    back = CorruptedDataset.load(path)
    np.testing.assert_array_equal(back.X, tr.X)
    np.testing.assert_array_equal(back.severity, tr.severity)
    assert back.content_hash() == tr.content_hash()


def test_dataset_invariants():
    with pytest.raises(PreconditionError):
        CorruptedDataset(np.zeros((3, 2)), np.zeros(2), np.zeros(3), 2, 1)
    with pytest.raises(PreconditionError):
        CorruptedDataset(np.zeros((2, 2)), np.zeros(2), np.array([0, 4]), 2, 3)


def _write_csv(path, rows, header="a,b,c,d,label"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def _table(tmp_path, n=40, constant=False):
    rng = np.random.default_rng(1)
    rows = []
    for i in range(n):
        f = rng.normal(size=4)
        if constant:
            f[2] = 7.0
        rows.append(",".join(repr(float(v)) for v in f) + f",{i % 3}")
    return _write_csv(tmp_path / "t.csv", rows)


def test_csv_shapes_and_standardisation(tmp_path):
    dist = SeverityDistribution(1.0, 5)
    tr, te = load_csv(_table(tmp_path, constant=True), "label", dist, AdditiveGaussian(0.5), seed=0)
    assert tr.dim == 4 and tr.num_classes == 3
    assert len(tr) + len(te) // 6 == 40
    np.testing.assert_array_equal(np.bincount(te.severity), [len(te) // 6] * 6)
    clean = te.group(0)
    np.testing.assert_array_equal(clean.X[:, 2], 0.0)


def test_csv_reload_is_identical(tmp_path):
    path = _table(tmp_path)
    dist, kind = SeverityDistribution(), AdditiveGaussian(0.5)
    a = load_csv(path, "label", dist, kind, seed=3)
    b = load_csv(path, "label", dist, kind, seed=3, workers=2)
    assert a[0].content_hash() == b[0].content_hash()
    assert a[1].content_hash() == b[1].content_hash()


def test_csv_unparseable_cell_reports_location(tmp_path):
    path = _write_csv(tmp_path / "bad.csv", ["1,2,3,4,0", "1,2,oops,4,1"])
    with pytest.raises(IngestionError) as info:
        load_csv(path, "label", SeverityDistribution(), AdditiveGaussian(0.5), 0)
    assert info.value.row == 3 and info.value.column == "c"


def test_csv_single_class_is_rejected(tmp_path):
    path = _write_csv(tmp_path / "one.csv", [f"{i},1,2,3,1" for i in range(10)])
    with pytest.raises(PreconditionError):
        load_csv(path, "label", SeverityDistribution(), AdditiveGaussian(0.5), 0)


def test_csv_missing_label_column(tmp_path):
    path = _write_csv(tmp_path / "nolabel.csv", ["1,2,3,4,0"], header="a,b,c,d,y")
    with pytest.raises(IngestionError):
        load_csv(path, "label", SeverityDistribution(), AdditiveGaussian(0.5), 0)
