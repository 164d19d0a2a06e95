import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from reefbench.config import NoiseConfig, ScannerConfig
from reefbench.core import Bounds
from reefbench.detect import PlaneModel
from reefbench.noisechar import (
    NoiseError,
    characterize,
    histogram,
    point_to_plane,
    recovered_within,
    skewness_test,
    write_histogram_csv,
    zscore_trim,
)
from reefbench.simulate import flat_terrain, simulate_scan


def oracle_skew_z(x):
    """D'Agostino's skewness transform written out from the published formulas."""
    x = np.asarray(x, float)
    n = len(x)
    d = x - x.mean()
    g1 = np.mean(d**3) / np.mean(d**2) ** 1.5
    y = g1 * math.sqrt((n + 1) * (n + 3) / (6.0 * (n - 2)))
    beta2 = 3.0 * (n * n + 27 * n - 70) * (n + 1) * (n + 3) / ((n - 2) * (n + 5) * (n + 7) * (n + 9))
    w2 = -1.0 + math.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / math.sqrt(0.5 * math.log(w2))
    alpha = math.sqrt(2.0 / (w2 - 1.0))
    z = delta * math.asinh(y / alpha)
    return z, 2.0 * (1.0 - ndtr(abs(z)))


def flat_scan(sigma=0.01, seed=0, length=64.0):
    """Near-nadir strip (|angle| <= ~18 deg) under one survey line, so vertical spread tracks the range noise."""
    sc = ScannerConfig(beam_count=1024, noise_sigma=sigma, dropout_prob=0.0, direction_mode="x")
    return simulate_scan(flat_terrain(Bounds(0.0, 0.0, length, 10.0)), [], sc, seed)


# -- point_to_plane ------------------------------------------------------------------


def test_point_to_plane_signed():
    pl = PlaneModel(np.array([0.0, 0.0, 1.0]), -1.0, 0)
    d = point_to_plane(np.array([[3.0, 4.0, 1.0], [0.0, 0.0, 1.5], [0, 0, 0.0]]), pl)
    np.testing.assert_allclose(d, [0.0, 0.5, -1.0])


def test_flat_scan_residual_spread():
    d = flat_scan(length=64.0)[:, 2]
    assert len(d) >= 100_000
    assert 0.0095 <= d.std() <= 0.0105


# -- trimming ---------------------------------------------------------------------------


def test_trim_all_equal():
    v, removed = zscore_trim(np.full(10, 3.0), 2)
    assert removed == 0 and len(v) == 10


def test_trim_single_outlier():
    v, removed = zscore_trim(np.r_[np.zeros(99), 100.0], 2)
    assert removed == 1 and np.all(v == 0)


def test_trim_normal_fraction(rng):
    _, removed = zscore_trim(rng.standard_normal(100_000), 2)
    assert abs(removed / 1e5 - 0.0455) < 0.005


def test_trim_errors():
    with pytest.raises(NoiseError):
        zscore_trim([1.0], 2)
    with pytest.raises(NoiseError):
        zscore_trim([1.0, 2.0], 0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60), st.floats(0.5, 4))
def test_trim_single_pass_count(values, k):
    v = np.array(values)
    kept, removed = zscore_trim(v, k)
    sd = v.std()
    expected = 0 if sd == 0 else int(np.sum(np.abs(v - v.mean()) / sd > k))
    assert removed == expected and len(kept) == len(v) - removed


# -- skewness -----------------------------------------------------------------------------


def test_skew_matches_hand_formula(rng):
    for x in (rng.standard_normal(50), rng.exponential(size=300), rng.gamma(5.0, size=2000)):
        z, p, _ = skewness_test(x)
        oz, op = oracle_skew_z(x)
        assert z == pytest.approx(oz, rel=1e-10)
        assert p == pytest.approx(op, rel=1e-8, abs=1e-15)


def test_skew_symmetric_fixture():
    z, p, ok = skewness_test(np.tile([-1.0, 1.0], 50))
    assert z == pytest.approx(0.0, abs=1e-12)
    assert p == pytest.approx(1.0) and ok


def test_skew_exponential_fails(rng):
    _, p, ok = skewness_test(rng.exponential(size=10_000))
    assert p < 0.001 and not ok


def test_skew_normal_passes_mostly():
    passes = sum(skewness_test(np.random.default_rng(s).normal(0, 0.01, 10_000))[2] for s in range(50))
    assert passes >= 45


def test_skew_needs_twenty():
    with pytest.raises(NoiseError):
        skewness_test(np.arange(19.0))
    skewness_test(np.arange(20.0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(20, 500))
def test_skew_sign_symmetric(seed, n):
    x = np.random.default_rng(seed).gamma(2.0, size=n)
    z1, p1, _ = skewness_test(x)
    z2, p2, _ = skewness_test(-x)
    assert z2 == pytest.approx(-z1, rel=1e-9)
    assert p2 == pytest.approx(p1, rel=1e-9)
    assert 0.0 <= p1 <= 1.0


# -- characterize ----------------------------------------------------------------------------


def test_characterize_flat_scan():
    rep = characterize(flat_scan(seed=3))
    assert rep.trimmed.sigma < rep.raw.sigma
    assert 0.008 <= rep.trimmed.sigma <= 0.011 and 0.008 <= rep.raw.sigma <= 0.011
    assert abs(rep.raw.mu) <= 0.001
    assert recovered_within(rep, 0.01, 0.1)
    assert rep.plane.normal[2] > 0
    assert rep.trimmed.n == rep.raw.n - rep.trimmed.removed
    assert rep.raw_hist.counts.sum() == rep.raw.n
    assert rep.trimmed_hist.counts.sum() == rep.trimmed.n
    assert "trimmed" in rep.summary()


def test_characterize_noiseless():
    rep = characterize(flat_scan(sigma=0.0, length=10.0))
    assert rep.raw.mu == pytest.approx(0.0, abs=1e-12)
    assert rep.raw.sigma == pytest.approx(0.0, abs=1e-12)


def test_contamination_asymmetric_vs_symmetric(rng):
    pts = flat_scan(seed=5)
    n_out = len(pts) // 100
    idx = rng.choice(len(pts), n_out, replace=False)
    up = pts.copy()
    up[idx, 2] += rng.uniform(0.2, 0.5, n_out)
    rep = characterize(up, NoiseConfig())
    assert not rep.raw.passes(0.05)
    assert rep.trimmed.passes(0.05)
    assert rep.trimmed.removed >= n_out
    both = pts.copy()
    both[idx, 2] += rng.choice([-1.0, 1.0], n_out) * rng.uniform(0.2, 0.5, n_out)
    sym = characterize(both, NoiseConfig())
    assert abs(sym.raw.skew_statistic) < abs(rep.raw.skew_statistic) / 5
    assert sym.trimmed.passes(0.05)


def test_histogram_csv(tmp_path, rng):
    h = histogram(rng.normal(size=1000))
    write_histogram_csv(h, tmp_path / "h.csv")
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert rows[0] == ["bin_left", "bin_right", "count"]
    body = [(float(a), float(b), int(c)) for a, b, c in rows[1:]]
    assert sum(c for _, _, c in body) == 1000
    assert all(body[i][1] == body[i + 1][0] for i in range(len(body) - 1))
    np.testing.assert_array_equal([r[0] for r in body], h.edges[:-1])
