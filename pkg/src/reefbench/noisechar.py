"""Sensor noise characterization from a near-planar reference patch.

A plane is fitted robustly and the signed point-to-plane distances are
summarized. They are trimmed once by Z-score, after which D'Agostino's
skewness test checks the remaining residuals for symmetry.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .config import NoiseConfig
from .core import as_cloud
from .detect import PlaneModel, ransac_plane

MIN_SKEW_SAMPLES = 20


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseStats:
    mu: float
    sigma: float
    n: int
    skew_statistic: float
    skew_pvalue: float
    trimmed: bool
    trim_k: float | None = None
    removed: int = 0

    def passes(self, alpha: float = 0.05) -> bool:
        return self.skew_pvalue >= alpha

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> list[tuple[float, float, int]]:
        return [(float(a), float(b), int(c)) for a, b, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


@dataclass(frozen=True)
class NoiseReport:
    plane: PlaneModel
    raw: NoiseStats
    trimmed: NoiseStats
    raw_hist: Histogram
    trimmed_hist: Histogram
    alpha: float = 0.05

    def summary(self) -> str:
        lines = [f"plane normal {np.round(self.plane.normal, 6).tolist()} offset {self.plane.offset:.6f}"]
        for name, s in (("raw", self.raw), ("trimmed", self.trimmed)):
            verdict = "pass" if s.passes(self.alpha) else "fail"
            lines.append(
                f"{name:<8} n={s.n:<8d} mu={s.mu:+.5f} m  sigma={s.sigma:.5f} m  "
                f"skew z={s.skew_statistic:+.3f} p={s.skew_pvalue:.4f} ({verdict} at alpha={self.alpha:g})"
            )
        lines.append(f"removed by trimming: {self.trimmed.removed} (k={self.trimmed.trim_k:g})")
        return "\n".join(lines)


def point_to_plane(cloud: np.ndarray, plane: PlaneModel) -> np.ndarray:
    """Signed distances n·p + d."""
    return plane.distance(as_cloud(cloud))


def zscore_trim(values: np.ndarray, k: float = 2.0) -> tuple[np.ndarray, int]:
    """Drop values more than ``k`` standard deviations from the mean.

    One pass: mean and std come from the untrimmed data. Zero variance
    returns the input unchanged.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < 2:
        raise NoiseError("need at least 2 values to trim")
    if not k > 0:
        raise NoiseError("k must be positive")
    sd = v.std()
    if sd == 0:
        return v.copy(), 0
    keep = np.abs(v - v.mean()) / sd <= k
    return v[keep], int(len(v) - keep.sum())


def skewness_test(values: np.ndarray, alpha: float = 0.05) -> tuple[float, float, bool]:
    """D'Agostino skewness z-test, two-sided: (z, p, p >= alpha)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < MIN_SKEW_SAMPLES:
        raise NoiseError(f"skewness test needs n >= {MIN_SKEW_SAMPLES}, got {len(v)}")
    if v.std() == 0:
        return 0.0, 1.0, True
    if stats.skew(v) == 0:
        # scipy.stats.skewtest maps an exactly zero skewness to z != 0
        return 0.0, 1.0, True
    z, p = stats.skewtest(v)
    z, p = float(z), float(p)
    return z, p, p >= alpha


def noise_stats(values: np.ndarray, trimmed: bool = False, trim_k: float | None = None, removed: int = 0) -> NoiseStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    z, p, _ = skewness_test(v)
    return NoiseStats(float(v.mean()), float(v.std()), len(v), z, p, trimmed, trim_k, removed)


def histogram(values: np.ndarray) -> Histogram:
    """Freedman–Diaconis binning."""
    v = np.asarray(values, dtype=np.float64).ravel()
    edges = np.histogram_bin_edges(v, bins="fd")
    counts, _ = np.histogram(v, bins=edges)
    return Histogram(edges, counts)


def characterize(cloud: np.ndarray, cfg: NoiseConfig | None = None, seed: int = 0) -> NoiseReport:
    """Fit the reference plane, then summarize raw and trimmed residuals."""
    cfg = cfg or NoiseConfig()
    cloud = as_cloud(cloud)
    plane = ransac_plane(cloud, cfg.ransac_iterations, cfg.ransac_inlier_dist, seed)
    if plane.normal[2] < 0:  # report heights above the plane as positive
        plane = PlaneModel(-plane.normal, -plane.offset, plane.inlier_count)
    d = point_to_plane(cloud, plane)
    kept, removed = zscore_trim(d, cfg.trim_k)
    raw = noise_stats(d)
    trimmed = noise_stats(kept, True, cfg.trim_k, removed)
    return NoiseReport(plane, raw, trimmed, histogram(d), histogram(kept), cfg.alpha)


def write_histogram_csv(hist: Histogram, path: str | os.PathLike) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for a, b, c in hist.rows():
            w.writerow([repr(a), repr(b), c])


def recovered_within(report: NoiseReport, sigma: float, rel: float = 0.1) -> bool:
    """Closure check: raw sigma within ``rel`` of the injected value."""
    return math.isclose(report.raw.sigma, sigma, rel_tol=rel)
