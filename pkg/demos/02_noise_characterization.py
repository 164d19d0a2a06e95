"""Recover the sensor noise model from a flat reference patch.

Range noise is applied along each beam, so the vertical spread seen on a
flat floor is sigma * cos(beam angle). A strip directly under one survey
line keeps the beams near nadir, where that spread is close to sigma.

Run: python3 demos/02_noise_characterization.py
"""

# %% Scan a flat strip with sigma = 1 cm and a few asymmetric artifacts
import numpy as np

from reefbench.config import ScannerConfig
from reefbench.core import Bounds
from reefbench.noisechar import characterize
from reefbench.simulate import flat_terrain, simulate_scan

scanner = ScannerConfig(beam_count=1024, noise_sigma=0.01, dropout_prob=0.0, direction_mode="x")
cloud = simulate_scan(flat_terrain(Bounds(0.0, 0.0, 30.0, 10.0)), [], scanner, seed=0)
rng = np.random.default_rng(0)
spikes = rng.choice(len(cloud), len(cloud) // 200, replace=False)
cloud[spikes, 2] += rng.uniform(0.1, 0.3, len(spikes))
print(f"{len(cloud)} points, {len(spikes)} lifted by 10-30 cm")

# %% Plane fit, residuals, one Z-score trim, skewness test
report = characterize(cloud)
print(report.summary())

# %% Text histogram of the trimmed residuals (mm)
hist = report.trimmed_hist
peak = hist.counts.max()
for left, right, count in hist.rows()[:: max(1, len(hist.counts) // 20)]:
    bar = "#" * int(50 * count / peak)
    print(f"{1000 * left:+7.1f} .. {1000 * right:+7.1f} {bar}")
