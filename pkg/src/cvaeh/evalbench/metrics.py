"""Trajectory metrics, density-grid mode counting and behaviour-mode coverage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import h_maxima

from .. import prob, scenes


class MetricError(ValueError):
    pass


def _check(samples, gt) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(samples, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    if s.shape[0] == 0:
        raise MetricError("empty sample set")
    if s.shape[1:] != g.shape:
        raise MetricError(f"sample trajectories {s.shape[1:]} do not match ground truth {g.shape}")
    return s, g


def msd_per_sample(samples, gt) -> np.ndarray:
    """||X^k - X^gt||^2 / T for each sample k (squared error summed over steps and coords)."""
    s, g = _check(samples, gt)
    return np.sum((s - g) ** 2, axis=(1, 2)) / g.shape[0]


def minmsd(samples, gt) -> float:
    return float(msd_per_sample(samples, gt).min())


def min_ade(samples, gt) -> float:
    s, g = _check(samples, gt)
    return float(np.linalg.norm(s - g, axis=-1).mean(axis=1).min())


def min_fde(samples, gt) -> float:
    s, g = _check(samples, gt)
    return float(np.linalg.norm(s[:, -1] - g[-1], axis=-1).min())


def nested_minmsd(samples, gt, ks) -> dict[int, float]:
    """m_K over the first K samples for each K; non-increasing in K by construction."""
    per = msd_per_sample(samples, gt)
    if max(ks) > len(per):
        raise MetricError(f"need {max(ks)} samples, have {len(per)}")
    return {int(k): float(per[:k].min()) for k in ks}


@dataclass(frozen=True)
class MinMsdReport:
    k: int
    per_agent: np.ndarray  # mean m_K per agent slot (NaN where a slot never occurs)
    mean: float


def aggregate_minmsd(k: int, values, slots, n_slots: int = scenes.MAX_AGENTS) -> MinMsdReport:
    values = np.asarray(values, dtype=np.float64)
    slots = np.asarray(slots)
    per = np.full(n_slots, np.nan)
    for j in range(n_slots):
        if np.any(slots == j):
            per[j] = values[slots == j].mean()
    return MinMsdReport(k, per, float(values.mean()))


# -- mode counting ---------------------------------------------------------

def count_modes(grid: prob.DensityGrid, smooth_cells: float = 1.5, h: float = 0.1) -> int:
    """Number of distinct peaks in a density grid.

    The cell masses are smoothed with a Gaussian of ``smooth_cells`` cells
    (zero outside the grid), scaled to a peak of 1, and regional maxima with
    dynamic at least ``h`` are counted as 8-connected components.
    """
    sm = ndimage.gaussian_filter(grid.mass.astype(np.float64), sigma=smooth_cells, mode="constant")
    peak = sm.max()
    if peak <= 0:
        return 0
    maxima = h_maxima(sm / peak, h)
    _, n = ndimage.label(maxima, structure=np.ones((3, 3)))
    return int(n)


def mode_neighbourhood_mass(grid: prob.DensityGrid, centers, radius: float) -> np.ndarray:
    """Histogram mass within ``radius`` of each centre."""
    xc, yc = grid.spec.cell_centers()
    gx, gy = np.meshgrid(xc, yc, indexing="ij")
    out = []
    for c in np.asarray(centers, dtype=np.float64):
        out.append(float(grid.mass[(gx - c[0]) ** 2 + (gy - c[1]) ** 2 <= radius ** 2].sum()))
    return np.array(out)


# -- behaviour modes --------------------------------------------------------

@dataclass(frozen=True)
class CoverageReport:
    modes: tuple[str, ...]
    hit: tuple[str, ...]
    counts: dict

    @property
    def coverage(self) -> float:
        return len(self.hit) / len(self.modes)


def classify_samples(samples, center) -> list[str]:
    s = np.asarray(samples, dtype=np.float64)
    return [scenes.classify_endpoint(traj[-1], center) for traj in s]


def mode_coverage(samples, center, modes) -> CoverageReport:
    """Fraction of ``modes`` hit by at least one sample's endpoint sector."""
    modes = tuple(modes)
    if not modes:
        raise MetricError("scene has no generator modes")
    labels = classify_samples(samples, center)
    counts = {m: labels.count(m) for m in set(labels) | set(modes)}
    return CoverageReport(modes, tuple(m for m in modes if counts.get(m, 0) > 0), counts)


def generator_modes(tag: str, probs=(0.4, 0.3, 0.3, 0.0)) -> tuple[str, ...]:
    """Behaviour modes an approaching agent can take, by scenario tag."""
    if tag == "four-way":
        return tuple(m for m, p in zip(scenes.FOUR_WAY_MODES, probs) if p > 0)
    if tag == "three-way":
        return ("left", "right")
    raise MetricError(f"no generator mode set for tag {tag!r}")


def final_displacement(samples) -> np.ndarray:
    """Distance from the t = 0 position (the origin in the target frame) at the last step."""
    s = np.asarray(samples, dtype=np.float64)
    return np.linalg.norm(s[..., -1, :], axis=-1)
