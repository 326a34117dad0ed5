"""Probability primitives on plain numpy arrays.

Differentiable counterparts used during training live in ``hypervae``; the
functions here are the reference versions used for sampling and scoring.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, ndtr

LOG_2PI = math.log(2.0 * math.pi)
KL_FLOOR = 1e-12


class InvalidDistribution(ValueError):
    pass


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise InvalidDistribution(f"mean shape {mean.shape} != std shape {std.shape}")
        if not np.all(std > 0):
            raise InvalidDistribution("standard deviations must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass(frozen=True)
class GmmParams:
    """Diagonal Gaussian mixture: means and stds are (M, d), weights (M,)."""

    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.atleast_2d(np.asarray(self.stds, dtype=np.float64))
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if means.shape != stds.shape or means.shape[0] != weights.shape[0]:
            raise InvalidDistribution(
                f"inconsistent mixture shapes: means {means.shape}, stds {stds.shape}, weights {weights.shape}")
        if not np.all(stds > 0):
            raise InvalidDistribution("mixture stds must be strictly positive")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise InvalidDistribution(f"mixing weights must be nonnegative and sum to 1 (sum={weights.sum()!r})")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        object.__setattr__(self, "weights", weights)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means


def diag_gaussian_log_prob(g: DiagGaussian, x) -> np.ndarray:
    """Exact log-density; ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != g.dim:
        raise InvalidDistribution(f"point dim {x.shape[-1]} != distribution dim {g.dim}")
    z = (x - g.mean) / g.std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(g.std), axis=-1) - 0.5 * g.dim * LOG_2PI


def gmm_component_log_probs(p: GmmParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.dim:
        raise InvalidDistribution(f"point dim {x.shape[-1]} != mixture dim {p.dim}")
    z = (x[..., None, :] - p.means) / p.stds
    return (-0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(p.stds), axis=-1)
            - 0.5 * p.dim * LOG_2PI)


def gmm_log_prob(p: GmmParams, x) -> np.ndarray:
    """log sum_m w_m N(x; mu_m, diag(s_m^2)), via log-sum-exp over components."""
    with np.errstate(divide="ignore"):
        log_w = np.log(p.weights)
    return logsumexp(gmm_component_log_probs(p, x) + log_w, axis=-1)


def gmm_sample(p: GmmParams, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw a component by weight, then a Gaussian point; one point if ``n`` is None."""
    count = 1 if n is None else int(n)
    comp = rng.choice(p.n_components, size=count, p=p.weights)
    eps = rng.standard_normal(size=(count, p.dim))
    pts = p.means[comp] + p.stds[comp] * eps
    return pts[0] if n is None else pts


def kl_diag_vs_standard(q: DiagGaussian) -> float:
    mu, var = q.mean, q.std ** 2
    return float(np.sum(0.5 * (mu * mu + var - 1.0 - np.log(var))))


def isotropic_gaussian_entropy(sigma: float, dim: int) -> float:
    if not sigma > 0:
        raise InvalidDistribution(f"sigma must be positive, got {sigma}")
    return 0.5 * dim * math.log(2.0 * math.pi * math.e * sigma * sigma)


# -- density grids ------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    x_min: float = -6.0
    y_min: float = -6.0
    x_max: float = 6.0
    y_max: float = 6.0
    nx: int = 100
    ny: int = 100

    @property
    def x_edges(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx + 1)

    @property
    def y_edges(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny + 1)

    @property
    def cell_area(self) -> float:
        return (self.x_max - self.x_min) / self.nx * (self.y_max - self.y_min) / self.ny

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xe, ye = self.x_edges, self.y_edges
        return 0.5 * (xe[1:] + xe[:-1]), 0.5 * (ye[1:] + ye[:-1])


@dataclass(frozen=True)
class DensityGrid:
    """Cell masses indexed [ix, iy]; ``outside`` counts points beyond the bounds."""

    spec: GridSpec
    mass: np.ndarray
    n_inside: int = 0
    outside: int = 0

    def __post_init__(self):
        if self.mass.shape != (self.spec.nx, self.spec.ny):
            raise ValueError(f"mass shape {self.mass.shape} does not match grid {self.spec.nx}x{self.spec.ny}")
        if np.any(self.mass < 0):
            raise ValueError("cell masses must be nonnegative")


def histogram_density(samples, spec: GridSpec = GridSpec()) -> DensityGrid:
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    inside = ((pts[:, 0] >= spec.x_min) & (pts[:, 0] <= spec.x_max)
              & (pts[:, 1] >= spec.y_min) & (pts[:, 1] <= spec.y_max))
    n_in = int(inside.sum())
    if n_in == 0:
        raise ValueError("histogram_density: no samples inside the grid bounds")
    counts, _, _ = np.histogram2d(pts[inside, 0], pts[inside, 1], bins=[spec.x_edges, spec.y_edges])
    return DensityGrid(spec, counts / n_in, n_inside=n_in, outside=len(pts) - n_in)


def gmm_cell_masses(p: GmmParams, spec: GridSpec = GridSpec(), renormalize: bool = True) -> DensityGrid:
    """Exact per-cell probability of a 2-D diagonal mixture (product of normal CDFs)."""
    if p.dim != 2:
        raise InvalidDistribution("cell masses are defined for 2-D mixtures only")
    mass = np.zeros((spec.nx, spec.ny))
    for w, mu, s in zip(p.weights, p.means, p.stds):
        px = np.diff(ndtr((spec.x_edges - mu[0]) / s[0]))
        py = np.diff(ndtr((spec.y_edges - mu[1]) / s[1]))
        mass += w * np.outer(px, py)
    if renormalize:
        mass = mass / mass.sum()
    return DensityGrid(spec, mass)


def kl_metric(target: DensityGrid, model: DensityGrid, floor: float = KL_FLOOR) -> float:
    """sum over cells with p > 0 of p ln(p / max(q, floor)).

    Flooring can push the raw sum below zero by at most n_cells * floor; the
    result is clamped at 0.
    """
    if target.spec != model.spec:
        raise ValueError(f"kl_metric: grid specs differ ({target.spec} vs {model.spec})")
    p, q = target.mass, model.mass
    m = p > 0
    return max(0.0, float(np.sum(p[m] * (np.log(p[m]) - np.log(np.maximum(q[m], floor))))))


def grid_cross_entropy(target: DensityGrid, model: DensityGrid, floor: float = KL_FLOOR) -> float:
    """Differential cross-entropy estimate -sum p ln(q / cell_area)."""
    if target.spec != model.spec:
        raise ValueError("grid_cross_entropy: grid specs differ")
    p, q = target.mass, model.mass
    m = p > 0
    return float(-np.sum(p[m] * (np.log(np.maximum(q[m], floor)) - math.log(target.spec.cell_area))))


def nll_metric(log_probs) -> float:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("nll_metric: no log-probabilities")
    if np.any(np.isnan(lp)):
        raise ValueError("nll_metric: NaN log-probability")
    return float(-lp.mean())


# -- grid serialization -------------------------------------------------------
#
# PGM: standard binary "P5" graymap with maxval 65535 (big-endian uint16 per
# pixel). Rows run from y_max (top) to y_min, columns from x_min to x_max; pixel
# value = round(65535 * mass / max(mass)). A comment line carries the bounds:
#   # cvaeh-grid x_min y_min x_max y_max total_mass_scale
# CSV: header "ix,iy,x_center,y_center,mass", one row per cell, ix-major.

def write_grid_pgm(grid: DensityGrid, path: str | os.PathLike) -> None:
    spec = grid.spec
    peak = float(grid.mass.max()) or 1.0
    img = np.round(65535.0 * grid.mass / peak).astype(">u2").T[::-1]
    header = (f"P5\n# cvaeh-grid {spec.x_min!r} {spec.y_min!r} {spec.x_max!r} {spec.y_max!r} {peak!r}\n"
              f"{spec.nx} {spec.ny}\n65535\n").encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def read_grid_pgm(path: str | os.PathLike) -> DensityGrid:
    blob = Path(path).read_bytes()
    lines = []
    pos = 0
    while len(lines) < 4:
        end = blob.index(b"\n", pos)
        lines.append(blob[pos:end].decode("ascii"))
        pos = end + 1
    if lines[0] != "P5" or not lines[1].startswith("# cvaeh-grid"):
        raise ValueError(f"{path}: not a cvaeh density image")
    x_min, y_min, x_max, y_max, peak = map(float, lines[1].split()[2:])
    nx, ny = map(int, lines[2].split())
    img = np.frombuffer(blob, dtype=">u2", count=nx * ny, offset=pos).reshape(ny, nx)
    mass = img[::-1].T.astype(np.float64) * peak / 65535.0
    return DensityGrid(GridSpec(x_min, y_min, x_max, y_max, nx, ny), mass)


def write_grid_csv(grid: DensityGrid, path: str | os.PathLike) -> None:
    xc, yc = grid.spec.cell_centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ix", "iy", "x_center", "y_center", "mass"])
        for ix in range(grid.spec.nx):
            for iy in range(grid.spec.ny):
                w.writerow([ix, iy, f"{xc[ix]:.6f}", f"{yc[iy]:.6f}", repr(float(grid.mass[ix, iy]))])


def read_grid_csv(path: str | os.PathLike, spec: GridSpec) -> DensityGrid:
    mass = np.zeros((spec.nx, spec.ny))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            mass[int(row["ix"]), int(row["iy"])] = float(row["mass"])
    return DensityGrid(spec, mass)

