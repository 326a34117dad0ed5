"""Hypernetwork for the toy Gaussian experiments, plus their data generators."""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from . import hypervae as hv
from . import prob
from .diffcore import Tensor

G1_CONDITIONS = (0.0, 1.0, 2.0)
G1_MEAN = 1.0
G1_STD = math.sqrt(2.0 / 3.0)
G2_TRAIN = ((0.0, 0.0), (-4.0, 4.0), (4.0, 4.0), (4.0, -4.0), (-4.0, -4.0))
G2_UNSEEN = ((0.0, 4.0), (4.0, 0.0), (0.0, -4.0), (-4.0, 0.0))
G2_SIGMA = 0.5
G2_SCALE = 4.0


class ConditionError(ValueError):
    pass


class GaussHypernet(dc.Module):
    """Two-layer ReLU MLP: condition -> [theta_enc, theta_dec].

    The output layer starts at a He-initialised VAE weight vector for every
    condition (see ``HyperOutput``).
    """

    def __init__(self, cond_dim: int, arch: hv.VaeArch, rng: np.random.Generator,
                 hidden: int = 128, gain: float = 0.02, mean_spread: float = 0.0,
                 init_std: float = 1.0):
        if cond_dim not in (1, 2):
            raise ConditionError(f"condition dim must be 1 or 2, got {cond_dim}")
        self.cond_dim = cond_dim
        self.arch = arch
        self.n_enc = arch.enc_layout.size
        self.hidden = dc.Linear(cond_dim, hidden, rng)
        init = np.concatenate([arch.enc_layout.init_vector(rng), arch.dec_init_vector(rng, mean_spread, init_std)])
        self.out = hv.HyperOutput(hidden, init, rng, gain)

    def __call__(self, c) -> hv.HyperWeights:
        c = dc.as_tensor(c)
        if c.ndim == 1:
            c = c.reshape(-1, self.cond_dim) if self.cond_dim > 1 else c.reshape(-1, 1)
        if c.ndim != 2 or c.shape[1] != self.cond_dim:
            raise ConditionError(f"expected conditions of dim {self.cond_dim}, got shape {c.shape}")
        flat = self.out(dc.relu(self.hidden(c)))
        return hv.HyperWeights(flat[:, :self.n_enc], flat[:, self.n_enc:])


# -- target generators ------------------------------------------------------

def grid_mixture(side: int, sigma: float, lo: float, hi: float) -> prob.GmmParams:
    ticks = np.linspace(lo, hi, side)
    xs, ys = np.meshgrid(ticks, ticks, indexing="ij")
    means = np.stack([xs.ravel(), ys.ravel()], axis=1)
    k = len(means)
    return prob.GmmParams(means, np.full((k, 2), sigma), np.full(k, 1.0 / k))


def gaussian1_targets(sigmas=(0.8, 1.0 / 3.0, 0.195)) -> dict[float, prob.GmmParams]:
    """Condition -> generating mixture: 2x2, 5x5 and 10x10 grids of equal-weight Gaussians."""
    return {
        0.0: grid_mixture(2, sigmas[0], -2.0, 2.0),
        1.0: grid_mixture(5, sigmas[1], -4.0, 4.0),
        2.0: grid_mixture(10, sigmas[2], -4.5, 4.5),
    }


def gaussian2_target(center, sigma: float = G2_SIGMA) -> prob.GmmParams:
    return prob.GmmParams(np.asarray(center, dtype=np.float64).reshape(1, 2), np.full((1, 2), sigma), [1.0])


def encode_g1(c) -> np.ndarray:
    return ((np.asarray(c, dtype=np.float64) - G1_MEAN) / G1_STD).reshape(-1, 1)


def encode_g2(c) -> np.ndarray:
    return np.asarray(c, dtype=np.float64).reshape(-1, 2) / G2_SCALE


class GaussModel(dc.Module):
    """Hypernetwork plus the raw-condition encoding for one experiment."""

    def __init__(self, experiment: str, arch: hv.VaeArch, rng: np.random.Generator, hidden: int = 128,
                 gain: float = 0.02, mean_spread: float = 0.0, init_std: float = 1.0):
        if experiment not in ("gaussian1", "gaussian2"):
            raise ConditionError(f"unknown experiment {experiment!r}")
        self.experiment = experiment
        self.arch = arch
        self.net = GaussHypernet(1 if experiment == "gaussian1" else 2, arch, rng, hidden, gain, mean_spread, init_std)

    def encode(self, c) -> np.ndarray:
        return encode_g1(c) if self.experiment == "gaussian1" else encode_g2(c)

    def weights(self, conds) -> hv.HyperWeights:
        return self.net(Tensor(self.encode(conds)))

    def weights_per_row(self, conds: np.ndarray) -> hv.HyperWeights:
        """Run the hypernet once per distinct condition, then gather per row."""
        enc = self.encode(conds)
        uniq, inverse = np.unique(enc, axis=0, return_inverse=True)
        theta = self.net(Tensor(uniq))
        return theta.rows(inverse.reshape(-1))

    def loss(self, x: np.ndarray, conds: np.ndarray, rng=None, eps=None, n_z: int = 1,
             kl_weight: float = 1.0) -> hv.ElboReport:
        theta = self.weights_per_row(conds)
        return hv.elbo(x, theta, self.arch, rng=rng, eps=eps, n_z=n_z, kl_weight=kl_weight)

    def sample(self, cond, n: int, rng: np.random.Generator) -> np.ndarray:
        theta = self.weights(np.asarray(cond, dtype=np.float64).reshape(1, -1))
        return hv.generate(theta.dec, self.arch, rng, n)[0]

    def log_prob_prior_z(self, x: np.ndarray, cond, rng: np.random.Generator, n_z: int = 1) -> np.ndarray:
        theta = self.weights(np.asarray(cond, dtype=np.float64).reshape(1, -1))
        x = np.asarray(x, dtype=np.float64).reshape(1, -1, 2)
        return hv.log_likelihood_given_prior_z(x, theta.dec, self.arch, rng, n_z=n_z)[0]


class GaussSampler:
    """Draws (x, condition) minibatches with conditions balanced by cycling."""

    def __init__(self, targets: dict, conditions):
        self.targets = targets
        self.conditions = [np.atleast_1d(np.asarray(c, dtype=np.float64)) for c in conditions]

    def _key(self, c):
        return float(c[0]) if len(c) == 1 else tuple(float(v) for v in c)

    def batch(self, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        k = len(self.conditions)
        idx = np.arange(batch_size) % k
        xs = np.empty((batch_size, 2))
        for j, c in enumerate(self.conditions):
            rows = np.flatnonzero(idx == j)
            xs[rows] = prob.gmm_sample(self.targets[self._key(c)], rng, len(rows))
        conds = np.stack([self.conditions[j] for j in idx])
        return xs, conds
