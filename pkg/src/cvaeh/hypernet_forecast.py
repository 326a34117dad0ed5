"""Forecasting hypernetwork: social, spatial and time encoders feeding two weight heads.

Inputs are target-centric. Positions are divided by ``POS_SCALE`` and query
times by ``TIME_SCALE`` before entering any network, and the VAE target is
the scaled future position at the queried time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import hypervae as hv
from . import scenes
from .diffcore import ShapeError, Tensor

POS_SCALE = 10.0
TIME_SCALE = 4.0
HORIZON = (np.arange(scenes.N_FUTURE) + 1) * scenes.DT  # 0.2 .. 4.0 s

REF_DIM = 24
TRAFFIC_DIM = 40
SOCIAL_DIM = REF_DIM + TRAFFIC_DIM
SPATIAL_DIM = 96
TIME_DIM = 10
CONDITION_DIM = SOCIAL_DIM + SPATIAL_DIM + TIME_DIM


def default_arch() -> hv.VaeArch:
    return hv.VaeArch(x_dim=2, z_dim=8, enc_hidden=(64, 64, 64), dec_hidden=(64, 64, 64), n_components=6)


@dataclass(frozen=True)
class ForecastDims:
    other_hidden: int = 32
    channels: tuple[int, ...] = (8, 12, 16, 16)
    convs_per_block: int = 5
    time_hidden: int = 32
    head_hidden: int = 128
    gain: float = 0.02


class SocialModule(dc.Module):
    """Target LSTM -> h_ref (24); shared LSTM over others, masked sum, linear -> h_traffic (40)."""

    def __init__(self, rng: np.random.Generator, other_hidden: int = 32):
        self.ref = dc.LSTM(2, REF_DIM, rng, num_layers=2)
        self.other = dc.LSTM(2, other_hidden, rng, num_layers=2)
        self.traffic = dc.Linear(other_hidden, TRAFFIC_DIM, rng)

    def __call__(self, history: np.ndarray, mask: np.ndarray) -> Tensor:
        history = np.asarray(history, dtype=np.float64)
        if history.ndim != 4 or history.shape[1:] != (scenes.MAX_AGENTS, scenes.N_PAST, 2):
            raise ShapeError(f"social: expected (batch, {scenes.MAX_AGENTS}, {scenes.N_PAST}, 2) histories, "
                             f"got {history.shape}")
        b = history.shape[0]
        mask = np.asarray(mask, dtype=np.float64).reshape(b, scenes.MAX_AGENTS)
        # absent slots hold the sentinel; zero them so they never reach an LSTM
        scaled = np.where(mask[:, :, None, None] > 0, history / POS_SCALE, 0.0)
        h_ref = self.ref(Tensor(scaled[:, 0]))
        others = self.other(Tensor(scaled[:, 1:].reshape(b * (scenes.MAX_AGENTS - 1), scenes.N_PAST, 2)))
        others = others.reshape(b, scenes.MAX_AGENTS - 1, -1) * Tensor(mask[:, 1:, None])
        h_traffic = self.traffic(dc.tsum(others, axis=1))
        return dc.concat([h_ref, h_traffic], axis=1)


class SpatialBlock(dc.Module):
    """Coordconv layers (residual after the first), 2x2 max-pool, batch norm."""

    def __init__(self, c_in: int, c_out: int, n_convs: int, rng: np.random.Generator):
        self.convs = [dc.CoordConv2d(c_in if i == 0 else c_out, c_out, rng) for i in range(n_convs)]
        self.norm = dc.BatchNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        h = dc.relu(self.convs[0](x))
        for conv in self.convs[1:]:
            h = h + dc.relu(conv(h))
        return self.norm(dc.maxpool2d(h, 2))


class SpatialModule(dc.Module):
    def __init__(self, rng: np.random.Generator, channels=(8, 12, 16, 16), convs_per_block: int = 5):
        widths = (3, *channels)
        self.blocks = [SpatialBlock(a, b, convs_per_block, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.proj = dc.Linear(widths[-1], SPATIAL_DIM, rng)

    def __call__(self, raster) -> Tensor:
        x = dc.as_tensor(np.asarray(raster, dtype=np.float64) if not isinstance(raster, Tensor) else raster)
        if x.ndim != 4 or x.shape[3] != 3:
            raise ShapeError(f"spatial: expected (batch, H, W, 3) raster, got {x.shape}")
        factor = 2 ** len(self.blocks)
        if x.shape[1] % factor or x.shape[2] % factor:
            raise ShapeError(f"spatial: extent {x.shape[1]}x{x.shape[2]} not divisible by {factor}")
        for block in self.blocks:
            x = block(x)
        return self.proj(dc.mean(x, axis=(1, 2)))


class TimeModule(dc.Module):
    def __init__(self, rng: np.random.Generator, hidden: int = 32):
        self.mlp = dc.MLP([1, hidden, hidden, TIME_DIM], rng)

    def __call__(self, t1) -> Tensor:
        t = np.asarray(t1, dtype=np.float64).reshape(-1, 1) / TIME_SCALE
        return self.mlp(Tensor(t))


class ForecastHypernet(dc.Module):
    """Condition (raster, histories, t1) -> HyperWeights for the forecasting VAE."""

    def __init__(self, arch: hv.VaeArch, rng: np.random.Generator, dims: ForecastDims = ForecastDims()):
        self.arch = arch
        self.social = SocialModule(rng, dims.other_hidden)
        self.spatial = SpatialModule(rng, dims.channels, dims.convs_per_block)
        self.time = TimeModule(rng, dims.time_hidden)
        self.head_enc = dc.MLP([CONDITION_DIM, dims.head_hidden, dims.head_hidden], rng)
        self.head_dec = dc.MLP([CONDITION_DIM, dims.head_hidden, dims.head_hidden], rng)
        self.out_enc = hv.HyperOutput(dims.head_hidden, arch.enc_layout.init_vector(rng), rng, dims.gain)
        self.out_dec = hv.HyperOutput(dims.head_hidden, arch.dec_layout.init_vector(rng), rng, dims.gain)

    def scene_features(self, history, mask, raster) -> Tensor:
        """h_social (64) and h_omega (96) per scene: (B, 160)."""
        return dc.concat([self.social(history, mask), self.spatial(raster)], axis=1)

    def heads(self, scene_feats: Tensor, scene_index: np.ndarray, t1) -> hv.HyperWeights:
        """Weights for each (scene_index[i], t1[i]) query."""
        feats = dc.take_rows(scene_feats, np.asarray(scene_index))
        cond = dc.concat([feats, self.time(t1)], axis=1)
        theta_enc = self.out_enc(dc.relu(self.head_enc(cond)))
        theta_dec = self.out_dec(dc.relu(self.head_dec(cond)))
        return hv.HyperWeights(theta_enc, theta_dec)

    def __call__(self, history, mask, raster, t1) -> hv.HyperWeights:
        b = np.asarray(history).shape[0]
        t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), (b,))
        return self.heads(self.scene_features(history, mask, raster), np.arange(b), t1)


@dataclass
class ForecastBatch:
    history: np.ndarray  # (B, 5, 10, 2)
    mask: np.ndarray  # (B, 5)
    raster: np.ndarray  # (B, 64, 64, 3) float
    future: np.ndarray  # (B, 20, 2) metres

    @classmethod
    def from_instances(cls, items) -> "ForecastBatch":
        return cls(np.stack([i.history for i in items]), np.stack([i.mask for i in items]),
                   np.stack([i.raster for i in items]).astype(np.float64), np.stack([i.future for i in items]))

    def __len__(self) -> int:
        return self.history.shape[0]


class ForecastModel(dc.Module):
    def __init__(self, arch: hv.VaeArch, rng: np.random.Generator, dims: ForecastDims = ForecastDims()):
        self.arch = arch
        self.net = ForecastHypernet(arch, rng, dims)

    def loss(self, batch: ForecastBatch, t_index: np.ndarray, rng=None, eps=None, n_z: int = 1,
             kl_weight: float = 1.0) -> hv.ElboReport:
        """-ELBO over queries (scene b, horizon index t_index[b, q]) for every b and q."""
        t_index = np.asarray(t_index)
        b, q = t_index.shape
        feats = self.net.scene_features(batch.history, batch.mask, batch.raster)
        scene_index = np.repeat(np.arange(b), q)
        flat_t = t_index.reshape(-1)
        theta = self.net.heads(feats, scene_index, HORIZON[flat_t])
        x = batch.future[scene_index, flat_t] / POS_SCALE
        return hv.elbo(x, theta, self.arch, rng=rng, eps=eps, n_z=n_z, kl_weight=kl_weight)

    def sample(self, batch: ForecastBatch, k: int, rng: np.random.Generator) -> np.ndarray:
        """(B, k, 20, 2) trajectories in metres, target-centric.

        Sample j of a scene reuses one latent draw, one component-selection
        uniform and one Gaussian draw across all horizon steps, so each
        trajectory is one coherent outcome rather than independent points.
        """
        b = len(batch)
        n_t = len(HORIZON)
        feats = self.net.scene_features(batch.history, batch.mask, batch.raster)
        scene_index = np.repeat(np.arange(b), n_t)
        theta = self.net.heads(feats, scene_index, np.tile(HORIZON, b))
        z = rng.standard_normal((b, 1, k, self.arch.z_dim))
        u = rng.random((b, 1, k))
        e = rng.standard_normal((b, 1, k, self.arch.x_dim))
        z_all = np.broadcast_to(z, (b, n_t, k, self.arch.z_dim)).reshape(b * n_t, k, self.arch.z_dim)
        mix = hv.decode(Tensor(z_all), Tensor(theta.dec.data), self.arch)
        u_all = np.broadcast_to(u, (b, n_t, k)).reshape(b * n_t, k)
        e_all = np.broadcast_to(e, (b, n_t, k, self.arch.x_dim)).reshape(b * n_t, k, self.arch.x_dim)
        pts = mix.sample(rng, uniforms=u_all, eps=e_all).reshape(b, n_t, k, self.arch.x_dim)
        return np.transpose(pts, (0, 2, 1, 3)) * POS_SCALE
