"""Hyper-conditioned VAE: encoder and decoder MLPs whose weights are inputs.

Neither network owns parameters. A hypernetwork maps a condition C to flat
vectors theta_enc and theta_dec; ``HyperLayout`` says which slice of each
vector is which weight matrix or bias.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import numpy as np

from . import diffcore as dc
from . import prob
from .diffcore import Tensor

log = logging.getLogger(__name__)

LOG_STD_MIN = math.log(1e-4)
LOG_STD_MAX = math.log(1e2)


class LayoutError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Slot:
    layer: int
    role: str  # "weight" or "bias"
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class HyperLayout:
    widths: tuple[int, ...]
    slots: tuple[Slot, ...]

    @classmethod
    def for_mlp(cls, widths) -> "HyperLayout":
        widths = tuple(int(w) for w in widths)
        slots = []
        offset = 0
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            slots.append(Slot(i, "weight", offset, (n_in, n_out)))
            offset += n_in * n_out
            slots.append(Slot(i, "bias", offset, (n_out,)))
            offset += n_out
        return cls(widths, tuple(slots))

    @property
    def size(self) -> int:
        last = self.slots[-1]
        return last.offset + last.size

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def init_vector(self, rng: np.random.Generator, last_scale: float = 0.1) -> np.ndarray:
        """He-uniform weights and zero biases, flattened in slot order.

        The output layer is shrunk by ``last_scale`` so heads start near zero
        (unit variances, uniform mixing weights).
        """
        vec = np.zeros(self.size)
        for s in self.slots:
            if s.role == "weight":
                bound = math.sqrt(6.0 / s.shape[0])
                if s.layer == self.n_layers - 1:
                    bound *= last_scale
                vec[s.offset:s.offset + s.size] = rng.uniform(-bound, bound, size=s.size)
        return vec


@dataclass(frozen=True)
class VaeArch:
    x_dim: int = 2
    z_dim: int = 2
    enc_hidden: tuple[int, ...] = (32, 32, 32)
    dec_hidden: tuple[int, ...] = (32, 32, 32)
    n_components: int = 10

    @property
    def enc_layout(self) -> HyperLayout:
        return HyperLayout.for_mlp((self.x_dim, *self.enc_hidden, 2 * self.z_dim))

    @property
    def dec_layout(self) -> HyperLayout:
        return HyperLayout.for_mlp((self.z_dim, *self.dec_hidden, self.n_components * (2 * self.x_dim + 1)))

    @property
    def n_weights(self) -> int:
        return self.enc_layout.size + self.dec_layout.size

    def dec_init_vector(self, rng: np.random.Generator, mean_spread: float = 0.0,
                        init_std: float = 1.0) -> np.ndarray:
        """Decoder init. The output biases can place the component means
        uniformly in [-mean_spread, mean_spread]^d and start every component
        at standard deviation ``init_std`` (defaults: all at 0 with std 1)."""
        layout = self.dec_layout
        vec = layout.init_vector(rng)
        bias = next(s for s in layout.slots if s.layer == layout.n_layers - 1 and s.role == "bias")
        per = vec[bias.offset:bias.offset + bias.size].reshape(self.n_components, 2 * self.x_dim + 1)
        if mean_spread > 0:
            per[:, :self.x_dim] = rng.uniform(-mean_spread, mean_spread, size=(self.n_components, self.x_dim))
        per[:, self.x_dim:2 * self.x_dim] = 2.0 * math.log(init_std)  # log-variance slots
        return vec


@dataclass
class HyperWeights:
    """Per-row flat weight vectors: theta_enc (B, P_enc), theta_dec (B, P_dec)."""

    enc: Tensor | None
    dec: Tensor

    def rows(self, index: np.ndarray) -> "HyperWeights":
        return HyperWeights(None if self.enc is None else dc.take_rows(self.enc, index),
                            dc.take_rows(self.dec, index))


class HyperOutput(dc.Module):
    """Final hypernetwork layer emitting flat VAE weights: ``bias + gain * (h @ W)``.

    The bias starts at ``init`` (a usable VAE weight vector). The fixed gain
    keeps Adam's per-coordinate steps on W, which add up across the n_in
    hidden units, from turning into large jumps in the emitted weights.
    """

    def __init__(self, n_in: int, init: np.ndarray, rng: np.random.Generator, gain: float = 0.02):
        self.gain = gain
        self.weight = dc.parameter(rng.uniform(-1.0, 1.0, size=(n_in, init.size)) / math.sqrt(n_in))
        self.bias = dc.parameter(np.array(init, dtype=np.float64))

    def __call__(self, h: Tensor) -> Tensor:
        return self.bias + self.gain * (h @ self.weight)


def check_weights(theta: Tensor, layout: HyperLayout, what: str) -> None:
    if theta.ndim != 2 or theta.shape[1] != layout.size:
        raise LayoutError(f"{what}: expected (batch, {layout.size}) weights, got {theta.shape}")


def hyper_mlp(x: Tensor, theta: Tensor, layout: HyperLayout) -> Tensor:
    """Run an MLP whose row-b weights come from ``theta[b]``.

    x is (B, S, n_in): S points share the weights of their row. ReLU between
    layers, linear output.
    """
    batch = theta.shape[0]
    if x.shape[0] != batch or x.shape[-1] != layout.widths[0]:
        raise LayoutError(f"input {x.shape} does not fit layout input width {layout.widths[0]} "
                          f"with {batch} weight rows")
    h = x
    for i in range(layout.n_layers):
        w_slot, b_slot = layout.slots[2 * i], layout.slots[2 * i + 1]
        w = theta[:, w_slot.offset:w_slot.offset + w_slot.size].reshape(batch, *w_slot.shape)
        b = theta[:, b_slot.offset:b_slot.offset + b_slot.size].reshape(batch, 1, b_slot.size)
        h = h @ w + b
        if i < layout.n_layers - 1:
            h = dc.relu(h)
    return h


def _as_points(x) -> Tensor:
    x = dc.as_tensor(x)
    return x.reshape(x.shape[0], 1, x.shape[1]) if x.ndim == 2 else x


# -- posterior / mixture containers ---------------------------------------------

@dataclass
class Posterior:
    mean: Tensor
    log_var: Tensor
    std: Tensor

    def to_prob(self, row: int = 0, point: int = 0) -> prob.DiagGaussian:
        return prob.DiagGaussian(self.mean.data[row, point], self.std.data[row, point])


@dataclass
class Mixture:
    """Decoder output over points: means/log_stds (B, S, M, d), log_weights (B, S, M)."""

    means: Tensor
    log_stds: Tensor
    log_weights: Tensor

    def log_prob(self, x) -> Tensor:
        x = _as_points(x)
        diff = dc.expand_dims(x, 2) - self.means
        z = diff * dc.exp(-self.log_stds)
        d = self.means.shape[-1]
        comp = (-0.5 * dc.tsum(dc.square(z), axis=-1) - dc.tsum(self.log_stds, axis=-1)
                - 0.5 * d * prob.LOG_2PI)
        return dc.logsumexp(comp + self.log_weights, axis=-1)

    def params(self, row: int = 0, point: int = 0) -> prob.GmmParams:
        w = np.exp(self.log_weights.data[row, point])
        return prob.GmmParams(self.means.data[row, point], np.exp(self.log_stds.data[row, point]), w / w.sum())

    def sample(self, rng: np.random.Generator, uniforms=None, eps=None) -> np.ndarray:
        """One draw per (row, point). Optional noise arrays make draws reproducible across calls."""
        w = np.exp(self.log_weights.data)
        shape = w.shape[:-1]
        u = rng.random(shape) if uniforms is None else np.broadcast_to(uniforms, shape)
        cdf = np.cumsum(w, axis=-1)
        cdf /= cdf[..., -1:]
        comp = np.minimum((cdf < u[..., None]).sum(axis=-1), w.shape[-1] - 1)
        d = self.means.shape[-1]
        e = rng.standard_normal((*shape, d)) if eps is None else np.broadcast_to(eps, (*shape, d))
        mu = np.take_along_axis(self.means.data, comp[..., None, None], axis=-2)[..., 0, :]
        sd = np.exp(np.take_along_axis(self.log_stds.data, comp[..., None, None], axis=-2)[..., 0, :])
        return mu + sd * e


# -- encoder / decoder ----------------------------------------------------------

def encode(x, theta_enc: Tensor, arch: VaeArch) -> Posterior:
    layout = arch.enc_layout
    check_weights(theta_enc, layout, "encode")
    out = hyper_mlp(_as_points(x), theta_enc, layout)
    mean = out[..., :arch.z_dim]
    log_var = out[..., arch.z_dim:]
    log_std = dc.clip(0.5 * log_var, LOG_STD_MIN, LOG_STD_MAX)
    return Posterior(mean, log_var, dc.exp(log_std))


def reparameterize(q: Posterior, rng: np.random.Generator | None = None, eps=None) -> Tensor:
    """z = mean + std * eps with eps ~ N(0, I) unless given."""
    if eps is None:
        eps = rng.standard_normal(q.mean.shape)
    return q.mean + q.std * Tensor(eps)


def decode(z, theta_dec: Tensor, arch: VaeArch) -> Mixture:
    layout = arch.dec_layout
    check_weights(theta_dec, layout, "decode")
    z = _as_points(z)
    if z.shape[-1] != arch.z_dim:
        raise LayoutError(f"decode: latent dim {z.shape[-1]} != {arch.z_dim}")
    out = hyper_mlp(z, theta_dec, layout)
    b, s = out.shape[:2]
    m, d = arch.n_components, arch.x_dim
    per = out.reshape(b, s, m, 2 * d + 1)
    means = per[..., :d]
    log_stds = dc.clip(0.5 * per[..., d:2 * d], LOG_STD_MIN, LOG_STD_MAX)
    log_weights = dc.log_softmax(per[..., 2 * d], axis=-1)
    return Mixture(means, log_stds, log_weights)


def kl_to_standard(q: Posterior) -> Tensor:
    """Closed-form KL(q || N(0, I)) per point, shape (B, S)."""
    var = dc.square(q.std)
    return 0.5 * dc.tsum(dc.square(q.mean) + var - 1.0 - 2.0 * dc.log(q.std), axis=-1)


@dataclass
class ElboReport:
    reconstruction: float
    kl: float
    elbo: float
    loss: Tensor = field(repr=False)
    per_example: np.ndarray | None = field(default=None, repr=False)


def elbo(x, theta: HyperWeights, arch: VaeArch, rng: np.random.Generator | None = None,
         eps=None, n_z: int = 1, kl_weight: float = 1.0) -> ElboReport:
    """Batch-mean conditional ELBO with an ``n_z``-sample reconstruction estimate.

    ``loss`` is the differentiable -(recon - kl_weight * kl).
    """
    x = _as_points(x)
    q = encode(x, theta.enc, arch)
    b, s = q.mean.shape[:2]
    recon_terms = []
    for k in range(n_z):
        e = eps[k] if eps is not None else rng.standard_normal(q.mean.shape)
        z = reparameterize(q, eps=e)
        recon_terms.append(decode(z, theta.dec, arch).log_prob(x))
    recon = recon_terms[0] if n_z == 1 else dc.mean(dc.stack(recon_terms, axis=0), axis=0)
    kl = kl_to_standard(q)
    recon_mean = dc.mean(recon)
    kl_mean = dc.mean(kl)
    r, k_val = recon_mean.item(), kl_mean.item()
    if math.isnan(r):
        raise DivergenceError("elbo: reconstruction term is NaN")
    if math.isnan(k_val):
        raise DivergenceError("elbo: KL term is NaN")
    loss = kl_weight * kl_mean - recon_mean
    return ElboReport(r, k_val, r - k_val, loss, per_example=(recon.data - kl.data).reshape(b * s))


def generate(theta_dec: Tensor, arch: VaeArch, rng: np.random.Generator, n: int,
             chunk: int = 20_000) -> np.ndarray:
    """n prior samples per weight row: z ~ N(0, I), decode, draw from the mixture.

    Returns (B, n, x_dim). The encoder is not involved.
    """
    b = theta_dec.shape[0]
    if n == 0:
        return np.zeros((b, 0, arch.x_dim))
    theta = Tensor(theta_dec.data)
    out = []
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        z = Tensor(rng.standard_normal((b, m, arch.z_dim)))
        out.append(decode(z, theta, arch).sample(rng))
    return np.concatenate(out, axis=1)


def log_likelihood_given_prior_z(x, theta_dec: Tensor, arch: VaeArch, rng: np.random.Generator,
                                 n_z: int = 1) -> np.ndarray:
    """log p(x | z, C) with z ~ N(0, I); ``n_z`` > 1 averages densities over z draws."""
    x = _as_points(x)
    b, s = x.shape[:2]
    theta = Tensor(theta_dec.data)
    lps = []
    for _ in range(n_z):
        z = Tensor(rng.standard_normal((b, s, arch.z_dim)))
        lps.append(decode(z, theta, arch).log_prob(x).data)
    stacked = np.stack(lps)
    if n_z == 1:
        return stacked[0]
    m = stacked.max(axis=0)
    return m + np.log(np.mean(np.exp(stacked - m), axis=0))


def importance_log_likelihood(x, theta: HyperWeights, arch: VaeArch, rng: np.random.Generator,
                              n_z: int = 1000) -> np.ndarray:
    """log p(x | C) estimated with the posterior as proposal; shape (B, S)."""
    x = _as_points(x)
    q = encode(x, Tensor(theta.enc.data), arch)
    theta_dec = Tensor(theta.dec.data)
    vals = []
    for _ in range(n_z):
        e = rng.standard_normal(q.mean.shape)
        z = q.mean.data + q.std.data * e
        lp_x = decode(Tensor(z), theta_dec, arch).log_prob(x).data
        lp_z = -0.5 * np.sum(z * z, axis=-1) - 0.5 * arch.z_dim * prob.LOG_2PI
        lq = (-0.5 * np.sum(e * e, axis=-1) - np.sum(np.log(q.std.data), axis=-1)
              - 0.5 * arch.z_dim * prob.LOG_2PI)
        vals.append(lp_x + lp_z - lq)
    v = np.stack(vals)
    m = v.max(axis=0)
    return m + np.log(np.mean(np.exp(v - m), axis=0))


# -- training -----------------------------------------------------------------------

class Trainable(Protocol):
    """What ``train`` needs from a model/dataset pairing."""

    def parameters(self) -> list[Tensor]: ...

    def state_dict(self) -> dict[str, np.ndarray]: ...

    def train(self, mode: bool = True) -> Any: ...


@dataclass
class OptimConfig:
    lr: float = 5e-3
    decay: float = 0.5
    patience: int = 2000
    batch_size: int = 128
    max_iters: int = 30_000
    min_lr: float = 1e-5
    val_every: int = 100
    n_z: int = 1
    kl_weight: float = 1.0


@dataclass
class TrainResult:
    iterations: int
    best_val: float
    final_lr: float
    log_rows: list[tuple] = field(default_factory=list)
    stopped: str = "max_iters"


LOG_HEADER = ("iteration", "train_neg_elbo", "val_neg_elbo", "lr")


def train(model: Trainable,
          loss_fn: Callable[[np.random.Generator, int], ElboReport],
          val_fn: Callable[[], float],
          cfg: OptimConfig,
          rng: np.random.Generator,
          checkpoint_path: str | Path | None = None,
          log_path: str | Path | None = None,
          on_log: Callable[[tuple], None] | None = None) -> TrainResult:
    """Minimise -ELBO with Adam over the hypernetwork's parameters.

    ``loss_fn(rng, batch_size)`` draws a minibatch and returns its ElboReport;
    ``val_fn()`` returns a deterministic validation -ELBO. Validation runs
    every ``val_every`` iterations, drives the plateau schedule and writes a
    checkpoint on improvement. Stops at ``max_iters`` or once the learning
    rate falls below ``min_lr``. A NaN loss restores the last good checkpoint
    state and raises ``DivergenceError``.
    """
    params = model.parameters()
    state = dc.AdamState(lr=cfg.lr)
    sched = dc.PlateauSchedule(factor=cfg.decay, patience=cfg.patience)
    rows: list[tuple] = []
    best_state = model.state_dict()
    window: list[float] = []
    result = TrainResult(0, math.inf, cfg.lr)
    log_fh = None
    writer = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    started = time.monotonic()
    try:
        for it in range(1, cfg.max_iters + 1):
            model.train(True)
            try:
                report = loss_fn(rng, cfg.batch_size)
            except DivergenceError:
                _restore(model, best_state)
                raise
            loss_val = report.loss.item()
            if not math.isfinite(loss_val):
                _restore(model, best_state)
                raise DivergenceError(f"non-finite loss {loss_val} at iteration {it}")
            report.loss.backward()
            dc.adam_step(params, state, allow_missing=True)
            window.append(loss_val)
            result.iterations = it
            if it % cfg.val_every == 0 or it == cfg.max_iters:
                model.train(False)
                val = val_fn()
                if not math.isfinite(val):
                    _restore(model, best_state)
                    raise DivergenceError(f"non-finite validation loss at iteration {it}")
                if val < sched.best - sched.threshold:
                    best_state = model.state_dict()
                    if checkpoint_path is not None:
                        dc.checkpoint.save(checkpoint_path, best_state)
                dc.plateau_update(sched, state, val, iterations=cfg.val_every)
                row = (it, repr(float(np.mean(window))), repr(float(val)), repr(state.lr))
                window = []
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    log_fh.flush()
                if on_log is not None:
                    on_log(row)
                log.info("iter %d  train %.4f  val %.4f  lr %.2e  (%.0fs)", it, float(row[1]), val,
                         state.lr, time.monotonic() - started)
                if state.lr < cfg.min_lr:
                    result.stopped = "min_lr"
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    _restore(model, best_state)
    if checkpoint_path is not None:
        dc.checkpoint.save(checkpoint_path, best_state)
    result.best_val = sched.best
    result.final_lr = state.lr
    result.log_rows = rows
    return result


def _restore(model, state: dict[str, np.ndarray]) -> None:
    model.load_state_dict(state)
