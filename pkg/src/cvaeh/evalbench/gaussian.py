"""Training and evaluation pipelines for the two toy Gaussian experiments."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from .. import hypernet_gauss as hg
from .. import hypervae as hv
from .. import prob
from ..config import RunConfig, substream, write_manifest
from . import metrics

REFERENCE_G1_NLL = {0.0: 3.895, 1.0: 3.978, 2.0: 4.292}
G1_MODES = {0.0: 4, 1.0: 25, 2.0: 100}
G1_NAMES = {0.0: "2x2", 1.0: "5x5", 2.0: "10x10"}
REFERENCE_G2 = {"entropy": 1.452, "cross_entropy": 1.480, "kl_seen": 0.028, "kl_unseen": 0.804}


def vae_arch(cfg: RunConfig) -> hv.VaeArch:
    a = cfg.arch
    return hv.VaeArch(a.x_dim, a.z_dim, tuple(a.enc_hidden), tuple(a.dec_hidden), a.n_components)


def grid_spec(cfg: RunConfig) -> prob.GridSpec:
    g = cfg.eval.grid
    return prob.GridSpec(g.x_min, g.y_min, g.x_max, g.y_max, g.nx, g.ny)


def targets_for(cfg: RunConfig) -> tuple[dict, list]:
    if cfg.experiment == "gaussian1":
        return hg.gaussian1_targets(cfg.data.g1_sigmas), list(hg.G1_CONDITIONS)
    conds = list(hg.G2_TRAIN) + list(hg.G2_UNSEEN)
    return {c: hg.gaussian2_target(c, cfg.data.g2_sigma) for c in conds}, list(hg.G2_TRAIN)


def build_model(cfg: RunConfig) -> hg.GaussModel:
    return hg.GaussModel(cfg.experiment, vae_arch(cfg), substream(cfg.seed, "init"),
                         hidden=cfg.arch.hyper_hidden, gain=cfg.arch.gain, mean_spread=cfg.arch.mean_spread,
                         init_std=cfg.arch.init_std)


def optim_config(cfg: RunConfig) -> hv.OptimConfig:
    o = cfg.optim
    return hv.OptimConfig(lr=o.lr, decay=o.decay, patience=o.patience, batch_size=o.batch_size,
                          max_iters=o.max_iters, min_lr=o.min_lr, val_every=o.val_every, n_z=o.n_z)


def train_gauss(cfg: RunConfig, out_dir: Path, log=None) -> tuple[hg.GaussModel, hv.TrainResult]:
    """Train one model over all training conditions; writes model.ckpt and train_log.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    targets, train_conds = targets_for(cfg)
    sampler = hg.GaussSampler(targets, train_conds)
    data_rng = substream(cfg.seed, "data")
    vx, vc = sampler.batch(data_rng, cfg.data.n_val)
    veps = data_rng.standard_normal((1, cfg.data.n_val, 1, model.arch.z_dim))
    n_z = cfg.optim.n_z

    def loss_fn(rng, batch_size):
        x, c = sampler.batch(rng, batch_size)
        return model.loss(x, c, rng=rng, n_z=n_z)

    def val_fn():
        return model.loss(vx, vc, eps=veps).loss.item()

    write_manifest(out_dir, cfg, "train")
    result = hv.train(model, loss_fn, val_fn, optim_config(cfg), substream(cfg.seed, "train"),
                      checkpoint_path=out_dir / "model.ckpt", log_path=out_dir / "train_log.csv", on_log=log)
    return model, result


def load_model(cfg: RunConfig, checkpoint: Path) -> hg.GaussModel:
    model = build_model(cfg)
    model.load_state_dict(dc.checkpoint.load(checkpoint))
    model.eval()
    return model


def trained_model(cfg: RunConfig, out_dir: Path, log=None) -> hg.GaussModel:
    """Reuse out_dir/model.ckpt when its training manifest matches this config, else train."""
    out_dir = Path(out_dir)
    ckpt, man = out_dir / "model.ckpt", out_dir / "manifest-train.json"
    if ckpt.exists() and man.exists() and json.loads(man.read_text()).get("config_hash") == cfg.digest():
        return load_model(cfg, ckpt)
    model, _ = train_gauss(cfg, out_dir, log)
    return model.eval()


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _cond_label(c) -> str:
    c = np.atleast_1d(c)
    return "_".join(f"{v:g}" for v in c)


def export_grid(grid: prob.DensityGrid, stem: Path) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    prob.write_grid_pgm(grid, stem.with_suffix(".pgm"))
    prob.write_grid_csv(grid, stem.with_suffix(".csv"))


def eval_gaussian1(cfg: RunConfig, model: hg.GaussModel, out_dir: Path) -> list[dict]:
    """Per condition: generated-sample grid, mode count, and NLL of fresh target draws.

    The NLL scores each target draw under p(x | z, C) with one z ~ N(0, I).
    """
    out_dir = Path(out_dir)
    targets, conds = targets_for(cfg)
    spec = grid_spec(cfg)
    rows = []
    for c in conds:
        rng = substream(cfg.seed, f"eval/g1/{c:g}")
        samples = model.sample([c], cfg.eval.n_samples, rng)
        grid = prob.histogram_density(samples, spec)
        export_grid(grid, out_dir / "grids" / f"gaussian1_c{_cond_label(c)}")
        x = prob.gmm_sample(targets[c], rng, cfg.eval.n_samples)
        nll = prob.nll_metric(model.log_prob_prior_z(x, [c], rng))
        rows.append({
            "condition": c,
            "grid": G1_NAMES[c],
            "nll": nll,
            "reference_nll": REFERENCE_G1_NLL[c],
            "true_nll": prob.nll_metric(prob.gmm_log_prob(targets[c], x)),
            "modes": metrics.count_modes(grid, cfg.eval.smooth_cells, cfg.eval.peak_h),
            "expected_modes": G1_MODES[c],
            "outside": grid.outside,
        })
    _write_rows(out_dir / "report_gaussian1.csv", rows)
    return rows


def eval_gaussian2(cfg: RunConfig, model: hg.GaussModel, out_dir: Path) -> list[dict]:
    """KL and cross-entropy on grids for seen and unseen conditions.

    The target grid holds exact cell masses of N(C, sigma^2 I); the model grid
    is a histogram of generated samples. Cross-entropy is
    -sum p log(q / cell_area), which equals the grid entropy of p plus KL.
    """
    out_dir = Path(out_dir)
    targets, _ = targets_for(cfg)
    spec = grid_spec(cfg)
    entropy = prob.isotropic_gaussian_entropy(cfg.data.g2_sigma, 2)
    rows = []
    for split, conds in (("seen", hg.G2_TRAIN), ("unseen", hg.G2_UNSEEN)):
        for c in conds:
            rng = substream(cfg.seed, f"eval/g2/{_cond_label(c)}")
            samples = model.sample(c, cfg.eval.kl_samples, rng)
            grid = prob.histogram_density(samples, spec)
            export_grid(grid, out_dir / "grids" / f"gaussian2_{split}_{_cond_label(c)}")
            target = prob.gmm_cell_masses(targets[c], spec)
            rows.append({
                "split": split,
                "cx": float(c[0]),
                "cy": float(c[1]),
                "kl": prob.kl_metric(target, grid),
                "cross_entropy": prob.grid_cross_entropy(target, grid),
                "entropy": entropy,
                "modes": metrics.count_modes(grid, cfg.eval.smooth_cells, cfg.eval.peak_h),
                "center_offset": float(np.linalg.norm(samples.mean(axis=0) - np.asarray(c))),
                "outside": grid.outside,
            })
    _write_rows(out_dir / "report_gaussian2.csv", rows)
    summary = summarize_gaussian2(rows)
    _write_rows(out_dir / "summary_gaussian2.csv", [{"metric": k, "value": v} for k, v in summary.items()])
    return rows


def summarize_gaussian2(rows: list[dict]) -> dict:
    seen = [r for r in rows if r["split"] == "seen"]
    unseen = [r for r in rows if r["split"] == "unseen"]
    return {
        "entropy": seen[0]["entropy"],
        "cross_entropy_seen": float(np.mean([r["cross_entropy"] for r in seen])),
        "kl_seen": float(np.mean([r["kl"] for r in seen])),
        "kl_unseen": float(np.mean([r["kl"] for r in unseen])),
        "max_offset_unseen": float(max(r["center_offset"] for r in unseen)),
        "unimodal_unseen": float(all(r["modes"] == 1 for r in unseen)),
    }


def run_gaussian1(cfg: RunConfig, out_dir: Path, log=None) -> list[dict]:
    model = trained_model(cfg, out_dir, log)
    write_manifest(Path(out_dir), cfg, "eval")
    return eval_gaussian1(cfg, model, out_dir)


def run_gaussian2(cfg: RunConfig, out_dir: Path, log=None) -> list[dict]:
    model = trained_model(cfg, out_dir, log)
    write_manifest(Path(out_dir), cfg, "eval")
    return eval_gaussian2(cfg, model, out_dir)


def true_entropy_mc(p: prob.GmmParams, rng: np.random.Generator, n: int = 100_000) -> float:
    """Monte-Carlo entropy of a mixture: mean negative log density of its own samples."""
    return prob.nll_metric(prob.gmm_log_prob(p, prob.gmm_sample(p, rng, n)))


__all__ = [
    "REFERENCE_G1_NLL", "REFERENCE_G2", "build_model", "eval_gaussian1", "eval_gaussian2", "export_grid",
    "load_model", "run_gaussian1", "run_gaussian2", "summarize_gaussian2", "train_gauss",
    "trained_model", "true_entropy_mc", "vae_arch",
]
