"""Forecasting pipeline: synthetic data, training, sampling and the minMSD benchmark."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from .. import hypernet_forecast as hf
from .. import hypervae as hv
from .. import scenes
from ..config import RunConfig, substream, write_manifest
from . import metrics
from .gaussian import optim_config, vae_arch

SAMPLE_SCHEMA = "cvaeh.samples/1"


@dataclass
class InstanceSet:
    """Target-centric instances held as stacked arrays."""

    history: np.ndarray
    mask: np.ndarray
    raster: np.ndarray  # uint8
    future: np.ndarray
    modes: list[str]
    tags: list[str]
    centers: np.ndarray
    poses: list[scenes.FramePose]
    episode_index: np.ndarray
    agent_index: np.ndarray

    @classmethod
    def build(cls, episodes, indices) -> "InstanceSet":
        items = [inst for i in indices for inst in scenes.make_instances(episodes[i], int(i))]
        return cls(
            np.stack([i.history for i in items]), np.stack([i.mask for i in items]),
            np.stack([i.raster for i in items]), np.stack([i.future for i in items]),
            [i.mode for i in items], [i.tag for i in items], np.stack([i.center for i in items]),
            [i.pose for i in items], np.array([i.episode_index for i in items]),
            np.array([i.agent_index for i in items]))

    def __len__(self) -> int:
        return len(self.modes)

    def batch(self, idx) -> hf.ForecastBatch:
        idx = np.asarray(idx)
        return hf.ForecastBatch(self.history[idx], self.mask[idx], self.raster[idx].astype(np.float64),
                                self.future[idx])


def scene_config(cfg: RunConfig) -> scenes.SceneConfig:
    return scenes.SceneConfig(tuple(cfg.data.four_way_probs), tuple(cfg.data.tag_probs))


def load_or_generate(cfg: RunConfig) -> list[scenes.Episode]:
    if cfg.data.path:
        return scenes.load_dataset(cfg.data.path)
    return [scenes.quantized(e) for e in scenes.generate_dataset(cfg.data.episodes, cfg.seed, scene_config(cfg))]


def splits(cfg: RunConfig, episodes) -> dict[str, np.ndarray]:
    train, val, test = scenes.split_indices(len(episodes), cfg.seed)
    return {"train": train, "val": val, "test": test}


def build_model(cfg: RunConfig) -> hf.ForecastModel:
    a = cfg.arch
    dims = hf.ForecastDims(a.other_hidden, tuple(a.channels), a.convs_per_block, a.time_hidden, a.head_hidden, a.gain)
    return hf.ForecastModel(vae_arch(cfg), substream(cfg.seed, "init"), dims)


def train_forecast(cfg: RunConfig, out_dir: Path, episodes=None, log=None, n_val: int = 64):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = load_or_generate(cfg) if episodes is None else episodes
    parts = splits(cfg, episodes)
    train_set = InstanceSet.build(episodes, parts["train"])
    val_set = InstanceSet.build(episodes, parts["val"])
    model = build_model(cfg)
    data_rng = substream(cfg.seed, "data/val")
    val_idx = np.sort(data_rng.choice(len(val_set), size=min(n_val, len(val_set)), replace=False))
    val_batch = val_set.batch(val_idx)
    val_t = np.tile(np.arange(len(hf.HORIZON)), (len(val_idx), 1))
    val_eps = data_rng.standard_normal((1, val_t.size, 1, model.arch.z_dim))
    q = cfg.data.queries_per_scene

    def loss_fn(rng, batch_size):
        idx = rng.choice(len(train_set), size=batch_size, replace=False)
        t_idx = np.stack([rng.choice(len(hf.HORIZON), size=q, replace=False) for _ in range(batch_size)])
        return model.loss(train_set.batch(idx), t_idx, rng=rng, n_z=cfg.optim.n_z)

    def val_fn():
        return model.loss(val_batch, val_t, eps=val_eps).loss.item()

    write_manifest(out_dir, cfg, "train")
    result = hv.train(model, loss_fn, val_fn, optim_config(cfg), substream(cfg.seed, "train"),
                      checkpoint_path=out_dir / "model.ckpt", log_path=out_dir / "train_log.csv", on_log=log)
    return model, result


def load_model(cfg: RunConfig, checkpoint: Path) -> hf.ForecastModel:
    model = build_model(cfg)
    model.load_state_dict(dc.checkpoint.load(checkpoint))
    return model.eval()


def trained_model(cfg: RunConfig, out_dir: Path, episodes=None, log=None) -> hf.ForecastModel:
    out_dir = Path(out_dir)
    ckpt, man = out_dir / "model.ckpt", out_dir / "manifest-train.json"
    if ckpt.exists() and man.exists() and json.loads(man.read_text()).get("config_hash") == cfg.digest():
        return load_model(cfg, ckpt)
    model, _ = train_forecast(cfg, out_dir, episodes, log)
    return model.eval()


def sample_set(model: hf.ForecastModel, data: InstanceSet, k: int, rng: np.random.Generator,
               chunk: int = 32) -> np.ndarray:
    """(N, k, 20, 2) sampled futures for every instance, target-centric metres."""
    model.eval()
    out = []
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        out.append(model.sample(data.batch(idx), k, rng))
    return np.concatenate(out)


def run_forecast_eval(cfg: RunConfig, model: hf.ForecastModel, out_dir: Path, episodes=None) -> dict:
    """Per-instance minMSD/minADE/minFDE, mode coverage, queue displacement; writes CSVs and sample dumps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = load_or_generate(cfg) if episodes is None else episodes
    test = InstanceSet.build(episodes, splits(cfg, episodes)["test"])
    ks = sorted(set(cfg.eval.ks))
    n_draw = max(max(ks), cfg.eval.coverage_samples)
    samples = sample_set(model, test, n_draw, substream(cfg.seed, "eval/forecast"))
    probs = tuple(cfg.data.four_way_probs)
    rows = []
    for i in range(len(test)):
        gt = test.future[i]
        row = {"episode": int(test.episode_index[i]), "agent": int(test.agent_index[i]), "tag": test.tags[i],
               "mode": test.modes[i]}
        for k, v in metrics.nested_minmsd(samples[i], gt, ks).items():
            row[f"minmsd_{k}"] = v
        kmax = max(ks)
        row[f"minade_{kmax}"] = metrics.min_ade(samples[i, :kmax], gt)
        row[f"minfde_{kmax}"] = metrics.min_fde(samples[i, :kmax], gt)
        if test.tags[i] in ("four-way", "three-way") and test.modes[i] in scenes.FOUR_WAY_MODES:
            modes = metrics.generator_modes(test.tags[i], probs)
            rep = metrics.mode_coverage(samples[i, :cfg.eval.coverage_samples], test.centers[i], modes)
            row["coverage"] = rep.coverage
        else:
            row["coverage"] = ""
        row["median_displacement"] = float(np.median(metrics.final_displacement(samples[i])))
        rows.append(row)
    _write_csv(out_dir / "report_forecast.csv", rows)
    summary = summarize_forecast(rows, test, samples, ks)
    _write_csv(out_dir / "summary_forecast.csv", [{"metric": k, "value": v} for k, v in summary.items()])
    dump_samples(out_dir / "samples.ndjson", test, samples[:, :max(ks)])
    return summary


def summarize_forecast(rows, test: InstanceSet, samples: np.ndarray, ks) -> dict:
    out = {}
    for k in ks:
        vals = [r[f"minmsd_{k}"] for r in rows]
        rep = metrics.aggregate_minmsd(k, vals, test.agent_index)
        out[f"minmsd_{k}_mean"] = rep.mean
        for j, v in enumerate(rep.per_agent):
            out[f"minmsd_{k}_agent{j}"] = float(v)
        four = [r[f"minmsd_{k}"] for r in rows if r["tag"] == "four-way"]
        out[f"minmsd_{k}_fourway"] = float(np.mean(four)) if four else float("nan")
    cov = [r["coverage"] for r in rows if r["tag"] == "four-way" and r["coverage"] != ""]
    out["coverage_fourway"] = float(np.mean(cov)) if cov else float("nan")
    disp = metrics.final_displacement(samples)
    for role in ("lead", "blocked"):
        sel = [i for i, m in enumerate(test.modes) if m == role and test.tags[i] == "queue"]
        out[f"queue_{role}_median_displacement"] = float(np.median(disp[sel])) if sel else float("nan")
    out["monotone_all"] = float(all(
        all(r[f"minmsd_{a}"] >= r[f"minmsd_{b}"] for a, b in zip(ks[:-1], ks[1:])) for r in rows))
    out["n_instances"] = float(len(rows))
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def dump_samples(path: Path, test: InstanceSet, samples: np.ndarray) -> None:
    """NDJSON of world-frame sampled futures, integers of 1e-4 m like the episode files."""
    with open(path, "w") as fh:
        for i in range(len(test)):
            world = scenes.frame_to_world(samples[i], test.poses[i])
            rec = {"schema": SAMPLE_SCHEMA, "episode": int(test.episode_index[i]), "agent": int(test.agent_index[i]),
                   "tag": test.tags[i], "samples": np.rint(world / scenes.QUANTUM).astype(np.int64).tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
