"""Command-line entry point: cvaeh {gen-data,train,eval,sample,export-grid}."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import diffcore as dc
from . import hypernet_gauss as hg
from . import prob, scenes
from .config import ConfigError, RunConfig, load_config, substream, write_manifest
from .evalbench import forecast as fc
from .evalbench import gaussian as gs


class UsageError(ValueError):
    pass


def _data_path(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "data", None):
        return cfg.model_copy(update={"data": cfg.data.model_copy(update={"path": str(args.data)})})
    return cfg


def _checkpoint(args, out: Path) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path} (run 'train' first or pass --checkpoint)")
    return path


def _parse_condition(text: str, cfg: RunConfig) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --condition {text!r}: expected comma-separated numbers") from None
    want = 1 if cfg.experiment == "gaussian1" else 2
    if len(vals) != want:
        raise UsageError(f"{cfg.experiment} conditions have {want} value(s), got {len(vals)}")
    return vals


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> None:
    if cfg.experiment == "forecast":
        episodes = fc.load_or_generate(cfg.model_copy(update={"data": cfg.data.model_copy(update={"path": None})}))
        scenes.save_dataset(episodes, out / "episodes.ndjson")
        parts = fc.splits(cfg, episodes)
        (out / "splits.json").write_text(json.dumps({k: v.tolist() for k, v in parts.items()}) + "\n")
        print(f"wrote {len(episodes)} episodes to {out / 'episodes.ndjson'}")
    else:
        targets, conds = gs.targets_for(cfg)
        rng = substream(cfg.seed, "data")
        with open(out / "samples.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", "x", "y"])
            for c in conds:
                key = c if isinstance(c, float) else tuple(c)
                for x, y in prob.gmm_sample(targets[key], rng, cfg.eval.n_samples):
                    w.writerow([gs._cond_label(c), repr(float(x)), repr(float(y))])
        print(f"wrote target samples to {out / 'samples.csv'}")
    write_manifest(out, cfg, "gen-data")


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    if cfg.experiment == "forecast":
        _, res = fc.train_forecast(cfg, out)
    else:
        _, res = gs.train_gauss(cfg, out)
    print(f"trained {res.iterations} iterations ({res.stopped}); best validation -ELBO {res.best_val:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    ckpt = _checkpoint(args, out)
    if args.k:
        cfg = cfg.model_copy(update={"eval": cfg.eval.model_copy(update={"ks": tuple(sorted(set(args.k)))})})
    write_manifest(out, cfg, "eval")
    if cfg.experiment == "gaussian1":
        rows = gs.eval_gaussian1(cfg, gs.load_model(cfg, ckpt), out)
        for r in rows:
            print(f"{r['grid']:>6}  NLL {r['nll']:.3f} (reference {r['reference_nll']})  modes {r['modes']}/{r['expected_modes']}")
    elif cfg.experiment == "gaussian2":
        rows = gs.eval_gaussian2(cfg, gs.load_model(cfg, ckpt), out)
        for k, v in gs.summarize_gaussian2(rows).items():
            print(f"{k:>20}  {v:.4f}")
    else:
        summary = fc.run_forecast_eval(cfg, fc.load_model(cfg, ckpt), out)
        for k, v in summary.items():
            print(f"{k:>36}  {v:.4f}")


def cmd_sample(cfg: RunConfig, out: Path, args) -> None:
    ckpt = _checkpoint(args, out)
    rng = substream(cfg.seed, "sample")
    if cfg.experiment == "forecast":
        episodes = fc.load_or_generate(cfg)
        test = fc.InstanceSet.build(episodes, fc.splits(cfg, episodes)["test"])
        samples = fc.sample_set(fc.load_model(cfg, ckpt), test, args.n, rng)
        fc.dump_samples(out / "samples.ndjson", test, samples)
        print(f"wrote {args.n} trajectories per test instance to {out / 'samples.ndjson'}")
        return
    if not args.condition:
        raise UsageError("--condition is required for gaussian experiments")
    cond = _parse_condition(args.condition, cfg)
    pts = gs.load_model(cfg, ckpt).sample(cond, args.n, rng)
    path = out / f"samples_{gs._cond_label(cond)}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in pts])
    print(f"wrote {args.n} samples to {path}")


def cmd_export_grid(cfg: RunConfig, out: Path, args) -> None:
    if cfg.experiment == "forecast":
        raise UsageError("export-grid applies to the gaussian experiments")
    if not args.condition:
        raise UsageError("--condition is required")
    ckpt = _checkpoint(args, out)
    cond = _parse_condition(args.condition, cfg)
    pts = gs.load_model(cfg, ckpt).sample(cond, args.n, substream(cfg.seed, "export"))
    grid = prob.histogram_density(pts, gs.grid_spec(cfg))
    stem = out / f"grid_{gs._cond_label(cond)}"
    gs.export_grid(grid, stem)
    print(f"wrote {stem}.pgm and {stem}.csv")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "export-grid": cmd_export_grid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvaeh", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="runs/out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "sample", "export-grid"):
            p.add_argument("--checkpoint", default=None, help="defaults to OUT/model.ckpt")
        if name in ("train", "eval", "sample"):
            p.add_argument("--data", default=None, help="episode file for forecast runs")
        if name == "eval":
            p.add_argument("--k", type=int, action="append", help="sample counts for minMSD (repeatable)")
        if name in ("sample", "export-grid"):
            p.add_argument("--condition", default=None, help="e.g. '1' or '0,4'")
            p.add_argument("--n", type=int, default=10_000 if name == "export-grid" else 1000)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = _data_path(load_config(args.config, args.seed), args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except (ConfigError, UsageError, FileNotFoundError, scenes.DatasetError, dc.checkpoint.CheckpointError,
            hg.ConditionError) as exc:
        print(f"cvaeh {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced, not swallowed: message plus nonzero exit
        print(f"cvaeh {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

