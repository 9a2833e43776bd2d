"""Command-line entry point: ``camodepth <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 attack divergence,
5 victim non-convergence. ``CAMODEPTH_THREADS`` sets the torch thread count.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from camodepth import pipeline
from camodepth.attack import AttackDivergedError
from camodepth.config import ConfigError, PipelineConfig, dump_config, load_config
from camodepth.scenegen import SceneSetError, dataset_checksum
from camodepth.texconv import load_seed
from camodepth.victim import NonConvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_NONCONVERGED = 0, 2, 3, 4, 5

log = logging.getLogger("camodepth")


class DataError(Exception):
    pass


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.attack.epochs = args.epochs
    if getattr(args, "lr", None) is not None:
        cfg.attack.adam.lr = args.lr
    cfg.validate()
    return cfg


def _scenes(path):
    try:
        return pipeline.load_scenes(path)
    except SceneSetError as exc:
        raise DataError(str(exc)) from exc


def _model(path):
    try:
        return pipeline.load_model(path)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc


def _seed_texture(path):
    try:
        return load_seed(path)
    except (FileNotFoundError, OSError, ValueError) as exc:
        raise DataError(f"cannot load seed {path}: {exc}") from exc


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _weights(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_gen_scenes(args) -> int:
    cfg = _config(args)
    if args.count is not None:
        cfg.data.train_count = cfg.data.attack_count = cfg.data.eval_count = args.count
    if args.size is not None:
        cfg.scenes.height, cfg.scenes.width = args.size
    if args.weather_weights is not None:
        cfg.scenes.weather_weights = args.weather_weights
    cfg.validate()
    sets = pipeline.gen_scenes(cfg, args.out, splits=tuple(args.splits))
    for split, scenes in sets.items():
        print(f"{split}: {len(scenes)} scenes -> {Path(args.out) / split}")
    return EXIT_OK


def cmd_train_victim(args) -> int:
    cfg = _config(args)
    if args.train_epochs is not None:
        cfg.train.epochs = args.train_epochs
    scenes = _scenes(args.scenes)
    result = pipeline.train_stage(cfg, scenes, args.out, {"train_scenes": dataset_checksum(args.scenes)})
    print(f"validation log-depth error {result.val_error:.4f} (target {cfg.train.target})")
    if not result.converged and not args.allow_nonconverged:
        print(f"victim did not converge; checkpoint kept at {Path(args.out) / 'model.ckpt'}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    scenes = _scenes(args.scenes)
    model = _model(args.model)
    inputs = {"attack_scenes": dataset_checksum(args.scenes), "model": pipeline.file_sha256(args.model)}
    run = pipeline.attack_stage(cfg, model, scenes, args.out, inputs)
    first, last = run.trace[0], run.trace[-1]
    print(f"{len(run.trace)} iterations; L_total {first['L_total']:.5g} -> {last['L_total']:.5g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    scenes = _scenes(args.scenes)
    model = _model(args.model)
    seed = _seed_texture(args.seed_texture) if args.seed_texture else None
    inputs = {"eval_scenes": dataset_checksum(args.scenes), "model": pipeline.file_sha256(args.model)}
    reports = pipeline.eval_stage(cfg, model, scenes, seed, args.out, inputs)
    print(Path(args.out, "summary.txt").read_text(), end="")
    return EXIT_OK if reports else EXIT_DATA


def cmd_ablate(args) -> int:
    cfg = _config(args)
    attack_scenes = _scenes(args.scenes)
    eval_scenes = _scenes(args.eval_scenes)
    model = _model(args.model)
    table = pipeline.run_ablation(cfg, model, attack_scenes, eval_scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "ablation.csv", out / "ablation.txt"]
    files[0].write_text(table.to_csv())
    files[1].write_text(table.to_text())
    inputs = {
        "attack_scenes": dataset_checksum(args.scenes),
        "eval_scenes": dataset_checksum(args.eval_scenes),
        "model": pipeline.file_sha256(args.model),
    }
    pipeline.RunManifest("ablate", pipeline.resolved(cfg).to_dict(), cfg.seed, inputs).write(out, files)
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    if not Path(args.eval_dir, "summary.csv").is_file():
        raise DataError(f"no summary.csv in {args.eval_dir}")
    files = pipeline.make_report(args.eval_dir, args.out, args.ablation, args.trace)
    cfg = pipeline.RunManifest.read(args.eval_dir).config if Path(args.eval_dir, pipeline.MANIFEST_NAME).is_file() else {}
    pipeline.RunManifest("report", cfg, cfg.get("seed", 0)).write(args.out, files)
    for f in files:
        print(f)
    return EXIT_OK


def cmd_end_to_end(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        print(dump_config(pipeline.resolved(cfg)), end="")
        return EXIT_OK
    result = pipeline.end_to_end(cfg, args.out, allow_nonconverged=args.allow_nonconverged)
    print(f"victim validation error {result['train'].val_error:.4f}")
    print(Path(args.out, "eval", "summary.txt").read_text(), end="")
    return EXIT_OK


def cmd_show_config(args) -> int:
    print(dump_config(_config(args)), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camodepth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="TOML config file (defaults apply to missing keys)")
        sp.add_argument("--seed", type=int, help="master RNG seed")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-scenes", cmd_gen_scenes, "generate train/attack/eval scene sets")
    sp.add_argument("--out", required=True)
    sp.add_argument("--splits", nargs="+", default=list(pipeline.SPLITS), choices=pipeline.SPLITS)
    sp.add_argument("--count", type=int, help="scenes per split (overrides the config)")
    sp.add_argument("--size", type=_size, help="image size HxW")
    sp.add_argument("--weather-weights", type=_weights, help="cloudy,sunny,rainy,foggy sampling weights")

    sp = add("train-victim", cmd_train_victim, "train the toy depth network")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", "--train-epochs", dest="train_epochs", type=int, help="victim training epochs")
    sp.add_argument("--allow-nonconverged", action="store_true")

    sp = add("attack", cmd_attack, "optimize a texture seed")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("eval", cmd_eval, "paired evaluation of a seed and the baselines")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--seed-texture", help="seed PNG (float .npy sidecar preferred when present)")
    sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate, "module and loss ablation table")
    sp.add_argument("--scenes", required=True, help="attack scene set")
    sp.add_argument("--eval-scenes", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("report", cmd_report, "plots and a markdown summary from an eval directory")
    sp.add_argument("--eval-dir", required=True)
    sp.add_argument("--ablation", help="ablation.csv to include")
    sp.add_argument("--trace", help="attack trace.csv to plot")
    sp.add_argument("--out", required=True)

    sp = add("end-to-end", cmd_end_to_end, "all stages with one manifest")
    sp.add_argument("--out", default="camodepth_run")
    sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    sp.add_argument("--allow-nonconverged", action="store_true")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)

    add("show-config", cmd_show_config, "print the effective config as TOML")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("CAMODEPTH_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SceneSetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AttackDivergedError as exc:
        print(f"attack diverged at iteration {exc.iteration}", file=sys.stderr)
        return EXIT_DIVERGED
    except NonConvergenceError as exc:
        print(f"victim did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
