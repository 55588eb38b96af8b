"""Command-line entry point: ``structinbet <subcommand> ...``.

Exit codes: 0 success, 1 self-check failure, 2 usage or input error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, selfcheck
from .checkpoint import CheckpointError
from .config import Config, ConfigError, UNetConfig, load_config, save_config
from .data import DEFAULT_T, export_triplet, load_dataset, sample_triplet, triplet_seed, write_index
from .diffusion import DivergenceError, make_schedule, sample_inbetween
from .guidance import EncodingError, GuidanceFormatError, StructureError, guidance_maps, read_guidance
from .imageio import read_image, write_image
from .metrics import format_report, mse, psnr
from .tensor import ShapeError
from .training import Trainer
from .unet import InbetweenModel, UsageError, guidance_labels

log = logging.getLogger("structinbet")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _threads() -> int:
    raw = os.environ.get("STRUCTINBET_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise CliError(f"STRUCTINBET_THREADS must be an integer, got {raw!r}") from None


def config_path_for(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".cfg")


def loss_path_for(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".loss.csv")


def _load_model(ckpt: Path, config: Path | None) -> tuple[Config, InbetweenModel, dict[str, np.ndarray]]:
    cfg_file = config or config_path_for(ckpt)
    if not cfg_file.is_file():
        raise CliError(f"config {cfg_file} not found (pass --config)")
    cfg = load_config(cfg_file)
    state = checkpoint.load(ckpt)
    model = InbetweenModel.create(cfg.model, 0)
    model.load_state_dict(state)
    return cfg, model, state


def _t_frac(value: float) -> float:
    if not 0.0 < value < 1.0:
        raise CliError(f"--t-frac must lie strictly between 0 and 1, got {value}")
    return value


def _check_labels(tracks, cfg: UNetConfig) -> None:
    if not tracks.labels:
        raise CliError("guidance file has no trajectories")
    top = max(tracks.labels)
    if top >= cfg.num_labels:
        raise CliError(f"guidance label {top} exceeds the model's table of {cfg.num_labels} labels")


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_frac = _t_frac(args.t_frac)

    def one(i: int):
        name = f"t{i:05d}"
        tr = sample_triplet(triplet_seed(args.seed, i), t_frac, T=args.frames, S=args.size, J=args.joints)
        export_triplet(out, name, tr)
        return name, tr

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(one, range(args.count)))
    write_index(out, rows)
    log.info("wrote %d triplets to %s", len(rows), out)
    return EXIT_OK


def cmd_train(args) -> int:
    triplets = [tr for _, tr in load_dataset(args.data)]
    if not triplets:
        raise CliError(f"dataset {args.data} is empty")
    ckpt = Path(args.out_checkpoint)
    if args.resume:
        resume = Path(args.resume)
        cfg = load_config(args.config or config_path_for(resume))
    else:
        cfg = load_config(args.config) if args.config else Config()
    S = triplets[0].frames[0].shape[-1]
    if args.config is None and not args.resume and cfg.model.image_size != S:
        cfg = Config(dataclasses.replace(cfg.model, image_size=S), cfg.train)
    if cfg.model.image_size != S or cfg.model.in_channels != triplets[0].frames[0].shape[0]:
        raise CliError(f"data frames are {triplets[0].frames[0].shape}, config expects "
                       f"({cfg.model.in_channels}, {cfg.model.image_size}, {cfg.model.image_size})")
    for tr in triplets:
        _check_labels(tr.tracks, cfg.model)

    trainer = Trainer.create(cfg, seed=args.seed)
    if args.resume:
        state = checkpoint.load(args.resume)
        trainer.model.load_state_dict(state)
        trainer.opt.load_state_dict(state)
        log.info("resumed from %s at step %d", args.resume, trainer.step)

    rows: list[tuple[int, float]] = []

    def report(k: int, loss: float) -> None:
        rows.append((k, loss))
        if k % args.log_every == 0:
            log.info("step %d loss %.5f", k, loss)

    diverged = None
    try:
        trainer.run(triplets, args.steps, report)
    except DivergenceError as exc:
        diverged = exc
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    with open(loss_path_for(ckpt), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((k, f"{v:.8g}") for k, v in rows)
    if diverged is not None:
        raise CliError(f"diverged at step {trainer.step}: {diverged}", EXIT_DIVERGED)
    checkpoint.save(ckpt, {**trainer.model.state_dict(), **trainer.opt.state_dict()})
    save_config(config_path_for(ckpt), cfg)
    log.info("saved %s after %d steps", ckpt, trainer.step)
    return EXIT_OK


def cmd_sample(args) -> int:
    t_frac = _t_frac(args.t_frac)
    cfg, model, _ = _load_model(Path(args.checkpoint), Path(args.config) if args.config else None)
    f0, fT = read_image(args.frame0), read_image(args.frameT)
    shape = (cfg.model.in_channels, cfg.model.image_size, cfg.model.image_size)
    if f0.shape != shape or fT.shape != shape:
        raise CliError(f"keyframes must be {shape}, got {f0.shape} and {fT.shape}")
    _, _, tracks = read_guidance(args.guidance)
    _check_labels(tracks, cfg.model)
    labels = guidance_labels(tracks, t_frac, cfg.model.image_size, cfg.model.raster_radius)
    sched = make_schedule(cfg.train.diffusion_steps, cfg.train.beta_start, cfg.train.beta_end)
    steps = args.steps or cfg.train.sample_steps
    out = sample_inbetween(f0, fT, labels, model, sched, seed=args.seed, sampler=args.sampler, num_steps=steps)[0]
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_image(out_path, out)
    strip = np.concatenate([f0, out, fT], axis=-1)
    write_image(out_path.with_name(out_path.stem + "_strip" + out_path.suffix), strip)
    log.info("wrote %s", out_path)
    return EXIT_OK


def cmd_rasterize(args) -> int:
    _, _, tracks = read_guidance(args.guidance)
    t = args.t_frac
    if not 0.0 <= t <= 1.0:
        raise CliError(f"--t-frac must lie in [0, 1], got {t}")
    traj, skel = guidance_maps(tracks, t, (args.size, args.size), args.radius)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(traj.to_pgm())
    out.with_name(out.stem + "_skel" + out.suffix).write_bytes(skel.to_pgm())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model, _ = _load_model(Path(args.checkpoint), Path(args.config) if args.config else None)
    sched = make_schedule(cfg.train.diffusion_steps, cfg.train.beta_start, cfg.train.beta_end)
    rows = []
    for name, tr in load_dataset(args.data):
        _check_labels(tr.tracks, cfg.model)
        labels = guidance_labels(tr.tracks, tr.c_frac, cfg.model.image_size, cfg.model.raster_radius)
        pred = sample_inbetween(tr.frames[0], tr.frames[2], labels, model, sched, seed=args.seed,
                                sampler=args.sampler, num_steps=args.steps or cfg.train.sample_steps)[0]
        rows.append((name, psnr(pred, tr.frames[1]), mse(pred, tr.frames[1])))
        log.info("%s psnr %.2f dB", name, rows[-1][1])
    report = format_report(rows)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    else:
        sys.stdout.write(report)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = selfcheck.run(args.level)
    print(selfcheck.format_table(results))
    ok = all(r.ok for r in results)
    print("selfcheck", "passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structinbet", description="Structure-guided keyframe inbetweening.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic triplet dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--joints", type=int, default=4)
    g.add_argument("--frames", type=int, default=DEFAULT_T, help="sequence length T")
    g.add_argument("--t-frac", type=float, default=0.5, help="position of the middle frame in (0, 1)")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value config file (default: built-in defaults)")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate the intermediate frame")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="defaults to <checkpoint>.cfg")
    s.add_argument("--frame0", required=True)
    s.add_argument("--frameT", required=True)
    s.add_argument("--guidance", required=True)
    s.add_argument("--t-frac", type=float, default=0.5)
    s.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddpm")
    s.add_argument("--steps", type=int, default=0, help="DDIM steps (default: config sample_steps)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    r = sub.add_parser("rasterize", help="write guidance label maps as PGM")
    r.add_argument("--guidance", required=True)
    r.add_argument("--t-frac", type=float, default=0.5)
    r.add_argument("--size", type=int, default=32)
    r.add_argument("--radius", type=int, default=1)
    r.add_argument("--out", required=True, help="trajectory map; the skeleton map gets a _skel suffix")
    r.set_defaults(fn=cmd_rasterize)

    e = sub.add_parser("eval", help="PSNR/MSE report over a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddim")
    e.add_argument("--steps", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="CSV path (default: stdout)")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("selfcheck", help="run built-in numerical checks")
    c.add_argument("--level", choices=("fast", "full"), default="fast")
    c.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ConfigError, CheckpointError, GuidanceFormatError, StructureError, EncodingError,
            ShapeError, UsageError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
