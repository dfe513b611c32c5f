"""Command-line entry point: train, sample, search-schedule, scan, filter, fid."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datapipe import HashPerplexityScorer, filter_manifest
from .diffusion import GuidanceConfig, sample_loop, uniform_timesteps
from .io import save_tensor
from .metrics import extract_features, frechet_distance, load_image_dir
from .rng import Rng
from .search import (StageSchedule, build_staged_schedule, greedy_substep_search, parse_grid, parse_int_range,
                     scan_scalar)
from .textcond import embed_prompts

DEFAULT_CHECKPOINT = "runs/toy/checkpoint.tsw"


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False))


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round((np.clip(images, -1, 1) + 1) * 127.5).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def tile(images: np.ndarray) -> np.ndarray:
    """Lay out [N, H, W, C] images on a near-square grid."""
    n, h, w, c = images.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.full((rows * h, cols * w, c), -1.0, dtype=images.dtype)
    for i, im in enumerate(images):
        r, q = divmod(i, cols)
        grid[r * h : (r + 1) * h, q * w : (q + 1) * w] = im
    return grid


def _timesteps(args, T: int):
    if getattr(args, "schedule", None):
        return StageSchedule.load(args.schedule)
    return uniform_timesteps(args.steps, T)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .train import RunConfig, TrainConfig, load_model, run_train

    cfg = RunConfig.load(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.steps is not None:
        cfg.train.steps = args.steps
    model = None
    if args.finetune:
        if not args.init:
            raise SystemExit("--finetune needs --init CHECKPOINT")
        model, _ = load_model(args.init)
        t = cfg.train
        cfg.train = TrainConfig.finetune(steps_per_epoch=args.steps_per_epoch, epochs=args.epochs,
                                         batch_size=t.batch_size, checkpoint_every=t.checkpoint_every,
                                         eval_batch=t.eval_batch)
    result = run_train(cfg, model)
    _emit({"checkpoint": str(result.checkpoint), "eval_initial": result.eval_initial,
           "eval_final": result.eval_final, "steps": cfg.train.steps})
    return 0


def cmd_sample(args) -> int:
    from .train import load_model

    model, cfg = load_model(args.checkpoint)
    schedule = cfg.diffusion.schedule()
    emb = embed_prompts([args.prompt] * args.num, cfg.encoder.build(), cfg.encoder.layer_preset)
    size = cfg.model.image_size
    imgs = sample_loop(model, emb, _timesteps(args, schedule.T), GuidanceConfig(args.cond_scale, cfg.guidance.mask_prob),
                       Rng(args.seed).fork("sample"), schedule, (size, size, cfg.model.in_channels))
    save_png(args.out, tile(imgs))
    if args.raw:
        save_tensor(args.raw, imgs)
    _emit({"out": args.out, "raw": args.raw, "num": args.num, "prompt": args.prompt})
    return 0


def _evaluator(args):
    from .evaluate import SampleEvaluator
    from .train import load_model

    model, cfg = load_model(args.checkpoint)
    return SampleEvaluator(model, cfg, num_samples=args.num_samples, num_real=args.num_real, seed=args.seed), cfg


def cmd_search_schedule(args) -> int:
    ev, cfg = _evaluator(args)
    T = cfg.diffusion.T
    base = build_staged_schedule(T, args.stages, args.base_substeps)
    candidates = parse_int_range(args.candidates)
    report = greedy_substep_search(lambda sched: ev(sched, args.cond_scale), base, candidates, passes=args.passes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_log(out / "search_log.jsonl")
    report.final.save(out / "schedule.json")
    _emit({"initial_metric": report.initial_metric, "final_metric": report.final_metric,
           "substeps": list(report.final.substeps), "schedule": str(out / "schedule.json")})
    return 0


def cmd_scan(args) -> int:
    ev, cfg = _evaluator(args)
    T = cfg.diffusion.T
    grid = parse_grid(args.grid)
    if args.param == "cond-scale":
        metric = lambda s: ev(_timesteps(args, T), s)
    else:
        grid = [int(g) for g in grid]
        metric = lambda n: ev(uniform_timesteps(n, T), args.cond_scale)
    best, table = scan_scalar(metric, grid)
    _emit({"param": args.param, "best": best, "table": [{"value": x, "metric": m} for x, m in table]})
    return 0


def cmd_filter(args) -> int:
    scorer = HashPerplexityScorer(args.scorer_seed) if args.hash_perplexity else None
    stats = filter_manifest(args.manifest, args.out, args.quarantine, args.rejected, scorer=scorer,
                            workers=args.workers)
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(stats)
    return 0


def cmd_fid(args) -> int:
    real = extract_features(load_image_dir(args.real, args.size))
    fake = extract_features(load_image_dir(args.fake, args.size))
    _emit({"fid": frechet_distance(real, fake), "num_real": len(real.features), "num_fake": len(fake.features),
           "extractor": real.extractor_id})
    return 0


# ---------------------------------------------------------------------------


def _add_eval_args(p) -> None:
    p.add_argument("--checkpoint", default=DEFAULT_CHECKPOINT)
    p.add_argument("--cond-scale", type=float, default=1.14)
    p.add_argument("--num-samples", type=int, default=64, help="generated images per metric evaluation")
    p.add_argument("--num-real", type=int, default=256, help="reference images for the proxy FID")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tecswin", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--finetune", action="store_true", help="constant lr 1e-6 for a few epochs")
    p.add_argument("--init", help="checkpoint to fine-tune from")
    p.add_argument("--steps-per-epoch", type=int, default=100)
    p.add_argument("--epochs", type=int, default=5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images for a prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--cond-scale", type=float, default=1.14)
    p.add_argument("--steps", type=int, default=190)
    p.add_argument("--schedule", help="schedule file written by search-schedule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num", type=int, default=1)
    p.add_argument("--checkpoint", default=DEFAULT_CHECKPOINT)
    p.add_argument("--out", default="sample.png")
    p.add_argument("--raw", help="also write the float images as a raw tensor file")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("search-schedule", help="greedy per-stage substep search")
    p.add_argument("--stages", type=int, default=19)
    p.add_argument("--base-substeps", type=int, default=10)
    p.add_argument("--candidates", default="5..15")
    p.add_argument("--passes", type=int, default=1)
    p.add_argument("--out-dir", default="runs/search")
    _add_eval_args(p)
    p.set_defaults(func=cmd_search_schedule)

    p = sub.add_parser("scan", help="scan cond-scale or step count against the proxy FID")
    p.add_argument("--param", choices=("cond-scale", "steps"), required=True)
    p.add_argument("--grid", required=True, help="lo:hi:step or comma list")
    p.add_argument("--steps", type=int, default=190)
    p.add_argument("--schedule")
    _add_eval_args(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("filter", help="filter an image-caption manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quarantine", required=True)
    p.add_argument("--rejected")
    p.add_argument("--stats")
    p.add_argument("--hash-perplexity", action="store_true", help="score captions with the hash stand-in scorer")
    p.add_argument("--scorer-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("fid", help="proxy FID between two PNG directories")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--size", type=int, help="resize images to this side first")
    p.set_defaults(func=cmd_fid)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
