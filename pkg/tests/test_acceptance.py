"""One test per acceptance criterion; each prints a PASS/FAIL line (collected in the terminal summary).

The toy end-to-end model (criteria 8 and 9) is trained once per session. Set
TECSWIN_TOY_DIR to a directory to keep the trained model between sessions.
"""

import contextlib
import io
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from tecswin import tensor as T
from tecswin.cli import main
from tecswin.datapipe import (FilterPipeline, chinese_char_ratio, filter_image, filter_pair, filter_text)
from tecswin.diffusion import GuidanceConfig, NoiseSchedule, guided_eps, q_sample, sample_loop, uniform_timesteps
from tecswin.evaluate import SampleEvaluator, class_accuracy
from tecswin.rng import Rng
from tecswin.search import build_staged_schedule, greedy_substep_search
from tecswin.swin import window_attention_context
from tecswin.tensor import Tensor
from tecswin.train import DataConfig, RunConfig, TrainConfig, load_model, run_train
from tecswin.unet import ModelConfig, PatchExpand, PatchMerge, TecSwinUNet, count_parameters

from _acceptance import criterion
from _util import gradcheck
from conftest import tiny_config
from test_datapipe import synthetic_records
from test_diffusion import LinearModel, OracleModel, _manual_loop, reconstruction_tol
from test_search import coordinate_oracle, distance_to_100
from test_swin import oracle_window_attention, random_attention_case
from test_tensor import GRAD_CASES, rand
from test_unet import SHAPE_CONFIGS, full_model_gradcheck, inputs

TOY_STEPS = 2000
SAMPLE_STEPS = 50
COND_SCALE = 1.14


def test_criterion_01_gradients():
    start = time.perf_counter()
    op_worst = max(gradcheck(fn, [rand(*s, seed=i + 7) for i, s in enumerate(shapes)])
                   for fn, shapes in GRAD_CASES.values())
    model_worst, name = full_model_gradcheck()
    elapsed = time.perf_counter() - start
    ok = op_worst < 1e-2 and model_worst < 1e-2 and elapsed < 120
    criterion(1, "gradient suite", ok, f"{len(GRAD_CASES)} ops max rel err {op_worst:.2e}; tiny U-Net max rel err "
              f"{model_worst:.2e} ({name}); {elapsed:.0f} s (limit 120 s)")


def test_criterion_02_attention_oracle():
    worst = worst_empty = 0.0
    for seed in range(100):
        layer, xw, ctx, batch, mask = random_attention_case(seed)
        got = window_attention_context(layer, Tensor(xw), Tensor(ctx), batch, mask).data
        worst = max(worst, np.abs(got - oracle_window_attention(layer, xw, ctx, batch, mask)).max())
        empty = window_attention_context(layer, Tensor(xw), Tensor(ctx[:, :0]), batch, mask).data
        worst_empty = max(worst_empty, np.abs(empty - oracle_window_attention(layer, xw, None, batch, mask)).max())
    criterion(2, "attention oracle", worst < 1e-5 and worst_empty < 1e-6,
              f"100 cases max |diff| {worst:.1e} (tol 1e-5); empty context {worst_empty:.1e} (tol 1e-6)")


def test_criterion_03_shift_mask():
    from tecswin.nn import parameter
    from tecswin.swin import AttentionConfig, ContextBundle, SwinBlock

    worst, probes = 0.0, 0
    for seed in range(5):
        cfg = AttentionConfig(2, 4, window=4)
        blk = SwinBlock(cfg, 8, shifted=True, with_cross=False, ctx_dim=4, emb_dim=4, rng=Rng(seed),
                        rel_bias_table=parameter(Rng(seed + 10), (49, 2), std=1.0))
        blk.attn.record_attention = True
        rs = np.random.default_rng(seed)
        x = Tensor(rs.standard_normal((2, 8, 8, 8)).astype(np.float32) * 3)
        ctx = ContextBundle(Tensor(rs.standard_normal((2, 3, 4)).astype(np.float32)),
                            Tensor(np.zeros((2, 4), np.float32)), np.zeros(2, bool))
        blk(x, ctx, Tensor(np.ones((2, 4), np.float32)))
        w = blk.attn.last_attention[..., :16]
        cross = np.broadcast_to(np.isinf(blk._mask)[None, :, None], w.shape)
        probes += int(cross.sum())
        worst = max(worst, float(w[cross].max()))
    criterion(3, "shift mask probe", worst < 1e-7, f"max cross-region weight {worst:.1e} over {probes} entries "
              "(tol 1e-7)")


def test_criterion_04_shapes_and_roundtrips():
    rs = np.random.default_rng(0)
    x = Tensor(rs.standard_normal((2, 8, 8, 16)).astype(np.float32))
    merge_expand = PatchExpand(32, Rng(1))(PatchMerge(16, Rng(0))(x)).shape == x.shape
    y = rs.standard_normal((2, 12, 12, 5))
    windows = np.array_equal(T.window_reverse(T.window_partition(Tensor(y), 4), 4, 12, 12).data, y)
    shifts = all(np.array_equal(T.cyclic_shift(T.cyclic_shift(Tensor(y), dy, dx), -dy, -dx).data, y)
                 for dy, dx in [(1, 1), (2, -3), (-5, 6)])
    forward = []
    for cfg in SHAPE_CONFIGS:
        xi, t, emb = inputs(cfg)
        forward.append(TecSwinUNet(cfg, Rng(0))(Tensor(xi), t, emb, np.array([False, True])).shape == xi.shape)
    ok = merge_expand and windows and shifts and all(forward)
    criterion(4, "shape and round-trip suite", ok, f"merge/expand {merge_expand}; window round-trip {windows}; "
              f"shift inverse {shifts}; forward shapes {sum(forward)}/{len(forward)}")


def test_criterion_05_parameter_count():
    n = count_parameters(ModelConfig.full())
    rel = (n - 341e6) / 341e6
    criterion(5, "parameter count", abs(rel) <= 0.05, f"{n / 1e6:.2f}M vs 341M ({rel:+.2%}, tol ±5%)")


def test_criterion_06_diffusion_math():
    sched = NoiseSchedule(1000)
    n = 10_000
    x0 = np.array([0.7, -0.3, 0.0])
    bands = True
    for t in (1, 100, 500, 999):
        xt = q_sample(np.broadcast_to(x0, (n, 3)), t, Rng(t).normal((n, 3), dtype=np.float64), sched)
        ab = sched.alpha_bar[t]
        var = 1 - ab
        bands &= bool(np.all(np.abs(xt.mean(0) - math.sqrt(ab) * x0) < 3 * math.sqrt(var / n)))
        bands &= bool(np.all(np.abs(xt.var(0, ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1))))
    x0img = np.random.default_rng(0).uniform(-0.9, 0.9, (2, 4, 4, 3))
    recon = 0.0
    for steps in (5, 190):
        out = sample_loop(OracleModel(x0img, sched), np.zeros((2, 1, 1)), uniform_timesteps(steps, 1000),
                          GuidanceConfig(1.0), Rng(0), sched, (4, 4, 3))
        recon = max(recon, float(np.abs(out - x0img).max()))
    ts = uniform_timesteps(1, 1000)
    one_step = sample_loop(OracleModel(x0img, sched), np.zeros((2, 1, 1)), ts, GuidanceConfig(1.0), Rng(0), sched,
                           (4, 4, 3))
    one_err = float(np.abs(one_step - x0img).max())
    ab = sched.alpha_bar
    shape = ab[0] == 1.0 and bool(np.all(np.diff(ab) < 0))
    ok = bands and recon < 1e-5 and one_err < reconstruction_tol(ts) and shape
    criterion(6, "diffusion math", ok, f"3σ moment bands {bands}; reconstruction err {recon:.1e} (tol 1e-5), "
              f"single step from T {one_err:.1e} (float32-input tol {reconstruction_tol(ts):.1e}); "
              f"ᾱ(0)=1 and strictly decreasing {shape}")


def test_criterion_07_guidance():
    emb = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    ts = uniform_timesteps(20, 1000)
    sched = NoiseSchedule(1000)
    s1 = sample_loop(LinearModel(), emb, ts, GuidanceConfig(1.0), Rng(4), sched, (2, 2, 1))
    s0 = sample_loop(LinearModel(), emb, ts, GuidanceConfig(0.0), Rng(4), sched, (2, 2, 1))
    cond = s1.tobytes() == _manual_loop(LinearModel(), emb, ts, Rng(4), np.zeros(2, bool)).tobytes()
    uncond = s0.tobytes() == _manual_loop(LinearModel(), emb, ts, Rng(4), np.ones(2, bool)).tobytes()
    rs = np.random.default_rng(1)
    affine = True
    for _ in range(200):
        c, u = rs.integers(-64, 65, 6) / 8, rs.integers(-64, 65, 6) / 8
        a, b = rs.integers(-64, 65, 2) / 8
        mid = guided_eps(c, u, (a + b) / 2)
        affine &= np.array_equal(mid, (np.asarray(guided_eps(c, u, a)) + np.asarray(guided_eps(c, u, b))) / 2)
        affine &= np.array_equal(np.asarray(guided_eps(c, u, a + 1)) - np.asarray(guided_eps(c, u, a)), c - u)
    criterion(7, "guidance", cond and uncond and affine,
              f"s=1 bitwise conditional {cond}; s=0 bitwise unconditional {uncond}; affine in s (exact) {affine}")


@pytest.fixture(scope="session")
def toy_model(tmp_path_factory):
    """Toy shapes model: 16×16, base 16, depths 2-2-2-2, up to 2000 steps."""
    out = Path(os.environ.get("TECSWIN_TOY_DIR") or tmp_path_factory.mktemp("toy"))
    cfg = RunConfig(model=ModelConfig.toy(base_channels=16, depths=(2, 2, 2, 2)),
                    train=TrainConfig(steps=TOY_STEPS, batch_size=16, lr=2e-3, min_lr=2e-4, warmup_frac=0.02,
                                      checkpoint_every=0),
                    data=DataConfig(num_classes=4), output_dir=str(out))
    summary = out / "train_summary.json"
    reuse = summary.exists() and json.loads(summary.read_text()).get("config") == cfg.to_dict()
    if not reuse:
        start = time.perf_counter()
        res = run_train(cfg)
        info = {"eval_initial": res.eval_initial, "eval_final": res.eval_final, "steps": TOY_STEPS,
                "train_seconds": time.perf_counter() - start, "config": cfg.to_dict()}
        summary.write_text(json.dumps(info, indent=2) + "\n")
    info = json.loads(summary.read_text())
    model, cfg = load_model(out / "checkpoint.tsw")
    return model, cfg, info


def test_criterion_08_schedule_search(toy_model):
    base = build_staged_schedule(1000, 19, 10)
    rep = greedy_substep_search(distance_to_100, base, range(1, 21))
    synthetic = rep.final.substeps == coordinate_oracle(distance_to_100, base, range(1, 21))

    model, cfg, _ = toy_model
    ev = SampleEvaluator(model, cfg, num_samples=32, num_real=256, seed=0)
    toy_base = build_staged_schedule(1000, 4, 10)
    toy = greedy_substep_search(lambda s: ev(s, COND_SCALE), toy_base, [5, 10, 15])
    recheck = ev(toy.final, COND_SCALE)
    ok = synthetic and toy.final_metric <= toy.initial_metric and recheck == toy.final_metric
    criterion(8, "schedule search", ok, f"synthetic greedy == oracle {synthetic} (final total "
              f"{rep.final.total_steps}); toy proxy FID uniform {toy.initial_metric:.4f} -> searched "
              f"{toy.final_metric:.4f} (substeps {list(toy.final.substeps)}), re-evaluated {recheck:.4f}")


def test_criterion_09_toy_end_to_end(toy_model):
    model, cfg, info = toy_model
    ts = uniform_timesteps(SAMPLE_STEPS, cfg.diffusion.T)
    start = time.perf_counter()
    acc = {s: class_accuracy(model, cfg, ts, s, n=200, seed=0) for s in (COND_SCALE, 1.0, 0.0)}
    sample_seconds = time.perf_counter() - start
    ratio = info["eval_final"] / info["eval_initial"]
    total = info["train_seconds"] + sample_seconds
    ok = (ratio < 0.5 and acc[COND_SCALE] >= 0.70 and acc[COND_SCALE] >= acc[1.0] and info["steps"] <= 2000
          and total < 1800)
    criterion(9, "toy end-to-end", ok, f"loss {info['eval_initial']:.3f} -> {info['eval_final']:.3f} "
              f"(ratio {ratio:.2f}, need < 0.5); class accuracy s=1.14 {acc[COND_SCALE]:.2f} (need >= 0.70), "
              f"s=1 {acc[1.0]:.2f}, s=0 {acc[0.0]:.2f}; {info['steps']} steps, train "
              f"{info['train_seconds']:.0f} s + sampling {sample_seconds:.0f} s (limit 1800 s)")


def test_criterion_10_datapipe():
    length = filter_text("abcde").reasons == ["text_length"] and filter_text("abcdef").keep
    perplexity = (not filter_text("一只猫在草地上", perplexity=6.51).keep
                  and filter_text("一只猫在草地上", perplexity=6.5).keep)
    ratio = (not filter_text("猫" * 69 + "x" * 31, charset_ratio_fn=chinese_char_ratio).keep
             and filter_text("猫" * 70 + "x" * 30, charset_ratio_fn=chinese_char_ratio).keep)
    resolution = not filter_image(63, 100).keep and filter_image(64, 64).keep
    aspect = not filter_image(128, 64).keep and filter_image(127, 64).keep
    cosine = (not filter_pair([1.0, 0.0], [0.1999, math.sqrt(1 - 0.1999**2)]).keep
              and filter_pair([1.0, 0.0], [0.2, math.sqrt(1 - 0.04)]).keep)
    recs = synthetic_records(1000)
    start = time.perf_counter()
    first = FilterPipeline().run(recs)
    elapsed = time.perf_counter() - start
    again = FilterPipeline().run(first.kept)
    idempotent = [r.to_json() for r in again.kept] == [r.to_json() for r in first.kept]
    st = first.stats()
    conserved = (st["kept"] + st["rejected"] + st["quarantined"] == 1000
                 and sum(st["rejected_by_reason"].values()) == st["rejected"])
    ok = all([length, perplexity, ratio, resolution, aspect, cosine, idempotent, conserved]) and elapsed < 10
    criterion(10, "datapipe", ok, f"boundaries length {length}, perplexity {perplexity}, ratio {ratio}, "
              f"resolution {resolution}, aspect {aspect}, cosine {cosine}; idempotent {idempotent}; conservation "
              f"{conserved} ({st['kept']} kept, {st['rejected']} rejected, {st['quarantined']} quarantined); "
              f"{elapsed:.2f} s (limit 10 s)")


def _run_twice(argv, files):
    snaps = []
    for _ in range(2):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            assert main([str(a) for a in argv]) == 0
        snaps.append((buf.getvalue(), [Path(f).read_bytes() for f in files]))
    return snaps[0] == snaps[1]


def test_criterion_11_cli_determinism(tmp_path, tiny_checkpoint):
    from PIL import Image

    tiny_config(tmp_path / "train", steps=3).save(tmp_path / "cfg.json")
    ev = ["--checkpoint", tiny_checkpoint, "--num-samples", "8", "--num-real", "16", "--seed", "5"]
    recs = [{"image": f"{i}.png", "caption": c, "width": w, "height": 64}
            for i, (c, w) in enumerate([("a red square", 64), ("abc", 64), ("a green circle", 200),
                                        ("a blue triangle", 80)])]
    (tmp_path / "m.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    for d in ("real", "fake"):
        (tmp_path / d).mkdir()
        rs = np.random.default_rng(len(d))
        for i in range(6):
            Image.fromarray(rs.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(tmp_path / d / f"{i}.png")
    commands = {
        "train": (["train", "--config", tmp_path / "cfg.json"],
                  [tmp_path / "train" / "checkpoint.tsw", tmp_path / "train" / "loss_log.jsonl"]),
        "sample": (["sample", "--prompt", "a red square", "--steps", "4", "--seed", "1", "--num", "2",
                    "--checkpoint", tiny_checkpoint, "--out", tmp_path / "s.png", "--raw", tmp_path / "s.tsw"],
                   [tmp_path / "s.png", tmp_path / "s.tsw"]),
        "search-schedule": (["search-schedule", "--stages", "2", "--base-substeps", "2", "--candidates", "1..3",
                             "--out-dir", tmp_path / "search", *ev],
                            [tmp_path / "search" / "search_log.jsonl", tmp_path / "search" / "schedule.json"]),
        "scan": (["scan", "--param", "cond-scale", "--grid", "1.0,1.14", "--steps", "3", *ev], []),
        "filter": (["filter", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "f.jsonl", "--quarantine",
                    tmp_path / "q.jsonl", "--rejected", tmp_path / "r.jsonl", "--hash-perplexity"],
                   [tmp_path / "f.jsonl", tmp_path / "q.jsonl", tmp_path / "r.jsonl"]),
        "fid": (["fid", "--real", tmp_path / "real", "--fake", tmp_path / "fake"], []),
    }
    same = {name: _run_twice(argv, files) for name, (argv, files) in commands.items()}
    criterion(11, "CLI determinism", all(same.values()),
              ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
