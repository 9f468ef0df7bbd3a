"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line (printed in the terminal summary)
before asserting, so a failing run still reports all criteria.
"""
import math
import statistics
import time

import numpy as np
import pytest
import torch

from scarnet.config import load_config
from scarnet.evaluation import bland_altman, evaluate_masks, linear_fit, monte_carlo
from scarnet.losses import LossWeights, combined_loss, dice_loss, focal_tversky_loss, tversky_index
from scarnet.model import ModelConfig, build_model, predict_mask
from scarnet.phantom import (
    AugmentParams, apply_augmentation, dataset_read, dataset_write, make_phantom_set,
    regenerate_from_manifest, sample_augmentation,
)
from scarnet.training import check_gradients, grad_check, load_checkpoint, train

from conftest import ACCEPTANCE_LINES, tiny_config

pytestmark = pytest.mark.slow

TINY_ARGS = [
    "model.image_size=32", "model.branch.patch_size=8", "model.branch.d=32", "model.branch.L=1",
    "model.branch.num_heads=4", "model.branch.neck_channels=[32,16,16,8]", "model.unet.base_channels=8",
    "model.fusion.common_channels=16", "model.fusion.attn_grid=8", "train.micro_batch=2", "train.accum_steps=2",
]


def record(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1 -----------------------------------------------------------------------

def test_c1_structure():
    t0 = time.time()
    cfg = ModelConfig()
    model = build_model(cfg).eval()
    seen = {}
    model.unet.encoders[4].register_forward_hook(lambda m, i, o: seen.__setitem__("e5", o.shape))
    trace = {}
    with torch.no_grad():
        logits = model(torch.randn(1, 1, 256, 256), trace)
    elapsed = time.time() - t0
    enc = cfg.unet.encoder_channels
    dec = cfg.unet.decoder_channels
    checks = {
        "e5": tuple(seen["e5"]) == (1, 1024, 16, 16),
        "sam": tuple(trace["f_sam"].shape) == (1, 32, 256, 256),
        "unet": tuple(trace["f_unet"].shape) == (1, 128, 256, 256),
        "logits": tuple(logits.shape) == (1, 4, 256, 256),
        # e_1 = 64, e_i = 2^(i+5); d_4 = 512, d_i = 2^(i+6)
        "encoder plan": enc == [64] + [2 ** (i + 5) for i in range(2, 6)],
        "decoder plan": dec == [512] + [2 ** (i + 6) for i in (3, 2, 1)],
        "runtime": elapsed < 60,
    }
    bad = [k for k, v in checks.items() if not v]
    record(1, "structural fidelity", not bad,
           f"e5 {tuple(seen['e5'][1:])}, logits {tuple(logits.shape[1:])}, enc {enc}, dec {dec}, "
           f"{elapsed:.1f}s" + (f", failed: {bad}" if bad else ""))


# -- 2 -----------------------------------------------------------------------

def test_c2_losses():
    t0 = time.time()
    eps = 1e-6
    d = torch.float64
    w = LossWeights()
    ftl = focal_tversky_loss(torch.tensor([0.8, 0.2], dtype=d), torch.tensor([1.0, 0.0], dtype=d), w).item()
    dl = dice_loss(torch.tensor([1.0, 1, 0, 0], dtype=d), torch.tensor([1.0, 0, 1, 0], dtype=d), w).item()
    logits = torch.zeros(1, 4, 2, 2, dtype=d)
    labels = torch.tensor([[[0, 1], [2, 3]]])
    ce = combined_loss(logits, labels, w)[1]["ce"].item()
    examples = [
        abs(ftl - (1 - (0.8 + eps) / (1.0 + eps)) ** 0.75) < 1e-12,
        abs(dl - (1 - (2 + eps) / (4 + eps))) < 1e-12,
        abs(ce - 0.25 * math.log(4)) < 1e-12,
    ]
    rng = np.random.default_rng(2024)
    worst = 0.0
    ftl_w = LossWeights(tversky_alpha=0.5, tversky_beta=0.5, tversky_gamma=1.0)
    for _ in range(100):
        p = torch.from_numpy(rng.integers(0, 2, (8, 8)).astype(np.float64))
        g = torch.from_numpy(rng.integers(0, 2, (8, 8)).astype(np.float64))
        worst = max(worst, abs(focal_tversky_loss(p, g, ftl_w).item() - dice_loss(p, g, ftl_w).item()),
                    abs(tversky_index(p, g, 0.5, 0.5, eps).item() - (1 - dice_loss(p, g).item())))
    elapsed = time.time() - t0
    ok = all(examples) and worst < 1e-6 and elapsed < 60
    record(2, "loss correctness", ok,
           f"hand examples {sum(examples)}/{len(examples)}, Tversky-Dice max gap {worst:.2e} (< 1e-6), "
           f"{elapsed:.1f}s")


# -- 3 -----------------------------------------------------------------------

def test_c3_gradient_check():
    t0 = time.time()
    cfg = ModelConfig(image_size=32)
    model = build_model(cfg, seed=1, dtype=torch.float64)
    s = make_phantom_set(1, seed=5, height=32, width=32)[0]
    x = torch.from_numpy(s.image).double()[None]
    y = torch.from_numpy(s.mask.astype(np.int64))[None]
    # step 1e-6: a 1e-4 probe can carry a pooled value across a max-pool tie
    rep = grad_check(model, x, y, tolerance=1e-3, entries=2, step=1e-6)
    # corrupted control: analytic gradient scaled by 2 must be rejected
    bad = grad_check(model, x, y, tolerance=1e-3, entries=1, step=1e-6, analytic_scale=2.0,
                     include_input=False)
    elapsed = time.time() - t0
    ok = rep.passed and not bad.passed and elapsed < 600
    record(3, "gradient check", ok,
           f"{len(rep.errors)} groups, worst rel err {rep.worst:.2e} ({rep.worst_group}) < 1e-3; "
           f"corrupted control worst {bad.worst:.2f} rejected={not bad.passed}; {elapsed:.0f}s")


# -- 4 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit():
    cfg = load_config(overrides=["model.image_size=64", "model.branch.patch_size=8", "train.epochs=200"])
    samples = make_phantom_set(8, seed=cfg.data.seed, height=64, width=64)
    t0 = time.time()

    def stop(row):
        return row["epoch"] >= 9 and row["train_dice_myo"] >= 0.90 and row["train_dice_scar"] >= 0.80

    result = train(samples, cfg, on_epoch=stop)
    return result, samples, time.time() - t0


def test_c4_overfit(overfit):
    result, samples, elapsed = overfit
    losses = [r["loss_total"] for r in result.history]
    first10 = losses[:10]
    decreasing = len(first10) == 10 and all(b < a for a, b in zip(first10, first10[1:]))
    x = torch.from_numpy(np.stack([s.image for s in samples]))
    pred = predict_mask(result.model, x).numpy()
    rep = evaluate_masks({s.id: p for s, p in zip(samples, pred)}, {s.id: s.mask for s in samples})
    myo = float(np.mean([r["dice_myocardium"] for r in rep.rows]))
    scar = float(np.mean([r["dice_scar"] for r in rep.rows]))
    ok = decreasing and myo >= 0.90 and scar >= 0.80 and len(losses) <= 200 and elapsed < 7200
    record(4, "overfit sanity", ok,
           f"{len(losses)} epochs, myo DICE {myo:.3f} (>= 0.90), scar DICE {scar:.3f} (>= 0.80), "
           f"first-10 loss strictly decreasing={decreasing} "
           f"({first10[0]:.4f} -> {first10[-1]:.4f}), {elapsed:.0f}s")


# -- 5 -----------------------------------------------------------------------

def test_c5_fusion_endpoints():
    cfg = tiny_config().model
    model = build_model(cfg, seed=3).eval()
    # non-trivial learned gate so the override is what matters
    with torch.no_grad():
        torch.nn.init.normal_(model.head.fuse.fc2.weight, std=0.5)
    gen = torch.Generator().manual_seed(9)
    results = []
    for trial in range(5):
        x = torch.randn(2, 1, 32, 32, generator=gen)
        for value, key in ((1.0, "sam_attended"), (0.0, "unet_aligned")):
            model.head.fuse.gate_override = value
            trace = {}
            with torch.no_grad():
                model(x, trace)
            results.append(torch.equal(trace["fused"], trace[key]))
    model.head.fuse.gate_override = None
    record(5, "fusion endpoint identities", all(results),
           f"{sum(results)}/{len(results)} bitwise matches (gate=1 -> SAM, gate=0 -> UNet)")


# -- 6 -----------------------------------------------------------------------

def test_c6_monte_carlo(overfit, tmp_path):
    from scarnet.cli import main

    result, samples, _ = overfit
    zero = monte_carlo(result.model, samples, n_iter=10, sigma=0.0, seed=0)
    zero_ok = all(zero.std[k] == 0.0 and zero.cov[k] in (0.0, None) for k in zero.std)

    # two full 200-iteration runs through the CLI on a small checkpoint
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["phantom-gen", "--count", "4", "--size", "32", "--seed", "1", "--out", str(data)]) == 0
    args = [f"--{k}={v}" for k, v in (o.split("=", 1) for o in TINY_ARGS)]
    assert main(["train", "--data", str(data), "--out", str(run), "--train.epochs", "1"] + args) == 0
    csvs = []
    for name in ("a", "b"):
        assert main(["montecarlo", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data),
                     "--iters", "200", "--sigma", "0.05", "--seed", "7", "--out", str(tmp_path / name),
                     "--no-plots"]) == 0
        csvs.append((tmp_path / name / "montecarlo.csv").read_bytes())
    identical = csvs[0] == csvs[1] and len(csvs[0].splitlines()) == 201

    trained = monte_carlo(result.model, samples, n_iter=200, sigma=0.05, seed=0)
    cov = trained.cov["scar"]
    cov_ok = cov is not None and math.isfinite(cov)
    record(6, "Monte Carlo harness", zero_ok and identical and cov_ok,
           f"sigma=0: std {max(zero.std.values())}; 200-iter csv byte-identical={identical}; "
           f"trained scar DICE {trained.mean['scar']:.4f} +- {trained.std['scar']:.4f}, "
           f"CoV {'undefined' if cov is None else f'{100 * cov:.3f}%'}")


# -- 7 -----------------------------------------------------------------------

def _direct_ba(pairs):
    diffs = [a - m for a, m in pairs]
    bias = math.fsum(diffs) / len(diffs)
    sd = math.sqrt(math.fsum((d - bias) ** 2 for d in diffs) / (len(diffs) - 1))
    mean = math.fsum((a + m) / 2 for a, m in pairs) / len(pairs)
    return bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, sd / mean


def _direct_fit(pairs):
    n = len(pairs)
    sx = math.fsum(x for x, _ in pairs)
    sy = math.fsum(y for _, y in pairs)
    sxx = math.fsum(x * x for x, _ in pairs)
    sxy = math.fsum(x * y for x, y in pairs)
    slope = (n * sxy - sx * sy) / (n * sxx - sx * sx)
    intercept = (sy - slope * sx) / n
    r = statistics.correlation([x for x, _ in pairs], [y for _, y in pairs])
    return slope, intercept, r * r


def test_c7_statistics():
    rng = np.random.default_rng(77)
    gaps = []
    for _ in range(20):
        manual = rng.uniform(0.05, 0.5, 5)
        pairs = [(float(m + rng.normal(0, 0.03)), float(m)) for m in manual]
        ba = bland_altman(pairs)
        got = (ba.bias, ba.sd_diff, ba.loa_low, ba.loa_high, ba.cov)
        gaps += [abs(u - v) for u, v in zip(got, _direct_ba(pairs))]
        fit = linear_fit(pairs)
        gaps += [abs(u - v) for u, v in zip((fit.slope, fit.intercept, fit.r_squared), _direct_fit(pairs))]
    worst = max(gaps)

    base = [0.1, 0.2, 0.25, 0.4, 0.33]
    perfect = bland_altman([(v, v) for v in base])
    pfit = linear_fit([(v, v) for v in base])
    offset = bland_altman([(v + 0.05, v) for v in base])
    ofit = linear_fit([(v, v + 0.05) for v in base])
    closed = [
        perfect.bias == 0.0, perfect.sd_diff == 0.0, abs(pfit.r_squared - 1) < 1e-12,
        abs(pfit.slope - 1) < 1e-12, abs(pfit.intercept) < 1e-12,
        abs(offset.bias - 0.05) < 1e-12, offset.sd_diff < 1e-12,
        abs(ofit.slope - 1) < 1e-12, abs(ofit.intercept - 0.05) < 1e-12, abs(ofit.r_squared - 1) < 1e-12,
    ]
    ok = worst < 1e-10 and all(closed)
    record(7, "statistics oracle equivalence", ok,
           f"20 x 5-pair sets, max deviation from direct formulas {worst:.1e} (< 1e-10); "
           f"closed-form cases {sum(closed)}/{len(closed)}")


# -- 8 -----------------------------------------------------------------------

def test_c8_reproducibility(tmp_path):
    samples = make_phantom_set(6, seed=8, height=32, width=32)
    cfg = lambda e: tiny_config(f"train.epochs={e}", "train.micro_batch=2", "train.accum_steps=2")
    a = train(samples, cfg(3))
    b = train(samples, cfg(3))
    traj = max(abs(x["loss_total"] - y["loss_total"]) for x, y in zip(a.history, b.history))
    pdiff = max((p - q).abs().max().item() for p, q in zip(a.model.parameters(), b.model.parameters()))

    train(samples, cfg(2), out_dir=tmp_path / "run")
    resumed = train(samples, cfg(3), out_dir=tmp_path / "run", resume=load_checkpoint(tmp_path / "run/checkpoint.bin"))
    resume_equal = all(torch.equal(p, q) for p, q in zip(a.model.parameters(), resumed.model.parameters()))
    resume_equal &= resumed.history[0]["loss_total"] == a.history[2]["loss_total"]

    dataset_write(tmp_path / "ds", make_phantom_set(10, seed=31, height=48, width=48))
    regen_equal = all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
                      for x, y in zip(dataset_read(tmp_path / "ds"), regenerate_from_manifest(tmp_path / "ds")))
    ok = traj <= 1e-6 and pdiff <= 1e-6 and resume_equal and regen_equal
    record(8, "reproducibility and resume", ok,
           f"repeat run loss gap {traj:.1e}, param gap {pdiff:.1e}; 2+1 resume == 3 straight={resume_equal}; "
           f"manifest regeneration bit-identical={regen_equal}")


# -- 9 -----------------------------------------------------------------------

def test_c9_augmentation():
    rng = np.random.default_rng(99)
    params = AugmentParams(apply_prob=1.0)
    draws = [sample_augmentation(params, rng) for _ in range(10_000)]
    angles = np.array([d.angle for d in draws])
    hflip = float(np.mean([d.hflip for d in draws]))
    vflip = float(np.mean([d.vflip for d in draws]))
    factors = np.array([(d.brightness, d.contrast) for d in draws])
    ranges_ok = bool(np.all(np.abs(angles) <= 15) and factors.min() >= 0.8 and factors.max() <= 1.2)
    flips_ok = 0.47 <= hflip <= 0.53 and 0.47 <= vflip <= 0.53

    label_ok = True
    for s in make_phantom_set(4, seed=12, height=64, width=64):
        want = set(np.unique(s.mask))
        for d in draws[:100]:
            _, m = apply_augmentation(s.image, s.mask, d)
            label_ok &= set(np.unique(m)) == want and m.dtype == s.mask.dtype
    ok = ranges_ok and flips_ok and label_ok
    record(9, "augmentation contract", ok,
           f"angles in [{angles.min():.2f}, {angles.max():.2f}], hflip {hflip:.4f}, vflip {vflip:.4f}, "
           f"factors in [{factors.min():.3f}, {factors.max():.3f}], label sets preserved={label_ok}")
