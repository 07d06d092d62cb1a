"""Acceptance gate: one test per headline criterion, each printing a single PASS/FAIL line."""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from srdgan.data import NOISY_HR, Batch, CorpusConfig, noisy_frame, procedural_scene, synth_burst_corpus
from srdgan.evaluation import bicubic_benchmark, psnr, ssim
from srdgan.imaging import Image, bicubic_downsample, bicubic_upsample, load_image, nearest_downsample, nearest_upsample
from srdgan.losses import LossWeights, discriminator_loss, feature_loss, generator_gan_loss, pixel_loss
from srdgan.networks import (DISCRIMINATOR, H2L_GEN, L2H_GEN, FeatureExtractor, NetworkSpec, build_network,
                             forward_h2l, forward_l2h)
from srdgan.training import (LRSchedule, TrainPlan, init_train_state, joint_generator_loss, lr_at, read_log, run,
                             set_deterministic, train_h2l_step, train_l2h_step)

from oracles import brute_psnr, brute_ssim, dense_bicubic_reference, finite_difference_agreement

F64 = torch.float64


def _set5_dir() -> Path | None:
    for cand in (os.environ.get("SRDGAN_SET5_DIR"), Path(__file__).parent / "data" / "Set5"):
        if cand and Path(cand).is_dir() and list(Path(cand).glob("*.png")):
            return Path(cand)
    return None


def test_metric_fidelity(criterion):
    t0 = time.time()
    set5 = _set5_dir()
    if set5 is not None:
        res = bicubic_benchmark(set5, 4, luma="studio", quantize=True)
        dt = time.time() - t0
        ok = abs(res.psnr_db - 28.42) <= 0.15 and abs(res.ssim - 0.8104) <= 0.005 and dt < 60
        criterion("metric fidelity (Set5 bicubic x4)", ok,
                  f"{res.row()} vs 28.42/0.8104, {dt:.1f}s")
        return
    rng = np.random.default_rng(2024)
    worst_p = worst_s = 0.0
    for _ in range(20):
        a = rng.random((32, 32, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.005, 0.2), a.shape), 0, 1)
        worst_p = max(worst_p, abs(psnr(Image(a), Image(b)) - brute_psnr(a, b)))
        worst_s = max(worst_s, abs(ssim(Image(a), Image(b)) - brute_ssim(a, b)))
    dt = time.time() - t0
    ok = worst_p <= 1e-6 and worst_s <= 1e-6 and dt < 60
    criterion("metric fidelity (Set5 absent: oracle equivalence, 20 pairs 32x32)", ok,
              f"max |dPSNR|={worst_p:.2e} dB, max |dSSIM|={worst_s:.2e}, {dt:.1f}s")


def _gradient_cases(hr_size: int = 8, n: int = 1):
    torch.manual_seed(0)
    lr_size = hr_size // 4
    h2l = build_network(NetworkSpec(H2L_GEN, base_channels=4, num_blocks=1), 1, F64)
    l2h = build_network(NetworkSpec(L2H_GEN, base_channels=2, num_blocks=1, growth_channels=1), 2, F64)
    d_lr = build_network(NetworkSpec(DISCRIMINATOR, base_channels=2, num_blocks=1, input_size=lr_size), 3, F64)
    d_hr = build_network(NetworkSpec(DISCRIMINATOR, base_channels=2, num_blocks=2, input_size=hr_size), 4, F64)
    nets = {"g_h2l": h2l, "g_l2h": l2h, "d_h2l": d_lr, "d_l2h": d_hr}
    fx = FeatureExtractor.random(base_channels=2, dtype=F64)
    hr = torch.rand(n, 3, hr_size, hr_size, dtype=F64)
    noise = 0.05 * torch.randn(n, 1, hr_size, hr_size, dtype=F64)
    lr = torch.rand(n, 3, lr_size, lr_size, dtype=F64)
    unpaired = torch.rand(n, 3, lr_size, lr_size, dtype=F64)
    batch = Batch(lr, hr, noise, unpaired)
    g1, g2, d1, d2 = h2l.module, l2h.module, d_lr.module, d_hr.module
    p = lambda *ms: [q for m in ms for q in m.parameters()]
    fake_lr = g1(hr, noise).detach()
    fake_hr = g2(lr).detach()
    cases = [
        ("pixel/H2L", lambda: pixel_loss(g1(hr, noise), lr), p(g1)),
        ("pixel/L2H", lambda: pixel_loss(g2(lr), hr), p(g2)),
        ("feature/H2L", lambda: feature_loss(g1(hr, noise), lr, fx), p(g1)),
        ("feature/L2H", lambda: feature_loss(g2(lr), hr, fx), p(g2)),
        ("generator-GAN/H2L", lambda: generator_gan_loss(d1(g1(hr, noise))), p(g1, d1)),
        ("generator-GAN/L2H", lambda: generator_gan_loss(d2(g2(lr))), p(g2, d2)),
        ("discriminator/H2L", lambda: discriminator_loss(d1(unpaired), d1(fake_lr)), p(d1)),
        ("discriminator/L2H", lambda: discriminator_loss(d2(hr), d2(fake_hr)), p(d2)),
        ("joint", lambda: joint_generator_loss(g1, g2, d1, d2, fx, batch, LossWeights())[0], p(g1, g2)),
    ]
    return nets, cases


def test_gradient_suite(criterion):
    t0 = time.time()
    nets, cases = _gradient_cases()
    sizes = {k: n.num_parameters() for k, n in nets.items()}
    parts, ok = [], all(v <= 1000 for v in sizes.values())
    for name, fn, params in cases:
        frac, n, worst = finite_difference_agreement(fn, params, eps=1e-4, rel_tol=1e-3)
        ok &= frac >= 0.99
        parts.append(f"{name} {frac:.4f}/{n}")
    dt = time.time() - t0
    ok &= dt < 300
    criterion("gradient suite (central FD eps=1e-4, rel 1e-3, >=99% coords)", ok,
              f"params {sizes}; " + ", ".join(parts) + f"; {dt:.1f}s")


def test_shape_composition(criterion):
    t0 = time.time()
    plan = TrainPlan()
    h2l, l2h = build_network(plan.h2l, 0), build_network(plan.l2h, 1)
    rng = np.random.default_rng(7)
    sizes = [(192, 192)] + [tuple(int(v) for v in 4 * rng.integers(1, 49, 2)) for _ in range(49)]
    bad = []
    with torch.no_grad():
        for h, w in sizes:
            hr = torch.rand(1, 3, h, w)
            lr = forward_h2l(h2l, hr, torch.randn(1, 1, h, w) * 0.05)
            sr = forward_l2h(l2h, lr)
            if tuple(lr.shape[2:]) != (h // 4, w // 4) or tuple(sr.shape[2:]) != (h, w):
                bad.append((h, w))
            if tuple(forward_l2h(l2h, hr[:, :, : h // 4, : w // 4]).shape[2:]) != (h, w):
                bad.append((h, w))
    dt = time.time() - t0
    criterion("shape/composition (50 sizes incl. 192->48->192)", not bad and dt < 60,
              f"{len(sizes)} sizes, {len(bad)} mismatches, {dt:.1f}s")


def _tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).float()[None]


def test_overfit_convergence(criterion):
    set_deterministic(True)
    rng = np.random.default_rng(3)
    t0 = time.time()
    # Stage B: one 32x32 clean pair, regression terms only
    hr = procedural_scene(32, rng)
    batch = Batch(_tensor(hr[::4, ::4]), _tensor(hr))
    plan_b = TrainPlan(stage="L2H", batch_size=1, patch_size=32, weights=LossWeights(alpha6=0),
                       lr_schedule=LRSchedule(1e-3))
    st = init_train_state(plan_b)
    best_b, reached_b = 0.0, None
    for it in range(1, 2001):
        st, _ = train_l2h_step(st, batch)
        if it % 50 == 0:
            with torch.no_grad():
                out = st.nets["g_l2h"].module(batch.lr)[0].clamp(0, 1).double().numpy().transpose(1, 2, 0)
            best_b = max(best_b, psnr(Image(out), Image(hr), y_channel=False))
            if best_b > 30:
                reached_b = it
                break
    t_b = time.time() - t0
    # Stage A: one clean/noisy pair from the signal-dependent noise model, regression terms only
    clean = procedural_scene(32, rng)
    noisy = np.clip(noisy_frame(clean, rng, 0.02, 0.06), 0, 1)
    lr = _tensor(noisy[::4, ::4])
    batch_a = Batch(lr, _tensor(clean), torch.from_numpy(rng.normal(0, 0.05, (1, 1, 32, 32))).float(), lr)
    plan_a = TrainPlan(stage="H2L", batch_size=1, patch_size=32, weights=LossWeights(alpha3=0),
                       lr_schedule=LRSchedule(1e-3))
    st = init_train_state(plan_a)
    best_a, reached_a = math.inf, None
    for it in range(500):
        st, rep = train_h2l_step(st, batch_a)
        best_a = min(best_a, rep.pixel)
        if rep.pixel < 1e-3:
            reached_a = it
            break
    dt = time.time() - t0
    ok = reached_b is not None and reached_a is not None and dt < 900
    criterion("overfit convergence (Stage B PSNR>30 in 2000 it; Stage A pixel<1e-3 in 500 it)", ok,
              f"B: {best_b:.2f} dB at it {reached_b} ({t_b:.0f}s); A: pixel {best_a:.2e} at it {reached_a}; "
              f"{dt:.0f}s total")


def test_adversarial_sanity(criterion, tmp_path):
    t0 = time.time()
    manifest = synth_burst_corpus(CorpusConfig(), 0, tmp_path / "corpus")
    state = run(TrainPlan(stage="H2L", iterations=500), manifest, tmp_path / "run")
    log = read_log(tmp_path / "run" / "logs" / "train_h2l.jsonl")
    finite = len(log) == 500 and all(math.isfinite(r[k]) for r in log for k in ("pixel", "feature", "gan", "total",
                                                                                   "d_loss"))
    d = [r["d_loss"] for r in log]
    d_ok = min(d) > 0 and max(d) < 2 * math.log(2) * 3
    g = state.nets["g_h2l"].module
    bright, var = [], []
    rng = np.random.default_rng(11)
    for e in manifest.select(NOISY_HR):
        hc = load_image(manifest.resolve(e.hr_clean_path))
        noise = rng.normal(0, 0.05, (hc.height, hc.width, 1))
        with torch.no_grad():
            gen = g(_tensor(hc.data), _tensor(noise))[0].double().numpy().transpose(1, 2, 0)
        base = nearest_downsample(hc, 4).data
        y_base = base @ [0.299, 0.587, 0.114]
        y_res = (gen - base) @ [0.299, 0.587, 0.114]
        for i in range(0, y_base.shape[0], 4):
            for j in range(0, y_base.shape[1], 4):
                bright.append(y_base[i:i + 4, j:j + 4].mean())
                var.append(y_res[i:i + 4, j:j + 4].var())
    corr = float(np.corrcoef(bright, var)[0, 1])
    dt = time.time() - t0
    ok = finite and d_ok and min(var) >= 0 and np.mean(var) > 0 and corr > 0 and dt < 1800
    criterion("adversarial sanity (500-it Stage A, desk nets)", ok,
              f"finite={finite}, d_loss in [{min(d):.3f}, {max(d):.3f}] vs (0, {6 * math.log(2):.3f}), "
              f"mean residual var={np.mean(var):.2e}, corr(brightness, var)={corr:.3f}, {dt:.0f}s")


def test_resampling_oracles(criterion):
    t0 = time.time()
    rng = np.random.default_rng(5)
    trips = 0
    for _ in range(100):
        h, w, f = (int(v) for v in (*rng.integers(1, 17, 2), rng.integers(1, 6)))
        img = Image(rng.random((h, w, 3)))
        trips += np.array_equal(nearest_downsample(nearest_upsample(img, f), f).data, img.data)
    worst = 0.0
    for shape, f in [((16, 16), 4), ((12, 8), 2), ((9, 15), 3), ((8, 12), 4)]:
        a = rng.random((*shape, 3))
        down = bicubic_downsample(Image(a), f).data
        worst = max(worst, np.abs(down - dense_bicubic_reference(a, shape[0] // f, shape[1] // f)).max())
        small = a[: shape[0] // f + 1, : shape[1] // f + 1]
        up = bicubic_upsample(Image(small), f).data
        worst = max(worst, np.abs(up - dense_bicubic_reference(small, small.shape[0] * f, small.shape[1] * f)).max())
    dt = time.time() - t0
    criterion("resampling oracles", trips == 100 and worst <= 1e-6 and dt < 60,
              f"nearest round-trip {trips}/100 exact, bicubic max |diff|={worst:.2e}, {dt:.1f}s")


def test_determinism_resumability(criterion, tmp_path):
    t0 = time.time()
    manifest = synth_burst_corpus(CorpusConfig(n_scenes=2, n_unpaired=1, image_size=64, burst_size=4), 1,
                                  tmp_path / "corpus")
    tiny = dict(iterations=8, batch_size=2, patch_size=32, checkpoint_every=4, d_base_channels=8,
                h2l=NetworkSpec(H2L_GEN, base_channels=8, num_blocks=1),
                l2h=NetworkSpec(L2H_GEN, base_channels=8, num_blocks=1, growth_channels=4))
    results = []
    init = {}
    for stage in ("H2L", "L2H", "JOINT"):
        plan = TrainPlan(stage=stage, **tiny)
        logs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{stage}_{tag}"
            run(plan, manifest, out, init=init)
            logs.append((out / "logs" / f"train_{stage.lower()}.jsonl").read_bytes())
        out = tmp_path / f"{stage}_b"
        run(plan, manifest, out, init=init, resume_from=out / "checkpoints" / "train_state_0000004.pt")
        logs.append((out / "logs" / f"train_{stage.lower()}.jsonl").read_bytes())
        results.append((stage, logs[0] == logs[1], logs[0] == logs[2]))
        if stage == "H2L":
            init["g_h2l"] = str(tmp_path / "H2L_a" / "checkpoints" / "g_h2l_final.pt")
        if stage == "L2H":
            init["g_l2h"] = str(tmp_path / "L2H_a" / "checkpoints" / "g_l2h_final.pt")
    dt = time.time() - t0
    ok = all(r and s for _, r, s in results) and dt < 600
    criterion("determinism/resumability (rerun + resume, all stages)", ok,
              ", ".join(f"{st}: rerun={r} resume={s}" for st, r, s in results) + f"; {dt:.1f}s")


def test_schedule_correctness(criterion):
    sched = LRSchedule(1e-4)
    want = [1e-4, 5e-5, 2.5e-5, 1.25e-5, 6.25e-6]
    at = [lr_at(sched, i) for i in (0, 50_000, 100_000, 200_000, 300_000)]
    before = [lr_at(sched, i - 1) for i in (50_000, 100_000, 200_000, 300_000)]
    ok = at == want and before == want[:-1]
    criterion("schedule correctness", ok, f"lr at 0/50k/100k/200k/300k = {at}")
