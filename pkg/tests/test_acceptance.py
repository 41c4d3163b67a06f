"""Acceptance suite: one test per criterion, each reporting PASS or FAIL.

Criteria 7 and 8 share one desk-scale experiment (a trained MSDSR model and
five seeded evaluations); it runs once per session and dominates the runtime.
"""

import dataclasses
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import gradient_check, random_net, ssim_bruteforce
from msdsr.baselines import linear_upsample_z, nn_upsample_z
from msdsr.config import config_from_dict
from msdsr.denoiser.net import NetConfig, TinyDenoiserNet
from msdsr.denoiser.oracle import GaussianOracleDenoiser
from msdsr.diffusion import (DiffusionConfig, diffusion_restorer, q_sample, restore_batch, superresolve_volume)
from msdsr.experiments import Models, eval_3d, generate_data, load_dataset, superresolve, train
from msdsr.metrics import (GaussianStats, SliceFidReport, axis_slices, fid, fit_gaussian, frechet_distance,
                           image_stats, make_embedder, slice_fid, ssim)
from msdsr.volume import RowMask, Volume, downsample_z, sample_random_mask

SEEDS = range(5)


def verdict(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# --- 1. forward-process marginals --------------------------------------------

def test_criterion_1_forward_marginals():
    start = time.process_time()
    sched = DiffusionConfig(timesteps=200).build_schedule()
    rng = np.random.default_rng(1)
    draws = 100_000
    worst_mean, worst_var = 0.0, 0.0
    ok = True
    for _ in range(10):
        x0 = rng.random((1, 4, 4))
        t = int(rng.integers(1, sched.T + 1))
        abar = sched.alpha_bars[t]
        xt = q_sample(np.broadcast_to(x0, (draws,) + x0.shape), t, rng.standard_normal((draws,) + x0.shape), sched)
        mean_err = np.abs(xt.mean(axis=0) - np.sqrt(abar) * x0).max() / (4 * np.sqrt((1 - abar) / draws))
        var_err = np.abs(xt.var(axis=0) / (1 - abar) - 1).max() / 0.03
        worst_mean, worst_var = max(worst_mean, mean_err), max(worst_var, var_err)
        ok &= mean_err <= 1 and var_err <= 1
    elapsed = time.process_time() - start
    verdict(1, ok and elapsed < 60,
            f"worst mean error {worst_mean:.2f} and variance error {worst_var:.2f} of tolerance, {elapsed:.0f} s")


# --- 2. conditioned-row exactness --------------------------------------------

def test_criterion_2_conditioned_rows_exact():
    start = time.process_time()
    n = 16
    cfg = DiffusionConfig(timesteps=50)
    sched = cfg.build_schedule()
    ncfg = NetConfig(3, 3, 8, 2, 4, dtype="float64")
    net = TinyDenoiserNet(random_net(ncfg, 0), ncfg)
    rng = np.random.default_rng(2)
    bad = 0
    for trial in range(100):
        mask = sample_random_mask(n, 1, n - 1, rng)
        obs = rng.random((1, 3, mask.length, n))
        out = restore_batch(net, obs, mask, sched, [np.random.default_rng([trial, 2])])
        bad += out[:, :, list(mask.indices)].tobytes() != obs.tobytes()
    restorer = diffusion_restorer(net, cfg, sched)
    planes_ok = True
    for factor in (2, 4, 8):
        low = Volume(rng.random((3, n, n, n // factor), dtype=np.float32))
        high = superresolve_volume(low, restorer, seed=factor)
        planes_ok &= high.volume.data[..., ::factor].tobytes() == low.data.tobytes()
    elapsed = time.process_time() - start
    verdict(2, bad == 0 and planes_ok and elapsed < 300,
            f"{100 - bad}/100 restorations exact, XY planes preserved: {planes_ok}, {elapsed:.0f} s")


# --- 3. Gaussian-oracle end-to-end -------------------------------------------

def test_criterion_3_gaussian_oracle():
    start = time.process_time()
    n, runs = 16, 1000
    sched = DiffusionConfig(timesteps=200).build_schedule()
    oracle = GaussianOracleDenoiser(0.5, 0.01, sched)
    rng = np.random.default_rng(3)
    mask = RowMask(n, (int(rng.integers(n)),))
    obs = rng.normal(0.5, 0.1, (runs, 1, 1, n))
    rngs = [np.random.default_rng([3, i]) for i in range(runs)]
    out = restore_batch(oracle, obs, mask, sched, rngs)
    free = np.delete(out, mask.indices, axis=2)
    mean, var = free.mean(), free.var()
    elapsed = time.process_time() - start
    ok = abs(mean - 0.5) <= 0.02 and abs(var / 0.01 - 1) <= 0.2 and elapsed < 600
    verdict(3, ok, f"free-pixel mean {mean:.4f}, variance {var:.5f}, {elapsed:.0f} s")


# --- 4. gradient correctness -------------------------------------------------

def test_criterion_4_gradients():
    start = time.process_time()
    worst = 0.0
    for seed in range(5):
        cfg = NetConfig(3, 3, 4, 2, 3, mask_channel=seed % 2 == 1, dtype="float64")
        worst = max(worst, max(gradient_check(cfg, seed).values()))
    elapsed = time.process_time() - start
    verdict(4, worst < 1e-4 and elapsed < 300, f"worst relative error {worst:.2e} over 5 inputs, {elapsed:.0f} s")


# --- 5. metric oracles -------------------------------------------------------

def test_criterion_5_metric_oracles():
    start = time.process_time()
    rng = np.random.default_rng(5)
    worst_fd = 0.0
    for _ in range(1000):
        m1, m2 = rng.normal(0, 2, 2)
        s1, s2 = rng.uniform(0.01, 3, 2)
        p = GaussianStats(np.array([m1]), np.array([[s1 ** 2]]), 2)
        q = GaussianStats(np.array([m2]), np.array([[s2 ** 2]]), 2)
        worst_fd = max(worst_fd, abs(frechet_distance(p, q) - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))
    imgs = rng.random((40, 3, 8, 8))
    emb = make_embedder("randconv", 3, 0, reference=imgs)
    self_fid = fid(imgs, imgs, emb)
    vols = [Volume(rng.random((3, 8, 8, 8), dtype=np.float32)) for _ in range(4)]
    rep = slice_fid(imgs, vols, emb)
    aggregator = rep.slice_fid == (rep.fid_xy + rep.fid_xz + rep.fid_yz) / 3
    worst_ssim = max(abs(ssim(a, b) - ssim_bruteforce(a, b))
                     for a, b in (rng.random((2, 3, 8, 8)) for _ in range(10)))
    elapsed = time.process_time() - start
    ok = worst_fd < 1e-8 and self_fid < 1e-6 and aggregator and worst_ssim < 1e-8 and elapsed < 60
    verdict(5, ok, f"Frechet 1D error {worst_fd:.1e}, FID(A, A) {self_fid:.1e}, "
                   f"aggregator exact: {aggregator}, SSIM error {worst_ssim:.1e}")


# --- 6. baseline exactness ---------------------------------------------------

def test_criterion_6_baselines():
    start = time.process_time()
    rng = np.random.default_rng(6)
    keeps, exact = True, 0.0
    for factor in (2, 4, 8):
        low = Volume(rng.random((3, 16, 16, 16 // factor), dtype=np.float32))
        for up in (nn_upsample_z(low, factor), linear_upsample_z(low, factor)):
            keeps &= up.data[..., ::factor].tobytes() == low.data.tobytes()
        a = rng.uniform(0.3, 0.7, (3, 16, 16, 1))
        slope = rng.uniform(-0.25, 0.25, (3, 16, 16, 1)) / 16
        v = Volume((a + slope * np.arange(16)).astype(np.float32))
        exact = max(exact, float(np.abs(linear_upsample_z(downsample_z(v, factor), factor).data - v.data).max()))
    elapsed = time.process_time() - start
    verdict(6, keeps and exact < 1e-6 and elapsed < 60,
            f"observed planes kept: {keeps}, linear-z max error on z-linear volumes {exact:.1e}")


# --- 7 and 8. desk-scale trend experiment ------------------------------------

TREND_CONFIG = {
    "seed": 0,
    "data": {"n": 32, "n_train": 40, "n_val": 20, "crops": 4096},
    "diffusion": {"timesteps": 200},
    "model": {"features": 16, "blocks": 2, "time_freqs": 32, "mask_channel": True},
    "train": {"steps": 6000, "batch_size": 32, "lr": 1e-3, "checkpoint_every": 6000},
    "eval": {"factors": [4], "methods": ["nn", "linear", "msdsr"], "n_volumes": 20},
}


@pytest.fixture(scope="session")
def trend(tmp_path_factory):
    out = tmp_path_factory.mktemp("trend")
    cfg = config_from_dict(dict(TREND_CONFIG, out_dir=str(out)))
    generate_data(cfg)
    clock = time.process_time()
    trained = train(cfg, "msdsr")
    train_seconds = time.process_time() - clock
    models = Models(cfg, {"msdsr": trained.net})
    volumes = load_dataset(cfg, "val")[:cfg.eval.n_volumes]
    reference = axis_slices(load_dataset(cfg, "train"), "XY")
    embedder = make_embedder("randconv", cfg.data.channels, reference=reference)
    ref_stats = image_stats(reference, embedder)
    lows = [downsample_z(v, 4) for v in volumes]
    fixed = {name: slice_fid(ref_stats, [fn(low, 4) for low in lows], embedder)
             for name, fn in (("nn", nn_upsample_z), ("linear", linear_upsample_z))}
    per_seed = []
    for seed in SEEDS:
        outs = {"msdsr": [], "xz": [], "yz": []}
        for i, low in enumerate(lows):
            parts = {}
            outs["msdsr"].append(superresolve(cfg, low, "msdsr", models, [seed, i], parts=parts))
            outs["xz"].append(parts["xz"])
            outs["yz"].append(parts["yz"])
        reports = {name: slice_fid(ref_stats, vols, embedder) for name, vols in outs.items()}
        per_seed.append({**fixed, **reports})
        print(f"seed {seed}: " + ", ".join(f"{k} {r.slice_fid:.2f}" for k, r in per_seed[-1].items()))
    return {"train_seconds": train_seconds, "reports": per_seed, "volumes": len(volumes)}


@pytest.mark.slow
def test_criterion_7_trend(trend):
    wins = [r["msdsr"].slice_fid < min(r["nn"].slice_fid, r["linear"].slice_fid) for r in trend["reports"]]
    scores = "; ".join(f"msdsr {r['msdsr'].slice_fid:.1f} nn {r['nn'].slice_fid:.1f} "
                       f"linear {r['linear'].slice_fid:.1f}" for r in trend["reports"])
    ok = sum(wins) >= 4 and trend["train_seconds"] <= 1800 and trend["volumes"] == 20
    verdict(7, ok, f"MSDSR best in {sum(wins)}/5 seeds, training {trend['train_seconds']:.0f} s CPU ({scores})")


@pytest.mark.slow
def test_criterion_8_direction_ablation(trend):
    wins = []
    for r in trend["reports"]:
        avg: SliceFidReport = r["msdsr"]
        wins.append(r["xz"].fid_yz > avg.fid_yz and r["yz"].fid_xz > avg.fid_xz)
    detail = "; ".join(f"YZ {r['xz'].fid_yz:.1f} vs {r['msdsr'].fid_yz:.1f}, XZ {r['yz'].fid_xz:.1f} vs "
                       f"{r['msdsr'].fid_xz:.1f}" for r in trend["reports"])
    verdict(8, sum(wins) >= 4, f"single-direction worse on its orthogonal plane in {sum(wins)}/5 seeds ({detail})")


# --- 9. determinism ----------------------------------------------------------

TINY_CONFIG = {
    "data": {"n": 16, "n_train": 4, "n_val": 2, "crops": 64},
    "diffusion": {"timesteps": 20},
    "model": {"features": 8, "blocks": 1, "time_freqs": 8},
    "train": {"steps": 20, "batch_size": 8, "l_min": 2, "l_max": 8, "checkpoint_every": 20},
    "eval": {"factors": [2, 4], "n_volumes": 2},
}


def test_criterion_9_thread_determinism(tmp_path):
    results = {}
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        cfg = config_from_dict(dict(TINY_CONFIG, out_dir=str(out), threads=threads))
        generate_data(cfg)
        for model in ("msdsr", "ms-regression", "e2e"):
            train(cfg, model)
        models = Models(cfg)
        low = downsample_z(load_dataset(cfg, "val")[0], 4)
        vols = [superresolve(cfg, low, m, models, [cfg.seed, 0], threads=threads).data.tobytes()
                for m in cfg.eval.methods]
        records = eval_3d(cfg, models=models)
        results[threads] = (vols, records, cfg.digest())
    same_vols = results[1][0] == results[8][0]
    same_records = results[1][1] == results[8][1]
    verdict(9, same_vols and same_records and results[1][2] == results[8][2],
            f"volumes bit-identical: {same_vols}, metric reports identical: {same_records}")
