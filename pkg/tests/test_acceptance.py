"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
import torch

from conftest import numeric_grad, rel_err
from deflare import dataset as ds
from deflare.cli import main, synth_command
from deflare.contrastive import PatchSet, ProjectionHead, info_nce, ldg_loss
from deflare.freq_filter import FilterBank, GDFGBlock, dynamic_filter, irdft2, mix_coefficients, rdft2, spectral_energy
from deflare.losses import frequency_loss, frequency_terms, perceptual_loss, total_loss
from deflare.metrics import high_frequency_log_magnitude, masked_psnr, psnr
from deflare.synthesis import make_sample, procedural_flare, procedural_scene, sample_augment_params
from deflare.trainer import TrainConfig, evaluate_model, padded_predictor, single_threaded, train

DESK = dict(stages=2, base_channels=8, crop=64, batch_size=2, total_iters=500, lr=1e-4)
# the last iterations of a run are averaged: single-step losses jitter with batch and patch draws
FINAL_WINDOW = 20


def _hwc(t):
    return t.permute(1, 2, 0).numpy().astype(np.float64)


# 1 ---------------------------------------------------------------------------


def test_c01_transform_round_trip_and_parseval(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_rt, worst_parseval = 0.0, 0.0
    for _ in range(200):
        c, h, w = int(rng.integers(1, 4)), int(rng.integers(2, 65)), int(rng.integers(2, 65))
        x = torch.from_numpy(rng.standard_normal((c, h, w)).astype(np.float32))
        s = rdft2(x)
        worst_rt = max(worst_rt, (irdft2(s, h, w) - x).abs().max().item())
        e = (x.double() ** 2).sum().item()
        worst_parseval = max(worst_parseval, abs(spectral_energy(s.to(torch.complex128), w).item() - e) / e)
    dt = time.perf_counter() - t0
    ok = worst_rt < 1e-5 and worst_parseval < 1e-5 and dt < 5
    assert verdict(1, ok, f"max round-trip err {worst_rt:.2e}, max Parseval rel err {worst_parseval:.2e}, {dt:.2f}s")


# 2 ---------------------------------------------------------------------------


def test_c02_dynamic_filter_identity(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(2)
    worst = 0.0
    for n in range(1, 9):
        bank = FilterBank(6, 16, 12, n_filters=n)
        with torch.no_grad():
            bank.phi.zero_()
            bank.phi[..., 0] = 1.0
            # arbitrary coefficient network
            bank.w1.weight.normal_(std=2.0)
            bank.w2.weight.normal_(std=2.0)
            bank.norm.weight.normal_()
            bank.norm.bias.normal_()
        x = torch.randn(4, 6, 16, 12)
        worst = max(worst, (dynamic_filter(x, bank) - x).abs().max().item())
        pinned = torch.distributions.Dirichlet(torch.ones(n)).sample((4, 6))
        worst = max(worst, (dynamic_filter(x, bank, pinned) - x).abs().max().item())
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and dt < 1
    assert verdict(2, ok, f"max |filter(x) - x| {worst:.2e} over N=1..8, {dt:.2f}s")


# 3 ---------------------------------------------------------------------------


def test_c03_coefficient_simplex(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(3)
    worst, in_range = 0.0, True
    for n in range(1, 9):
        bank = FilterBank(5, 8, 8, n_filters=n)
        with torch.no_grad():
            bank.w1.weight.normal_(std=1.0)
            bank.w2.weight.normal_(std=1.0)
        x = torch.randn(1000, 5, 8, 8) * torch.logspace(-2, 2, 1000)[:, None, None, None]
        t = mix_coefficients(x, bank)
        worst = max(worst, (t.sum(-1) - 1).abs().max().item())
        in_range &= bool(((t >= 0) & (t <= 1)).all())
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and in_range and dt < 5
    assert verdict(3, ok, f"max |row sum - 1| {worst:.2e} over 1000 inputs x N=1..8, {dt:.2f}s")


# 4 ---------------------------------------------------------------------------


def test_c04_gradient_oracles(verdict, float64):
    t0 = time.perf_counter()
    torch.manual_seed(4)
    errs = {}

    block = GDFGBlock(4, 8, 8)
    with torch.no_grad():
        for p in block.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.randn(1, 4, 8, 8, requires_grad=True)
    wts = torch.randn(1, 4, 8, 8)
    f = lambda v: (block(v) * wts).sum()  # noqa: E731
    f(x).backward()
    errs["gdfg_block"] = rel_err(x.grad, numeric_grad(f, x.detach().clone()))

    pred, target = torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 8)
    d = pred - target
    pred = (target + torch.where(d.abs() < 1e-2, d + 1e-2 * torch.sign(d), d)).requires_grad_(True)
    perceptual_loss(pred, target).backward()
    errs["perceptual_loss"] = rel_err(pred.grad, numeric_grad(lambda v: perceptual_loss(v, target), pred.detach().clone()))
    pred.grad = None
    frequency_loss(pred, target).backward()
    errs["frequency_loss"] = rel_err(pred.grad, numeric_grad(lambda v: frequency_loss(v, target), pred.detach().clone()))

    head = ProjectionHead(4, 2, 16)
    q = torch.rand(4, 2, 2, requires_grad=True)
    pos, negs = torch.rand(4, 2, 2), torch.rand(8, 4, 2, 2)
    g = lambda v: ldg_loss(PatchSet(v, pos, negs, 2, (0, 0)), head, 0.07)  # noqa: E731
    g(q).backward()
    errs["ldg_loss"] = rel_err(q.grad, numeric_grad(g, q.detach().clone()))

    dt = time.perf_counter() - t0
    ok = all(e < 1e-3 for e in errs.values()) and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert verdict(4, ok, f"rel err {detail}, {dt:.2f}s")


# 5 ---------------------------------------------------------------------------


def test_c05_infonce_closed_forms(verdict):
    t0 = time.perf_counter()
    v = torch.tensor([0.6, 0.8, 0.0], dtype=torch.float64)
    other = torch.tensor([0.0, 0.6, 0.8], dtype=torch.float64)
    eq_err = max(abs(info_nce(v, other, other.expand(m, 3), 0.07).item() - math.log(1 + m)) for m in (1, 4, 16))
    u = torch.tensor([1.0, 0.0], dtype=torch.float64)
    sep = info_nce(u, u, -u[None], 0.07).item()
    dt = time.perf_counter() - t0
    ok = eq_err < 1e-9 and sep < 1e-10 and dt < 1
    assert verdict(5, ok, f"|loss - ln(1+M)| {eq_err:.1e} for M in 1,4,16; separated case {sep:.1e}; {dt:.3f}s")


# 6 ---------------------------------------------------------------------------


def test_c06_frequency_loss_oracles(verdict):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(6)
    target = torch.rand(3, 32, 32, generator=g, dtype=torch.float64) + 0.05
    same = frequency_loss(target, target).item()
    amp_shift, phase_shift = (t.item() for t in frequency_terms(torch.roll(target, 1, -2), target))
    _, phase_scale = (t.item() for t in frequency_terms(2 * target, target))
    dt = time.perf_counter() - t0
    ok = same == 0 and amp_shift < 1e-6 and phase_shift > 0 and phase_scale < 1e-6 and dt < 5
    assert verdict(
        6,
        ok,
        f"identical {same:.1e}; shift amp {amp_shift:.1e} phase {phase_shift:.3f}; scaling phase {phase_scale:.1e}; {dt:.2f}s",
    )


# 7 ---------------------------------------------------------------------------


def test_c07_synthesis_determinism_and_ranges(verdict):
    t0 = time.perf_counter()
    identical = True
    for seed in range(10):
        scene, asset = procedural_scene(seed, 64), procedural_flare(seed, 64)
        a, b = make_sample(scene, asset, seed), make_sample(scene, asset, seed)
        identical &= all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("input", "reference", "flare"))
        identical &= all(np.array_equal(a.masks[k], b.masks[k]) for k in a.masks)
    rng = np.random.default_rng(7)
    params = [sample_augment_params(rng) for _ in range(10_000)]
    bad = sum(bool(p.out_of_range()) for p in params)
    gamma_mean = float(np.mean([p.gamma for p in params]))
    dt = time.perf_counter() - t0
    ok = identical and bad == 0 and 1.99 <= gamma_mean <= 2.01 and dt < 120
    assert verdict(7, ok, f"bit-identical {identical}; {bad}/10000 out of range; gamma mean {gamma_mean:.4f}; {dt:.1f}s")


# 8 ---------------------------------------------------------------------------


def test_c08_masked_metrics(verdict):
    rng = np.random.default_rng(8)
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    full_err = abs(masked_psnr(a, b, np.ones((32, 32), bool)) - psnr(a, b))
    pred, target = np.zeros((4, 4)), np.zeros((4, 4))
    pred[1:3, 1:3] = [[0.1, 0.2], [0.3, 0.4]]
    mask = np.zeros((4, 4), bool)
    mask[1:3, 1:3] = True
    hand = 10 * math.log10(1 / ((0.01 + 0.04 + 0.09 + 0.16) / 4))
    hand_err = abs(masked_psnr(pred, target, mask) - hand)
    ok = full_err < 1e-9 and hand_err < 1e-9
    assert verdict(8, ok, f"full-mask diff {full_err:.1e}; 4-pixel case diff {hand_err:.1e}")


# 9 ---------------------------------------------------------------------------


def test_c09_spectral_signature(verdict):
    t0 = time.perf_counter()
    linear_wins, display_wins = 0, 0
    for seed in range(50):
        s = make_sample(procedural_scene(seed, 128), procedural_flare(1000 + seed, 128), seed)
        # the flare model is additive in linear light, so the pair is compared there
        linear_wins += high_frequency_log_magnitude(s.linear["input"]) > high_frequency_log_magnitude(
            s.linear["reference"]
        )
        display_wins += high_frequency_log_magnitude(s.input) > high_frequency_log_magnitude(s.reference)
    dt = time.perf_counter() - t0
    ok = linear_wins >= 45 and dt < 60
    assert verdict(
        9,
        ok,
        f"input > reference in {linear_wins}/50 linear-light pairs "
        f"(display-encoded: {display_wins}/50), {dt:.1f}s",
    )


# 10 / 11 ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    synth_command(4, root, seed=10, resolution=64)
    return ds.load(root)


@pytest.fixture(scope="module")
def ablation_data(tmp_path_factory):
    train_root = tmp_path_factory.mktemp("ablation_train")
    held_root = tmp_path_factory.mktemp("ablation_held")
    synth_command(16, train_root, seed=11, resolution=64)
    synth_command(8, held_root, seed=12, resolution=64)
    return ds.load(train_root), ds.load(held_root)


def _psnr_pairs(predict, data):
    restored, inputs = [], []
    for i in range(len(data)):
        out = predict(data.input[i : i + 1])[0]
        restored.append(psnr(_hwc(out), _hwc(data.gt[i])))
        inputs.append(psnr(_hwc(data.input[i].clamp(0, 1)), _hwc(data.gt[i])))
    return np.array(restored), np.array(inputs)


def _reconstruction_objective(model, data, cfg):
    """alpha * perceptual + lambda * frequency over every training pair, without sampling noise."""
    w = cfg.weights
    vals = []
    with torch.no_grad(), single_threaded():
        for i in range(len(data)):
            restored, flare = model(data.input[i : i + 1])
            _, parts = total_loss(restored, flare, data.gt[i : i + 1], data.flare[i : i + 1], 0.0, w)
            vals.append(w.alpha * parts["perceptual"].item() + w.lam * parts["frequency"].item())
    return float(np.mean(vals))


@pytest.mark.slow
def test_c10_overfit(verdict, overfit_data):
    t0 = time.perf_counter()
    cfg = TrainConfig(**DESK, seed=0)
    res = train(cfg, overfit_data)
    first = res.log[0]["total"]
    final = float(np.mean([r["total"] for r in res.log[-FINAL_WINDOW:]]))
    reduction = 1 - final / first
    restored, inputs = _psnr_pairs(padded_predictor(res.model), overfit_data)
    gain = float(restored.mean() - inputs.mean())
    dt = time.perf_counter() - t0
    ok = reduction >= 0.9 and gain >= 5 and dt < 600
    assert verdict(
        10,
        ok,
        f"loss {first:.3f} -> {final:.3f} ({100 * reduction:.1f}% reduction, need 90%); "
        f"PSNR restored {restored.mean():.2f} vs input {inputs.mean():.2f} dB "
        f"(gain {gain:+.2f}, need +5); {dt:.0f}s",
    )


@pytest.mark.slow
def test_c11_ablation_direction(verdict, ablation_data):
    t0 = time.perf_counter()
    train_data, held = ablation_data
    runs = {}
    for name, kw in {
        "full": {},
        "no_gdfg": {"gdfg_enabled": False},
        "no_ldgm": {"ldgm_enabled": False},
    }.items():
        cfg = TrainConfig(**DESK, seed=0, **kw)
        res = train(cfg, train_data)
        report = evaluate_model(padded_predictor(res.model), held)
        runs[name] = {
            "g_psnr": report["aggregate"]["g_psnr"],
            "objective": _reconstruction_objective(res.model, train_data, cfg),
        }
    gdfg_ok = runs["full"]["g_psnr"] >= runs["no_gdfg"]["g_psnr"]
    ldgm_ok = runs["full"]["objective"] <= runs["no_ldgm"]["objective"]
    dt = time.perf_counter() - t0
    ok = gdfg_ok and ldgm_ok and dt < 45 * 60
    assert verdict(
        11,
        ok,
        f"held-out G-PSNR full {runs['full']['g_psnr']:.3f} vs no-GDFG {runs['no_gdfg']['g_psnr']:.3f} dB; "
        f"final training objective LDGM on {runs['full']['objective']:.4f} vs off {runs['no_ldgm']['objective']:.4f}; "
        f"{dt:.0f}s",
    )


# 12 --------------------------------------------------------------------------


def test_c12_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert main(["synth", "--n", "4", "--out", str(data), "--seed", "12", "--size", "64"]) == 0
    cfg = tmp_path / "desk.txt"
    cfg.write_text("total_iters = 30\nseed = 12\n")
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / run)]) == 0
    same_log = (tmp_path / "a" / "loss_log.csv").read_bytes() == (tmp_path / "b" / "loss_log.csv").read_bytes()
    same_ckpt = (tmp_path / "a" / "checkpoint.pt").read_bytes() == (tmp_path / "b" / "checkpoint.pt").read_bytes()
    dt = time.perf_counter() - t0
    ok = same_log and same_ckpt
    assert verdict(12, ok, f"loss logs identical {same_log}; checkpoints identical {same_ckpt}; {dt:.1f}s")
