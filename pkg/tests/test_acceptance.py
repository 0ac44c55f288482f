"""Acceptance gate: one test per release criterion, one printed verdict each.

Fast algebra/oracle checks come first; the trend and end-to-end checks run on
the pretrained 32x32 backend against the shared fixture sessions (conftest).
Protocol constants pinned during bring-up are collected at the top.
"""

import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cfedit.abduction import abduct_delta, abduct_u, regression_loss
from cfedit.backend import BackendConfig, ToyBackend
from cfedit.corpus import render_caption
from cfedit.editor import EditRequest, multi_seed, predict_edit, reconstruct
from cfedit.evalharness import fidelity_curve, spearman
from cfedit.lora import LoraFactorPair, conv_adapted, gamma_schedule, load_adapter
from cfedit.schedule import NoiseSchedule, ddim_step, forward_noise, sampling_timesteps
from cfedit.session import AbductionConfig, EditSession

# Pinned during fixture bring-up: observed end-to-end off-object MSE stayed in
# [0.004, 0.066] across seeds, so anything past 0.08 means the edit damaged
# regions it should have left alone.
OFF_OBJECT_MSE_MAX = 0.08
# One sampled image per (checkpoint | eta | aux-arm) is sampler-noise limited,
# so trend criteria score each seed's own curve and average the per-seed rank
# correlations (paired design); these are the pinned seed grids.
TREND_SEEDS = (0, 1, 2)
ETA_GRID = (0.2, 0.4, 0.6, 0.8)
ETA_SEEDS = range(6)
AUX_SEEDS = range(6)
EDIT_STEPS = 50


def verdict(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_schedule_identities():
    assert gamma_schedule(0, 1000, 0.3) == 1.0
    assert gamma_schedule(1000, 1000, 0.3) == 0.3
    rng = np.random.default_rng(0)
    for _ in range(100):
        eta = float(rng.uniform(0.05, 1.0))
        T = int(rng.integers(10, 2000))
        ts = sorted(rng.integers(0, T + 1, size=8))
        vals = [gamma_schedule(int(t), T, eta) for t in ts]
        assert all(eta <= v <= 1.0 + 1e-12 for v in vals)
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
    verdict("schedule identities", True,
            "gamma(0)=1 and gamma(T)=eta exact; in-range and non-increasing "
            "on 100 random (eta, t) draws")


@pytest.mark.parametrize("target,placement", [
    ("generator", "attention_conv_ffn"),
    ("generator", "attention_only"),
    ("text_encoder", "attention_only"),
])
def test_adapter_transparency(backend32, target, placement):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 32, 32, generator=g)
    adapter = backend32.init_adapter(target, rank=4, placement=placement, seed=0)
    text = backend32.encode_text("a red circle")
    if target == "generator":
        base = backend32.predict_noise(x, 50, text)
        adapted = backend32.predict_noise(x, 50, text, u=adapter, gamma=1.0)
    else:
        base = text
        adapted = backend32.encode_text("a red circle", delta=adapter, beta=1.0)
    rel = float((adapted - base).norm() / (base.norm() + 1e-12))
    verdict("adapter transparency", rel <= 1e-7,
            f"{target}/{placement}: B=0 forward within rel={rel:.2e} (<= 1e-7)")


def test_conv_lora_dense_oracle():
    worst = 0.0
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        W = torch.randn(4, 4, 3, 3, generator=g)
        bias = torch.randn(4, generator=g)
        A = torch.randn(4, 2, generator=g)
        B = torch.randn(2, 4 * 9, generator=g)
        x = torch.randn(2, 4, 8, 8, generator=g)
        s = float(torch.rand(1, generator=g)) + 0.1
        pair = LoraFactorPair(A=A, B=B, layer_path="conv")
        factored = conv_adapted(x, W, bias, pair, s, padding=1)
        dense = F.conv2d(x, W + s * (A @ B).reshape(4, 4, 3, 3), bias, padding=1)
        worst = max(worst, float((factored - dense).norm() / dense.norm()))
    verdict("conv low-rank dense oracle", worst <= 1e-5,
            f"factored conv vs dense kernel, 20 random cases, worst rel err={worst:.2e}")


def test_ddim_closed_forms():
    sched = NoiseSchedule.linear(T_max=1000)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(3, 8, 8, generator=g)
    eps = torch.randn(3, 8, 8, generator=g)
    ts = sampling_timesteps(sched.T_max, 50)
    worst_zero = worst_perfect = 0.0
    for t, t_prev in zip(ts[:-1], ts[1:]):
        x_t = forward_noise(x0, t, eps, sched)
        ratio = (sched.alpha_bar(t_prev) / sched.alpha_bar(t)) ** 0.5
        zero = ddim_step(x_t, t, torch.zeros_like(x_t), sched, t_prev=t_prev)
        worst_zero = max(worst_zero, float((zero - ratio * x_t).abs().max()))
        stepped = ddim_step(x_t, t, eps, sched, t_prev=t_prev)
        target = forward_noise(x0, t_prev, eps, sched)
        worst_perfect = max(worst_perfect, float((stepped - target).abs().max()))
    verdict("ddim closed forms", worst_zero <= 1e-6 and worst_perfect <= 1e-5,
            f"eps=0 ratio form within {worst_zero:.2e} (<=1e-6); perfect-predictor "
            f"step within {worst_perfect:.2e} (<=1e-5) over a 50-step stride")


def test_gradient_check(spec32):
    cfg = BackendConfig(channels=(16, 32, 64), resolution=32, T_max=100,
                        vocab=spec32.vocabulary(), seed=3)
    backend = ToyBackend(cfg)
    backend.noise_net.double()
    backend.text_encoder.double()
    x0 = backend.encode_image(
        torch.from_numpy(render_caption(spec32, "a red circle"))).double()
    adapter = backend.init_adapter("generator", rank=2, seed=0)
    g = torch.Generator().manual_seed(11)
    for pair in adapter.pairs.values():
        pair.A = pair.A.double().normal_(0, 0.05, generator=g)
        pair.B = pair.B.double().normal_(0, 0.05, generator=g)
    handle = backend.install(adapter, "u", trainable=True)
    try:
        t, eps = 37, torch.randn(x0.shape, generator=g).double()
        loss = regression_loss(backend, backend.sched, x0, "a red circle", t, eps)
        params = handle.parameters()
        grads = torch.autograd.grad(loss, params)
        rng = np.random.default_rng(0)
        h = 1e-5
        checked, worst = 0, 0.0
        while checked < 10:
            pi = int(rng.integers(len(params)))
            param, grad = params[pi], grads[pi]
            idx = tuple(int(rng.integers(s)) for s in param.shape)
            if abs(float(grad[idx])) < 1e-8:
                continue
            with torch.no_grad():
                orig = float(param[idx])
                param[idx] = orig + h
                up = float(regression_loss(backend, backend.sched, x0,
                                           "a red circle", t, eps))
                param[idx] = orig - h
                down = float(regression_loss(backend, backend.sched, x0,
                                             "a red circle", t, eps))
                param[idx] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - float(grad[idx])) / max(abs(fd), 1e-8))
            checked += 1
    finally:
        handle.remove()
    verdict("analytic vs finite-difference gradients", worst <= 1e-3,
            f"10 random adapter coordinates, worst rel err={worst:.2e} (<=1e-3)")


def test_freeze_discipline(tiny_backend, fixture_session, tmp_path):
    from conftest import make_tiny_session
    full_ok = fixture_session["checksum_before"] == fixture_session["checksum_after"]

    session = make_tiny_session(tmp_path, tiny_backend, iterations=4)
    before = tiny_backend.state_checksum()
    abduct_u(session, tiny_backend)
    u_bytes = hashlib.sha256(Path(session.adapter_path("u")).read_bytes()).hexdigest()
    abduct_delta(session, tiny_backend)
    u_after = hashlib.sha256(Path(session.adapter_path("u")).read_bytes()).hexdigest()
    tiny_ok = tiny_backend.state_checksum() == before and u_bytes == u_after
    verdict("freeze discipline", full_ok and tiny_ok,
            "host weights unchanged across the full fixture abduction; host and "
            "frozen generator adapter unchanged across a fresh two-stage run")


def test_beta_endpoint_contract(backend32, fixture_session):
    session = fixture_session["session"]
    via_edit = predict_edit(session, backend32,
                            EditRequest(session_id=session.id, beta=-1.0, seed=3))
    via_recon = reconstruct(session, backend32, seed=3)
    recon_ok = Path(via_edit.png_path).read_bytes() == Path(via_recon.png_path).read_bytes()

    # beta = 0: same sampler run with the text adapter absent entirely
    zero = predict_edit(session, backend32,
                        EditRequest(session_id=session.id, beta=0.0, seed=3))
    u = load_adapter(session.adapter_path("u"))
    sched = backend32.sched
    with torch.no_grad():
        text = backend32.encode_text(session.p_prime)
    gen = torch.Generator().manual_seed(3)
    x_T = torch.randn(3, 32, 32, generator=gen)
    handle = backend32.install(u, "u")
    try:
        def predictor(x, t):
            handle.set_scale(gamma_schedule(t, sched.T_max, session.config.eta))
            with torch.no_grad():
                return backend32.noise_net(x[None], torch.tensor([t]), text)[0]
        from cfedit.schedule import ddim_sample
        x0 = ddim_sample(x_T, 30, predictor, sched)
    finally:
        handle.remove()
    zero_ok = torch.equal(zero.image, backend32.decode_image(x0))
    verdict("beta endpoint contract", recon_ok and zero_ok,
            "beta=-1 byte-identical to the reconstruction path; "
            "beta=0 equals the adapter-free text path exactly")


def test_abduction2_dominance(backend32, fixture_session):
    session = fixture_session["session"]
    x0 = backend32.encode_image(session.source_image())
    u = load_adapter(session.adapter_path("u"))
    delta = load_adapter(session.adapter_path("delta"))
    g = torch.Generator().manual_seed(99)
    with_delta = without = 0.0
    handle = backend32.install(u, "u")
    try:
        for _ in range(16):
            t = int(torch.randint(0, backend32.sched.T_max, (1,), generator=g))
            eps = torch.randn(x0.shape, generator=g)
            handle.set_scale(gamma_schedule(t, backend32.sched.T_max, session.config.eta))
            x_t = forward_noise(x0, t, eps, backend32.sched)
            with torch.no_grad():
                tw = backend32.encode_text(session.p_prime, delta=delta, beta=-1.0)
                to = backend32.encode_text(session.p_prime)
                with_delta += float(((eps - backend32.noise_net(
                    x_t[None], torch.tensor([t]), tw)[0]) ** 2).mean())
                without += float(((eps - backend32.noise_net(
                    x_t[None], torch.tensor([t]), to)[0]) ** 2).mean())
    finally:
        handle.remove()
    margin = (without - with_delta) / 16
    verdict("second-stage dominance", margin > 0,
            f"regression loss margin without-vs-with text adapter = {margin:+.5f} (>0)")


def test_editability_fidelity_trend(backend32, spec32, trend_sessions):
    checkpoints = [250, 500, 1000]
    rho_img, rho_txt = [], []
    for seed, session in zip(TREND_SEEDS, trend_sessions):
        rows = fidelity_curve(session, backend32, spec32, seed=seed, steps=EDIT_STEPS)
        rho_img.append(spearman(checkpoints, [r["image_alignment"] for r in rows]))
        rho_txt.append(spearman(checkpoints, [r["text_alignment"] for r in rows]))
    mi, mt = sum(rho_img) / len(rho_img), sum(rho_txt) / len(rho_txt)
    verdict("fidelity/editability vs adapter iterations", mi >= 0 and mt <= 0,
            f"mean over {len(trend_sessions)} seeds: image-alignment rho={mi:+.3f} "
            f"(>=0), text-alignment rho={mt:+.3f} (<=0) across checkpoints {checkpoints}")


def test_beta_sweep_trend(backend32, spec32, fixture_session):
    from cfedit.probe import color_affinity
    session = fixture_session["session"]
    betas = [-1.0, -0.5, 0.0, 0.5, 1.0]
    affs = [color_affinity(
        predict_edit(session, backend32,
                     EditRequest(session_id=session.id, beta=b, seed=0,
                                 steps=EDIT_STEPS)).image.numpy(), "blue", spec32)
        for b in betas]
    rho = spearman(betas, affs)
    verdict("edit strength vs beta", rho > 0,
            f"target-color affinity over beta {betas}: "
            f"{[f'{a:.3f}' for a in affs]}, rho={rho:+.3f} (>0)")


def test_eta_fidelity_trend(backend32, spec32, fixture_session):
    from cfedit.probe import off_object_mse
    session = fixture_session["session"]
    source = session.source_image().numpy()
    for eta in ETA_GRID:
        if eta != session.config.eta and not session.delta_cache_path(eta).exists():
            abduct_delta(session, backend32, eta=eta)
    per_seed = []
    curves = {}
    for seed in ETA_SEEDS:
        mses = [off_object_mse(
            source,
            predict_edit(session, backend32,
                         EditRequest(session_id=session.id, beta=1.0, eta_override=eta,
                                     seed=seed, steps=EDIT_STEPS)).image.numpy(),
            spec32) for eta in ETA_GRID]
        curves[seed] = mses
        per_seed.append(spearman(list(ETA_GRID), mses))
    mean_rho = sum(per_seed) / len(per_seed)
    verdict("off-object fidelity vs annealing floor", mean_rho <= 0,
            f"per-seed rank correlation of off-object MSE across eta {list(ETA_GRID)}: "
            f"{[f'{r:+.2f}' for r in per_seed]}, mean={mean_rho:+.3f} (<=0)")


def test_aux_timestep_inequality(backend32, fixture_session):
    session = fixture_session["session"]
    source = session.source_image()
    with_aux, without = [], []
    for seed in AUX_SEEDS:
        for use, sink in ((True, with_aux), (False, without)):
            r = predict_edit(session, backend32,
                             EditRequest(session_id=session.id, beta=-1.0, seed=seed,
                                         steps=EDIT_STEPS, use_t_aux=use))
            sink.append(float(((r.image - source) ** 2).mean()))
    mw, mo = sum(with_aux) / len(with_aux), sum(without) / len(without)
    verdict("aux-timestep reconstruction", mw <= mo,
            f"fixed-seed reconstruction MSE over {len(with_aux)} paired seeds: "
            f"with aux {mw:.5f} <= without {mo:.5f}")


def test_end_to_end_edit(backend32, spec32, fixture_session):
    from cfedit.probe import caption_agreement, off_object_mse
    session = fixture_session["session"]
    source = session.source_image().numpy()
    hits, mses = 0, []
    for result in multi_seed(session, backend32, beta=1.0, n_seeds=8, steps=EDIT_STEPS):
        score, _ = caption_agreement(result.image.numpy(), session.p_prime, spec32)
        hits += score == 1.0
        mses.append(off_object_mse(source, result.image.numpy(), spec32))
    ok = hits >= 6 and max(mses) < OFF_OBJECT_MSE_MAX
    verdict("end-to-end red-to-blue edit", ok,
            f"probe found a blue circle on {hits}/8 seeds (>=6); max off-object "
            f"MSE {max(mses):.4f} (< {OFF_OBJECT_MSE_MAX})")
