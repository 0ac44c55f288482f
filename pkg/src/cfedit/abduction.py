"""The two abduction trainers.

Stage one fits the generator-side adapter U by Gaussian noise regression on
the source image under prompt P. Stage two freezes U, anneals its scale by
gamma(t), and fits the text-encoder adapter Delta under the post-edit prompt
P', stored in the reconstruction (+) orientation. An optional auxiliary
text-encoder adapter can be fitted against P to sharpen reconstruction.
"""

from __future__ import annotations

from typing import Callable

import torch

from cfedit.backend import AdapterHandle, ToyBackend
from cfedit.errors import SessionStateError, TrainingError
from cfedit.lora import LoraAdapter, gamma_schedule, load_adapter, save_adapter
from cfedit.schedule import NoiseSchedule
from cfedit.session import EditSession

Tensor = torch.Tensor

ProgressFn = Callable[[int, int, float], None]


def regression_loss(backend: ToyBackend, sched: NoiseSchedule, x0: Tensor, prompt: str,
                    t: int, eps: Tensor) -> Tensor:
    """|| eps - noise_net(x_t, t, encode(prompt)) ||^2 with whatever adapters are
    currently installed on the backend. Text features are recomputed so gradients
    reach text-encoder adapters."""
    ab = sched.alpha_bar(t)
    x_t = ab ** 0.5 * x0 + max(1.0 - ab, 0.0) ** 0.5 * eps
    text = backend.text_encoder(*backend.tokenizer.encode(prompt))
    pred = backend.noise_net(x_t[None], torch.tensor([t]), text)
    return ((pred[0] - eps) ** 2).mean()


def regression_step(backend: ToyBackend, sched: NoiseSchedule, x0: Tensor, prompt: str,
                    optimizer: torch.optim.Optimizer, generator: torch.Generator,
                    u_handle: AdapterHandle | None = None, eta: float | None = None,
                    batch_size: int = 1) -> tuple[float, int]:
    """One optimization step on the adapter under training; samples (t, eps),
    applies the annealing scale to U when eta is given, and returns (loss, t)."""
    optimizer.zero_grad()
    total = 0.0
    last_t = 0
    for _ in range(batch_size):
        t = int(torch.randint(0, sched.T_max, (1,), generator=generator))
        eps = torch.randn(x0.shape, generator=generator)
        if u_handle is not None and eta is not None:
            u_handle.set_scale(gamma_schedule(t, sched.T_max, eta))
        loss = regression_loss(backend, sched, x0, prompt, t, eps) / batch_size
        loss.backward()
        total += float(loss.detach())
        last_t = t
    if total != total:  # NaN
        raise TrainingError("regression loss is NaN", timestep=last_t)
    optimizer.step()
    return total, last_t


def _train(backend: ToyBackend, session: EditSession, *, prompt: str, phase: str,
           template: LoraAdapter, slot: str, seed: int,
           frozen: list[tuple[LoraAdapter, str, float]] = (),
           eta: float | None = None, iterations: int | None = None,
           checkpoint_fn: Callable[[int, AdapterHandle], None] | None = None,
           progress: ProgressFn | None = None) -> LoraAdapter:
    cfg = session.config
    iterations = iterations or cfg.iterations
    x0 = backend.encode_image(session.source_image())
    generator = torch.Generator().manual_seed(seed)
    session.record_seed(phase, seed)
    handles = []
    u_handle = None
    try:
        for adapter, name, scale in frozen:
            h = backend.install(adapter, name, scale=scale)
            handles.append(h)
            if name == "u":
                u_handle = h
        train_handle = backend.install(template, slot, scale=1.0, trainable=True)
        handles.append(train_handle)
        optimizer = torch.optim.Adam(train_handle.parameters(), lr=cfg.learning_rate)
        trace: list[tuple[int, float]] = []
        for it in range(1, iterations + 1):
            try:
                loss, t = regression_step(backend, backend.sched, x0, prompt, optimizer,
                                          generator, u_handle=u_handle, eta=eta,
                                          batch_size=cfg.batch_size)
            except TrainingError as exc:
                session.append_losses(phase, trace)
                session.set_status("failed")
                raise TrainingError(f"{phase} aborted at iteration {it}: {exc}",
                                    iteration=it, timestep=exc.timestep) from exc
            trace.append((it, loss))
            if checkpoint_fn is not None and it in cfg.checkpoint_iters:
                checkpoint_fn(it, train_handle)
            if progress is not None:
                progress(it, iterations, loss)
        session.append_losses(phase, trace)
        return train_handle.to_adapter()
    finally:
        for h in handles:
            h.remove()


def abduct_u(session: EditSession, backend: ToyBackend,
             t_aux: LoraAdapter | None = None,
             progress: ProgressFn | None = None) -> LoraAdapter:
    """Fit the generator adapter to reconstruct the source image under prompt P."""
    cfg = session.config
    if session.has_adapter("delta"):
        raise SessionStateError("delta already abducted; U must be fitted first")
    template = backend.init_adapter("generator", cfg.rank_u, placement=cfg.u_placement,
                                    seed=cfg.seed, metadata={"created_from_session": session.id})
    frozen = [(t_aux, "t_aux", 1.0)] if t_aux is not None else []

    def checkpoint(it: int, handle: AdapterHandle) -> None:
        path = session.checkpoint_path(it)
        save_adapter(handle.to_adapter(), path)
        if it not in session.manifest["checkpoints"]:
            session.manifest["checkpoints"].append(it)
            session.save_manifest()

    adapter = _train(backend, session, prompt=session.p, phase="u", template=template,
                     slot="u", seed=cfg.seed, frozen=frozen, checkpoint_fn=checkpoint,
                     progress=progress)
    save_adapter(adapter, session.adapter_path("u"))
    session.manifest["adapters"]["u"] = "u.adapter"
    session.manifest["schedule"] = backend.sched.to_manifest()
    session.save_manifest()
    return adapter


def abduct_delta(session: EditSession, backend: ToyBackend, eta: float | None = None,
                 save_as: str | None = None, iterations: int | None = None,
                 progress: ProgressFn | None = None) -> LoraAdapter:
    """Fit the text-encoder adapter under prompt P' with U frozen and annealed.

    The result is stored in the reconstruction (+) orientation; all sign
    handling happens at edit time through beta.
    """
    cfg = session.config
    if not session.has_adapter("u"):
        raise SessionStateError("abduct_u must complete before abduct_delta")
    eta = cfg.eta if eta is None else eta
    u = load_adapter(session.adapter_path("u"))
    template = backend.init_adapter("text_encoder", cfg.rank_delta, seed=cfg.seed + 1,
                                    metadata={"created_from_session": session.id,
                                              "eta": eta})
    adapter = _train(backend, session, prompt=session.p_prime,
                     phase=f"delta(eta={eta:g})", template=template, slot="delta",
                     seed=cfg.seed + 1, frozen=[(u, "u", 1.0)], eta=eta,
                     iterations=iterations, progress=progress)
    if save_as is None:
        path = session.adapter_path("delta") if eta == cfg.eta \
            else session.delta_cache_path(eta)
    else:
        path = session.dir / save_as
    save_adapter(adapter, path)
    session.manifest["adapters"][f"delta_eta_{eta:g}"] = str(path.relative_to(session.dir))
    if eta == cfg.eta:
        session.manifest["adapters"]["delta"] = "delta.adapter"
    session.save_manifest()
    return adapter


def abduct_t_aux(session: EditSession, backend: ToyBackend, alternations: int = 1,
                 iterations: int | None = None,
                 progress: ProgressFn | None = None) -> LoraAdapter:
    """Fit the auxiliary text-encoder adapter against P with U frozen at full
    scale; optional extra rounds alternate re-fitting U under the fixed aux
    adapter."""
    cfg = session.config
    if not session.has_adapter("u"):
        raise SessionStateError("abduct_u must complete before abduct_t_aux")
    t_aux = None
    for round_idx in range(alternations):
        u = load_adapter(session.adapter_path("u"))
        template = backend.init_adapter("text_encoder", cfg.rank_delta,
                                        seed=cfg.seed + 2 + round_idx,
                                        metadata={"created_from_session": session.id})
        t_aux = _train(backend, session, prompt=session.p,
                       phase=f"t_aux(round={round_idx})", template=template,
                       slot="t_aux", seed=cfg.seed + 2 + round_idx,
                       frozen=[(u, "u", 1.0)], iterations=iterations,
                       progress=progress)
        save_adapter(t_aux, session.adapter_path("t_aux"))
        if round_idx + 1 < alternations:
            refit = _train(backend, session, prompt=session.p,
                           phase=f"u(round={round_idx + 1})", template=u, slot="u",
                           seed=cfg.seed + 100 + round_idx,
                           frozen=[(t_aux, "t_aux", 1.0)], iterations=iterations,
                           progress=progress)
            save_adapter(refit, session.adapter_path("u"))
    session.manifest["adapters"]["t_aux"] = "t_aux.adapter"
    session.save_manifest()
    return t_aux


def run_abduction(session: EditSession, backend: ToyBackend, with_t_aux: bool = False,
                  progress: ProgressFn | None = None) -> None:
    """Full pipeline: U, then Delta (then the aux adapter if requested)."""
    session.acquire_lock()
    session.set_status("running")
    try:
        abduct_u(session, backend, progress=progress)
        abduct_delta(session, backend, progress=progress)
        if with_t_aux:
            abduct_t_aux(session, backend, progress=progress)
        session.set_status("done")
    except Exception:
        if session.status != "failed":
            session.set_status("failed")
        raise
    finally:
        session.release_lock()
