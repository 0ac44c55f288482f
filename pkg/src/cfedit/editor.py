"""Action & prediction: invert the text adapter and DDIM-sample the edit.

predict_edit with beta = -1 is the reconstruction path and with beta = +1 the
full edit; both run the identical code, so the endpoint contract is exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch

from cfedit.abduction import abduct_delta
from cfedit.backend import ToyBackend
from cfedit.errors import ConfigError, SessionStateError
from cfedit.lora import LoraAdapter, gamma_schedule, load_adapter
from cfedit.schedule import ddim_sample
from cfedit.session import EditSession, save_image

Tensor = torch.Tensor


@dataclass(frozen=True)
class EditRequest:
    session_id: str
    beta: float = 1.0
    eta_override: float | None = None
    seed: int = 0
    steps: int = 30
    use_t_aux: bool = False
    anneal: bool = True  # apply gamma(t) to U during sampling

    def __post_init__(self):
        if not -1.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [-1, 1], got {self.beta}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class EditResult:
    image: Tensor
    request: dict
    content_hash: str
    png_path: str
    scores: dict = field(default_factory=dict)


def _load_delta(session: EditSession, eta: float | None) -> LoraAdapter:
    if eta is None or eta == session.config.eta:
        path = session.adapter_path("delta")
        if not path.exists():
            raise SessionStateError("session has no delta adapter; run abduct_delta")
        return load_adapter(path)
    path = session.delta_cache_path(eta)
    if not path.exists():
        raise SessionStateError(f"no delta abducted for eta={eta:g}; "
                                "run abduct_delta(eta=...) or sweep_eta first")
    return load_adapter(path)


def predict_edit(session: EditSession, backend: ToyBackend,
                 request: EditRequest) -> EditResult:
    """Sample the edited image for one request. Deterministic: identical
    requests produce byte-identical PNGs."""
    if not session.has_adapter("u"):
        raise SessionStateError("session has no generator adapter; run abduct_u")
    u = load_adapter(session.adapter_path("u"))
    delta = _load_delta(session, request.eta_override)
    t_aux = None
    if request.use_t_aux:
        if not session.has_adapter("t_aux"):
            raise SessionStateError("use_t_aux requested but no aux adapter present")
        t_aux = load_adapter(session.adapter_path("t_aux"))
    eta = request.eta_override if request.eta_override is not None else session.config.eta

    # text features are beta- but not t-dependent: computed once per request
    with torch.no_grad():
        text = backend.encode_text(session.p_prime, delta=delta, beta=request.beta,
                                   t_aux=t_aux)
    sched = backend.sched
    res = backend.config.resolution
    gen = torch.Generator().manual_seed(request.seed)
    x_T = torch.randn(3, res, res, generator=gen)

    u_handle = backend.install(u, "u", scale=1.0)
    try:
        def predictor(x: Tensor, t: int) -> Tensor:
            gamma = gamma_schedule(t, sched.T_max, eta) if request.anneal else 1.0
            u_handle.set_scale(gamma)
            with torch.no_grad():
                return backend.noise_net(x[None], torch.tensor([t]), text)[0]

        x0 = ddim_sample(x_T, request.steps, predictor, sched)
    finally:
        u_handle.remove()
    image = backend.decode_image(x0)

    edits = session.edits_dir()
    edits.mkdir(exist_ok=True)
    tmp = edits / f".tmp_{request.seed}_{id(request)}.png"
    png = save_image(image, tmp)
    content_hash = hashlib.sha256(png).hexdigest()[:20]
    png_path = edits / f"{content_hash}.png"
    tmp.replace(png_path)
    record = {"request": request.echo(), "hash": content_hash, "scores": {}}
    (edits / f"{content_hash}.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return EditResult(image=image, request=request.echo(), content_hash=content_hash,
                      png_path=str(png_path))


def reconstruct(session: EditSession, backend: ToyBackend, seed: int = 0,
                steps: int = 30) -> EditResult:
    """Reconstruction of the source image: exactly predict_edit at beta = -1."""
    return predict_edit(session, backend,
                        EditRequest(session_id=session.id, beta=-1.0, seed=seed, steps=steps))


def sweep_beta(session: EditSession, backend: ToyBackend, betas: list[float],
               seed: int = 0, steps: int = 30) -> list[EditResult]:
    """One result per beta with a shared x_T; returned ordered by beta."""
    return [predict_edit(session, backend,
                         EditRequest(session_id=session.id, beta=b, seed=seed, steps=steps))
            for b in sorted(betas)]


def sweep_eta(session: EditSession, backend: ToyBackend, etas: list[float],
              beta: float = 1.0, seed: int = 0, steps: int = 30,
              abduct_iterations: int | None = None) -> list[EditResult]:
    """Per-eta results; each eta needs its own delta, so missing ones are
    abducted (cached values reused across calls)."""
    results = []
    for eta in etas:
        if eta == session.config.eta:
            if not session.has_adapter("delta"):
                abduct_delta(session, backend, iterations=abduct_iterations)
        elif not session.delta_cache_path(eta).exists():
            abduct_delta(session, backend, eta=eta, iterations=abduct_iterations)
        result = predict_edit(session, backend,
                              EditRequest(session_id=session.id, beta=beta,
                                          eta_override=eta, seed=seed, steps=steps))
        result.request["delta_provenance"] = f"eta={eta:g}"
        results.append(result)
    return results


def multi_seed(session: EditSession, backend: ToyBackend, beta: float = 1.0,
               n_seeds: int = 8, base_seed: int = 0, steps: int = 30) -> list[EditResult]:
    """A seed grid: n results with distinct recorded seeds; selection is the
    caller's job."""
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    return [predict_edit(session, backend,
                         EditRequest(session_id=session.id, beta=beta,
                                     seed=base_seed + i, steps=steps))
            for i in range(n_seeds)]
