"""Text-conditional diffusion generator: toy backend, adapter injection, checkpoints.

The backend owns a noise-prediction U-Net and a text encoder, both carrying
named adapter slots. With every slot empty or zeroed it behaves exactly as its
base self. The toy backend works directly in pixel space on [0, 1] RGB images
(scaled to [-1, 1] internally).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from cfedit.corpus import ToyCorpusSpec, sample_batch
from cfedit.errors import BackendLoadError, ConfigError, TrainingError
from cfedit.lora import LoraAdapter, LoraFactorPair, init_pair
from cfedit.nets import ToyTextEncoder, ToyUNet, _Adapted
from cfedit.schedule import NoiseSchedule

Tensor = torch.Tensor

ARCHITECTURE = "toy-unet-v1"
PAD_TOKEN = "<pad>"

# placement policy -> adapter-slot kinds it covers, per injection target
_PLACEMENT_KINDS = {
    ("generator", "attention_conv_ffn"): {"attention", "conv", "ffn"},
    ("generator", "attention_only"): {"attention"},
    ("text_encoder", "attention_only"): {"attention"},
}


class Tokenizer:
    def __init__(self, vocab: list[str], max_len: int = 12):
        self.vocab = [PAD_TOKEN] + [w for w in vocab if w != PAD_TOKEN]
        self.max_len = max_len
        self._ids = {w: i for i, w in enumerate(self.vocab)}

    def encode(self, prompt: str) -> tuple[Tensor, Tensor]:
        words = prompt.strip().lower().split()
        if not words:
            raise ValueError("empty prompt")
        unknown = [w for w in words if w not in self._ids]
        if unknown:
            raise ValueError(f"prompt words not in vocabulary: {unknown}")
        if len(words) > self.max_len:
            raise ValueError(f"prompt longer than {self.max_len} tokens")
        ids = [self._ids[w] for w in words] + [0] * (self.max_len - len(words))
        pad = [False] * len(words) + [True] * (self.max_len - len(words))
        return torch.tensor([ids]), torch.tensor([pad])

    def encode_batch(self, prompts: list[str]) -> tuple[Tensor, Tensor]:
        pairs = [self.encode(p) for p in prompts]
        return torch.cat([p[0] for p in pairs]), torch.cat([p[1] for p in pairs])


@dataclass
class BackendConfig:
    channels: tuple[int, int, int] = (32, 64, 128)
    text_dim: int = 64
    text_layers: int = 2
    time_dim: int = 64
    max_len: int = 12
    resolution: int = 64
    T_max: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    vocab: list[str] = field(default_factory=list)
    corpus_hash: str = ""
    seed: int = 0
    info: dict = field(default_factory=dict)


class AdapterHandle:
    """Tracks one installed adapter across its host modules."""

    def __init__(self, name: str, entries: list[tuple[_Adapted, str]],
                 params: list[nn.Parameter] | None = None,
                 pairs: dict[str, tuple[Tensor, Tensor]] | None = None,
                 template: LoraAdapter | None = None):
        self.name = name
        self._entries = entries
        self._params = params or []
        self._pairs = pairs or {}
        self._template = template
        self._removed = False

    def set_scale(self, scale: float) -> None:
        for module, name in self._entries:
            module.set_slot_scale(name, scale)

    def parameters(self) -> list[nn.Parameter]:
        return list(self._params)

    def to_adapter(self) -> LoraAdapter:
        """Snapshot current factor values as an immutable adapter."""
        t = self._template
        pairs = {p: LoraFactorPair(A=A.detach().clone(), B=B.detach().clone(), layer_path=p)
                 for p, (A, B) in self._pairs.items()}
        return LoraAdapter(pairs=pairs, target=t.target, placement=t.placement,
                           rank=t.rank, metadata=dict(t.metadata))

    def remove(self) -> None:
        if self._removed:
            return
        for module, name in self._entries:
            module.detach_slot(name)
        self._removed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.remove()


class ToyBackend:
    """Pixel-space toy generator satisfying the adapter-injection contract."""

    def __init__(self, config: BackendConfig):
        self.config = config
        torch.manual_seed(config.seed)
        self.noise_net = ToyUNet(tuple(config.channels), config.text_dim, config.time_dim)
        self.text_encoder = ToyTextEncoder(len(config.vocab) + 1, config.text_dim,
                                           config.text_layers, max_len=config.max_len)
        self.tokenizer = Tokenizer(config.vocab, config.max_len)
        self.sched = NoiseSchedule.linear(config.T_max, config.beta_start, config.beta_end)
        self.noise_net.eval()
        self.text_encoder.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    # ---- adapter plumbing -------------------------------------------------

    def _net(self, target: str) -> nn.Module:
        return self.noise_net if target == "generator" else self.text_encoder

    def adapter_modules(self, target: str, placement: str) -> dict[str, _Adapted]:
        kinds = _PLACEMENT_KINDS.get((target, placement))
        if kinds is None:
            raise ConfigError(f"unsupported placement {placement!r} for target {target!r}")
        return {path: m for path, m in self._net(target).named_modules()
                if isinstance(m, _Adapted) and m.kind in kinds}

    def init_adapter(self, target: str, rank: int, placement: str = "attention_conv_ffn",
                     seed: int = 0, metadata: dict | None = None) -> LoraAdapter:
        if target == "text_encoder":
            placement = "attention_only"
        gen = torch.Generator().manual_seed(seed)
        pairs = {}
        for path, module in sorted(self.adapter_modules(target, placement).items()):
            d_out, d_in = module.factor_shape()
            pairs[path] = init_pair(path, d_out, d_in, rank, gen)
        return LoraAdapter(pairs=pairs, target=target, placement=placement, rank=rank,
                           metadata=metadata or {})

    def install(self, adapter: LoraAdapter, name: str, scale: float = 1.0,
                trainable: bool = False) -> AdapterHandle:
        modules = self.adapter_modules(adapter.target, adapter.placement)
        missing = [p for p in adapter.pairs if p not in modules]
        if missing:
            raise ConfigError(f"adapter paths not present in backend: {missing[:3]}")
        entries, params, pairs = [], [], {}
        for path, pair in adapter.pairs.items():
            A, B = pair.A, pair.B
            if trainable:
                A = nn.Parameter(A.clone())
                B = nn.Parameter(B.clone())
                params.extend([A, B])
            modules[path].attach(name, A, B, scale)
            entries.append((modules[path], name))
            pairs[path] = (A, B)
        return AdapterHandle(name, entries, params, pairs, template=adapter)

    # ---- forward surfaces -------------------------------------------------

    def encode_text(self, prompt: str, delta: LoraAdapter | None = None,
                    beta: float = 0.0, t_aux: LoraAdapter | None = None) -> Tensor:
        """Token features of shape (1, L, text_dim); -beta scales delta's
        contribution so beta = -1 is the reconstruction encoder and +1 the edit."""
        if not -1.0 <= beta <= 1.0:
            raise ConfigError(f"beta must be in [-1, 1], got {beta}")
        ids, pad = self.tokenizer.encode(prompt)
        handles = []
        try:
            if delta is not None:
                handles.append(self.install(delta, "delta", scale=-beta))
            if t_aux is not None:
                handles.append(self.install(t_aux, "t_aux", scale=1.0))
            return self.text_encoder(ids, pad)
        finally:
            for h in handles:
                h.remove()

    def predict_noise(self, x_t: Tensor, t: int | Tensor, text_features: Tensor,
                      u: LoraAdapter | None = None, gamma: float = 1.0) -> Tensor:
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t = x_t[None]
        if isinstance(t, int):
            t = torch.full((x_t.shape[0],), t, dtype=torch.long)
        if text_features.shape[0] == 1 and x_t.shape[0] > 1:
            text_features = text_features.expand(x_t.shape[0], -1, -1)
        handle = self.install(u, "u", scale=gamma) if u is not None else None
        try:
            out = self.noise_net(x_t, t, text_features)
            if not torch.isfinite(out).all():
                raise TrainingError("non-finite noise prediction")
            return out[0] if squeeze else out
        finally:
            if handle is not None:
                handle.remove()

    # ---- image codec (pixel-space toy: linear [0,1] <-> [-1,1]) -----------

    def encode_image(self, img01: Tensor) -> Tensor:
        return img01 * 2.0 - 1.0

    def decode_image(self, x0: Tensor) -> Tensor:
        return ((x0 + 1.0) / 2.0).clamp(0.0, 1.0)

    def image_features(self, img01: Tensor) -> Tensor:
        """Frozen down-trunk features for the desk-scale image-alignment metric."""
        x = self.encode_image(img01)
        if x.ndim == 3:
            x = x[None]
        null_text = torch.zeros(x.shape[0], self.config.max_len, self.config.text_dim)
        with torch.no_grad():
            return self.noise_net.down_features(x, torch.zeros(x.shape[0], dtype=torch.long),
                                                null_text)

    # ---- state ------------------------------------------------------------

    def parameters(self):
        yield from self.noise_net.parameters()
        yield from self.text_encoder.parameters()

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for net in (self.noise_net, self.text_encoder):
            for key, value in sorted(net.state_dict().items()):
                h.update(key.encode())
                h.update(value.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"unet.{k}": v.detach().cpu().numpy()
                  for k, v in self.noise_net.state_dict().items()}
        arrays.update({f"text.{k}": v.detach().cpu().numpy()
                       for k, v in self.text_encoder.state_dict().items()})
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        cfg = asdict(self.config)
        cfg["architecture"] = ARCHITECTURE
        path.with_suffix(".json").write_text(json.dumps(cfg, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ToyBackend":
        path = Path(path)
        cfg_path = path.with_suffix(".json")
        if not path.exists() or not cfg_path.exists():
            raise BackendLoadError(f"backend checkpoint not found: {path}")
        cfg = json.loads(cfg_path.read_text())
        arch = cfg.pop("architecture", None)
        if arch != ARCHITECTURE:
            raise BackendLoadError(f"unsupported architecture {arch!r}")
        backend = cls(BackendConfig(**cfg))
        try:
            with np.load(path) as npz:
                unet_sd = {k[5:]: torch.from_numpy(npz[k].copy()) for k in npz.files
                           if k.startswith("unet.")}
                text_sd = {k[5:]: torch.from_numpy(npz[k].copy()) for k in npz.files
                           if k.startswith("text.")}
        except (OSError, ValueError) as exc:
            raise BackendLoadError(f"corrupt checkpoint {path}: {exc}") from exc
        backend.noise_net.load_state_dict(unet_sd)
        backend.text_encoder.load_state_dict(text_sd)
        for p in backend.parameters():
            p.requires_grad_(False)
        return backend


def load_external_backend(weights_path: str | Path, config: dict | None = None) -> ToyBackend:
    """Seam for externally produced weights in the documented archive format.

    Currently dispatches on the sidecar config's ``architecture`` field; the
    toy architecture is the only one bundled, so any checkpoint written in the
    documented format loads through the same interface.
    """
    return ToyBackend.load(weights_path)


def heldout_loss(backend: ToyBackend, spec: ToyCorpusSpec, n: int = 64,
                 seed: int = 1234) -> float:
    """Noise-regression loss on a fixed held-out batch."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    imgs, caps = sample_batch(spec, rng, n)
    x0 = backend.encode_image(imgs)
    t = torch.randint(0, backend.sched.T_max, (n,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    ab = backend.sched.alphas[t].float().reshape(-1, 1, 1, 1)
    x_t = ab.sqrt() * x0 + (1 - ab).clamp(min=0).sqrt() * eps
    ids, pad = backend.tokenizer.encode_batch(caps)
    with torch.no_grad():
        text = backend.text_encoder(ids, pad)
        total = 0.0
        for i in range(0, n, 16):
            pred = backend.noise_net(x_t[i:i + 16], t[i:i + 16], text[i:i + 16])
            total += float(((pred - eps[i:i + 16]) ** 2).mean()) * min(16, n - i)
    return total / n


# pinned from the first successful bring-up run of scripts/train_toy.py
HELDOUT_LOSS_THRESHOLD = 0.15


def train_toy_backend(spec: ToyCorpusSpec, steps: int, seed: int,
                      batch_size: int = 16, lr: float = 2e-4,
                      channels: tuple[int, int, int] = (32, 64, 128),
                      log_every: int = 500,
                      threshold: float = HELDOUT_LOSS_THRESHOLD) -> ToyBackend:
    """Train the toy noise net + text encoder jointly on the corpus."""
    config = BackendConfig(channels=channels, resolution=spec.resolution,
                           vocab=spec.vocabulary(), corpus_hash=spec.content_hash(),
                           seed=seed)
    backend = ToyBackend(config)
    baseline = heldout_loss(backend, spec)
    params = list(backend.parameters())
    for p in params:
        p.requires_grad_(True)
    backend.noise_net.train()
    backend.text_encoder.train()
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    sched = backend.sched
    for step in range(steps):
        imgs, caps = sample_batch(spec, rng, batch_size)
        x0 = backend.encode_image(imgs)
        t = torch.randint(0, sched.T_max, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        ab = sched.alphas[t].float().reshape(-1, 1, 1, 1)
        x_t = ab.sqrt() * x0 + (1 - ab).clamp(min=0).sqrt() * eps
        ids, pad = backend.tokenizer.encode_batch(caps)
        pred = backend.noise_net(x_t, t, backend.text_encoder(ids, pad))
        loss = ((pred - eps) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingError("training loss diverged", iteration=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{steps} loss {float(loss):.4f}", flush=True)
    backend.noise_net.eval()
    backend.text_encoder.eval()
    for p in params:
        p.requires_grad_(False)
    final = heldout_loss(backend, spec)
    backend.config.info = {"baseline_loss": baseline, "heldout_loss": final,
                           "train_steps": steps, "threshold": threshold}
    return backend
