"""Low-rank adapter algebra: factor pairs, scaling, negation, serialization.

An adapter is a map layer_path -> (A, B) with effective contribution
scale * A @ B added to the host weight. B starts at zero so an untrained
adapter is behaviorally invisible.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cfedit.errors import AdapterFileError, ConfigError, ShapeError

Tensor = torch.Tensor

ADAPTER_FORMAT_VERSION = 1

TARGETS = ("generator", "text_encoder")
PLACEMENTS = ("attention_only", "attention_conv_ffn")


@dataclass
class LoraFactorPair:
    """One rank-r correction A @ B for the layer at ``layer_path``.

    For a linear host W (d_out, d_in): A is (d_out, r), B is (r, d_in).
    For a conv host (C_out, C_in, k, k): B is the flattened (r, C_in*k*k).
    """

    A: Tensor
    B: Tensor
    layer_path: str

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(f"{self.layer_path}: A {tuple(self.A.shape)} and B "
                             f"{tuple(self.B.shape)} do not chain")
        if self.rank > min(self.A.shape[0], self.B.shape[1]):
            raise ShapeError(f"{self.layer_path}: rank {self.rank} exceeds host dims")
        if not (torch.isfinite(self.A).all() and torch.isfinite(self.B).all()):
            raise ValueError(f"{self.layer_path}: non-finite factor values")

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass
class LoraAdapter:
    pairs: dict[str, LoraFactorPair]
    target: str
    placement: str = "attention_conv_ffn"
    rank: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}")
        for path, pair in self.pairs.items():
            if pair.layer_path != path:
                raise ValueError(f"pair keyed {path!r} carries layer_path {pair.layer_path!r}")

    def layer_paths(self) -> list[str]:
        return sorted(self.pairs)


def gamma_schedule(t: int, T_max: int, eta: float) -> float:
    """Timestep annealing scale: gamma = (1-eta)/T_max^2 * (t - T_max)^2 + eta.

    gamma(0) = 1, gamma(T_max) = eta, monotone non-increasing for eta < 1.
    """
    if not 0 < eta <= 1:
        raise ConfigError(f"eta must be in (0, 1], got {eta}")
    if not 0 <= t <= T_max:
        raise ConfigError(f"t {t} outside [0, {T_max}]")
    return (1.0 - eta) / (T_max ** 2) * (t - T_max) ** 2 + eta


def adapted_linear(z: Tensor, W: Tensor, pair: LoraFactorPair, scale: float) -> Tensor:
    """(W + scale * A @ B) @ z for z of shape (..., d_in), W of (d_out, d_in)."""
    if z.shape[-1] != W.shape[1] or pair.A.shape[0] != W.shape[0] or pair.B.shape[1] != W.shape[1]:
        raise ShapeError("adapted_linear: shapes do not conform")
    out = z @ W.mT
    if scale != 0.0:
        out = out + scale * ((z @ pair.B.mT) @ pair.A.mT)
    return out


def text_adapted(y: Tensor, W: Tensor, pair: LoraFactorPair, beta: float) -> Tensor:
    """(W - beta * A @ B) @ y. beta = -1 is the reconstruction form, +1 the full edit."""
    if not -1.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [-1, 1], got {beta}")
    return adapted_linear(y, W, pair, -beta)


def negate(adapter: LoraAdapter) -> LoraAdapter:
    """Flip the sign of every pair's effective contribution (negates A)."""
    if not adapter.pairs:
        raise ValueError("cannot negate an empty adapter")
    pairs = {p: LoraFactorPair(A=-pair.A, B=pair.B.clone(), layer_path=p)
             for p, pair in adapter.pairs.items()}
    return LoraAdapter(pairs=pairs, target=adapter.target, placement=adapter.placement,
                       rank=adapter.rank, metadata=dict(adapter.metadata))


def conv_adapted(x: Tensor, weight: Tensor, bias: Tensor | None, pair: LoraFactorPair,
                 scale: float, padding: int = 0, stride: int = 1) -> Tensor:
    """Host conv plus the low-rank kernel correction, realized as two stacked convs.

    B reshaped to (r, C_in, k, k) runs as a k x k conv with r output channels;
    A reshaped to (C_out, r, 1, 1) mixes those back. Equivalent to convolving
    with W + reshape(A @ B).
    """
    c_out, c_in, kh, kw = weight.shape
    if pair.A.shape[0] != c_out or pair.B.shape[1] != c_in * kh * kw:
        raise ShapeError("conv_adapted: factor shapes do not match the kernel")
    out = F.conv2d(x, weight, bias, padding=padding, stride=stride)
    if scale != 0.0:
        r = pair.rank
        mid = F.conv2d(x, pair.B.reshape(r, c_in, kh, kw), None, padding=padding, stride=stride)
        out = out + scale * F.conv2d(mid, pair.A.reshape(c_out, r, 1, 1))
    return out


def init_pair(layer_path: str, d_out: int, d_in: int, rank: int,
              generator: torch.Generator) -> LoraFactorPair:
    """A ~ N(0, 0.02^2), B = 0; the adapter starts as an exact identity.

    Rank is capped at min(d_out, d_in) so large configured ranks stay valid
    on small host layers.
    """
    r = min(rank, d_out, d_in)
    A = torch.randn(d_out, r, generator=generator) * 0.02
    B = torch.zeros(r, d_in)
    return LoraFactorPair(A=A, B=B, layer_path=layer_path)


def save_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    """Named-tensor archive: npz with "<layer_path>.A"/".B" keys plus a JSON
    metadata entry; readable without executing code."""
    arrays: dict[str, np.ndarray] = {}
    for p, pair in adapter.pairs.items():
        arrays[f"{p}.A"] = pair.A.detach().cpu().numpy()
        arrays[f"{p}.B"] = pair.B.detach().cpu().numpy()
    meta = {
        "format_version": ADAPTER_FORMAT_VERSION,
        "target": adapter.target,
        "placement": adapter.placement,
        "rank": adapter.rank,
        **adapter.metadata,
    }
    arrays["__metadata__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_adapter(path: str | Path) -> LoraAdapter:
    path = Path(path)
    if not path.exists():
        raise AdapterFileError(f"adapter file not found: {path}")
    try:
        with np.load(path) as npz:
            data = {k: npz[k] for k in npz.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise AdapterFileError(f"corrupt adapter file {path}: {exc}") from exc
    if "__metadata__" not in data:
        raise AdapterFileError(f"{path}: missing metadata record")
    meta = json.loads(bytes(data.pop("__metadata__")).decode("utf-8"))
    version = meta.pop("format_version", None)
    if version != ADAPTER_FORMAT_VERSION:
        raise AdapterFileError(f"{path}: format version {version} not supported")
    pairs: dict[str, LoraFactorPair] = {}
    for key in sorted(data):
        if not key.endswith(".A"):
            continue
        p = key[:-2]
        if f"{p}.B" not in data:
            raise AdapterFileError(f"{path}: {p} has A but no B")
        pairs[p] = LoraFactorPair(A=torch.from_numpy(data[key].copy()),
                                  B=torch.from_numpy(data[f"{p}.B"].copy()),
                                  layer_path=p)
    target = meta.pop("target")
    placement = meta.pop("placement")
    rank = meta.pop("rank")
    return LoraAdapter(pairs=pairs, target=target, placement=placement, rank=rank, metadata=meta)
