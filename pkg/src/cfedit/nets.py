"""Toy networks with low-rank adapter slots.

AdaptedLinear / AdaptedConv2d behave exactly like their host layer until an
adapter entry is installed; entries carry (A, B, scale) and add
scale * (A @ B) to the effective weight. Installed entries are keyed by
adapter name so U, Delta and the auxiliary text adapter can coexist.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


class _Adapted(nn.Module):
    """Mixin state for adapter slots. ``kind`` classifies the layer for
    placement policies: attention | conv | ffn."""

    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind
        self.slots: dict[str, dict] = {}

    def attach(self, name: str, A: Tensor, B: Tensor, scale: float) -> None:
        if name in self.slots:
            raise ValueError(f"adapter {name!r} already installed on this layer")
        self.slots[name] = {"A": A, "B": B, "scale": scale}

    def detach_slot(self, name: str) -> None:
        self.slots.pop(name, None)

    def set_slot_scale(self, name: str, scale: float) -> None:
        self.slots[name]["scale"] = scale


class AdaptedLinear(_Adapted):
    def __init__(self, d_in: int, d_out: int, kind: str, bias: bool = True):
        super().__init__(kind)
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        out = F.linear(x, self.weight, self.bias)
        for slot in self.slots.values():
            if slot["scale"] != 0.0:
                out = out + slot["scale"] * ((x @ slot["B"].mT) @ slot["A"].mT)
        return out

    def factor_shape(self) -> tuple[int, int]:
        return self.d_out, self.d_in


class AdaptedConv2d(_Adapted):
    def __init__(self, c_in: int, c_out: int, kernel: int, kind: str = "conv",
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__(kind)
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.stride, self.padding = stride, padding
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        for slot in self.slots.values():
            if slot["scale"] != 0.0:
                r = slot["B"].shape[0]
                mid = F.conv2d(x, slot["B"].reshape(r, self.c_in, self.kernel, self.kernel),
                               None, stride=self.stride, padding=self.padding)
                out = out + slot["scale"] * F.conv2d(mid, slot["A"].reshape(self.c_out, r, 1, 1))
        return out

    def factor_shape(self) -> tuple[int, int]:
        return self.c_out, self.c_in * self.kernel * self.kernel


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal embedding of integer timesteps; t of shape (B,)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention + FFN, adapter slots on the attention projections."""

    def __init__(self, dim: int, n_heads: int = 2):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(dim)
        self.q = AdaptedLinear(dim, dim, kind="attention")
        self.k = AdaptedLinear(dim, dim, kind="attention")
        self.v = AdaptedLinear(dim, dim, kind="attention")
        self.out = AdaptedLinear(dim, dim, kind="attention")
        self.ln2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, dim * 4)
        self.ff2 = nn.Linear(dim * 4, dim)

    def forward(self, x: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        h = self.ln1(x)
        B, L, D = h.shape
        hd = D // self.n_heads

        def split(z):
            return z.reshape(B, L, self.n_heads, hd).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = q @ k.mT / math.sqrt(hd)
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(B, L, D)
        x = x + self.out(h)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class ToyTextEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 64, n_layers: int = 2,
                 n_heads: int = 2, max_len: int = 12):
        super().__init__()
        self.dim, self.max_len = dim, max_len
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.blocks = nn.ModuleList(SelfAttentionBlock(dim, n_heads) for _ in range(n_layers))
        self.ln_out = nn.LayerNorm(dim)

    def forward(self, token_ids: Tensor, pad_mask: Tensor) -> Tensor:
        x = self.tok_emb(token_ids) + self.pos_emb[None, : token_ids.shape[1]]
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.ln_out(x)


class CrossAttentionBlock(nn.Module):
    """Pixel tokens attend to text features; followed by a channel FFN.

    Hosts all three adapter placement classes used by the generator:
    attention projections, the surrounding convs (in Res blocks), and
    this block's FFN linears.
    """

    def __init__(self, channels: int, text_dim: int, n_heads: int = 2):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = AdaptedLinear(channels, channels, kind="attention")
        self.k = AdaptedLinear(text_dim, channels, kind="attention")
        self.v = AdaptedLinear(text_dim, channels, kind="attention")
        self.out = AdaptedLinear(channels, channels, kind="attention")
        self.ln_ff = nn.LayerNorm(channels)
        self.ff1 = AdaptedLinear(channels, channels * 2, kind="ffn")
        self.ff2 = AdaptedLinear(channels * 2, channels, kind="ffn")

    def forward(self, x: Tensor, text: Tensor) -> Tensor:
        B, C, H, W = x.shape
        tokens = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        L = text.shape[1]
        hd = C // self.n_heads

        q = self.q(tokens).reshape(B, H * W, self.n_heads, hd).transpose(1, 2)
        k = self.k(text).reshape(B, L, self.n_heads, hd).transpose(1, 2)
        v = self.v(text).reshape(B, L, self.n_heads, hd).transpose(1, 2)
        attn = (q @ k.mT / math.sqrt(hd)).softmax(dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(B, H * W, C)
        tokens = x.reshape(B, C, H * W).transpose(1, 2) + self.out(h)
        tokens = tokens + self.ff2(F.gelu(self.ff1(self.ln_ff(tokens))))
        return tokens.transpose(1, 2).reshape(B, C, H, W)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.conv1 = AdaptedConv2d(c_in, c_out, 3, padding=1)
        self.conv2 = AdaptedConv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.skip = AdaptedConv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class ToyUNet(nn.Module):
    """Three-resolution conditional U-Net predicting noise from (x_t, t, text)."""

    def __init__(self, channels: tuple[int, int, int] = (32, 64, 128),
                 text_dim: int = 64, time_dim: int = 64):
        super().__init__()
        c1, c2, c3 = channels
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim * 2), nn.SiLU(),
                                      nn.Linear(time_dim * 2, time_dim))
        self.stem = AdaptedConv2d(3, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, time_dim)
        self.attn1 = CrossAttentionBlock(c1, text_dim)
        self.pool1 = AdaptedConv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, time_dim)
        self.attn2 = CrossAttentionBlock(c2, text_dim)
        self.pool2 = AdaptedConv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = ResBlock(c3, c3, time_dim)
        self.attn_mid = CrossAttentionBlock(c3, text_dim)
        self.up2 = ResBlock(c3 + c2, c2, time_dim)
        self.attn_up2 = CrossAttentionBlock(c2, text_dim)
        self.up1 = ResBlock(c2 + c1, c1, time_dim)
        self.attn_up1 = CrossAttentionBlock(c1, text_dim)
        self.head_norm = nn.GroupNorm(8, c1)
        self.head = AdaptedConv2d(c1, 3, 3, padding=1)

    def forward(self, x: Tensor, t: Tensor, text: Tensor) -> Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        h1 = self.attn1(self.down1(self.stem(x), temb), text)
        h2 = self.attn2(self.down2(self.pool1(h1), temb), text)
        h3 = self.attn_mid(self.mid(self.pool2(h2), temb), text)
        u2 = F.interpolate(h3, scale_factor=2, mode="nearest")
        u2 = self.attn_up2(self.up2(torch.cat([u2, h2], dim=1), temb), text)
        u1 = F.interpolate(u2, scale_factor=2, mode="nearest")
        u1 = self.attn_up1(self.up1(torch.cat([u1, h1], dim=1), temb), text)
        return self.head(F.silu(self.head_norm(u1)))

    def down_features(self, x: Tensor, t: Tensor, text: Tensor) -> Tensor:
        """Pooled down-path activations, used as a frozen feature trunk."""
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        h1 = self.attn1(self.down1(self.stem(x), temb), text)
        h2 = self.attn2(self.down2(self.pool1(h1), temb), text)
        h3 = self.attn_mid(self.mid(self.pool2(h2), temb), text)
        return torch.cat([h.mean(dim=(2, 3)) for h in (h1, h2, h3)], dim=1)
