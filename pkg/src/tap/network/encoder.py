"""Windowed vision transformer image encoder.

Patchified image tokens run through window-local self-attention blocks with
index-based relative position bias; bottleneck residual convolution blocks,
interleaved at evenly spaced depths, propagate information across windows.
A 1x1 convolution neck maps encoder channels to the decoder width.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from ..config import ModelConfig


class LayerNorm2d(nn.Module):
    """Channel-wise LayerNorm over (B, C, H, W) tensors."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class DropPath(nn.Module):
    """Stochastic depth on the residual branch."""

    def __init__(self, rate: float = 0.0):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        if self.rate == 0.0 or not self.training:
            return x
        keep = 1.0 - self.rate
        mask = torch.rand(x.shape[0], *([1] * (x.ndim - 1)), device=x.device) < keep
        return x * mask.to(x.dtype) / keep


class WindowAttention(nn.Module):
    """Multi-head attention inside a window with relative position bias."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        coords = torch.stack(
            torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        rel = rel.permute(1, 2, 0) + (window - 1)
        index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
        self.register_buffer("bias_index", index, persistent=False)
        nn.init.trunc_normal_(self.bias_table, std=0.02)

    def forward(self, x):
        # x: (B*windows, T, C) with T = window*window
        bw, t, c = x.shape
        qkv = self.qkv(x).reshape(bw, t, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.bias_table[self.bias_index.reshape(-1)]
        attn = attn + bias.reshape(t, t, self.heads).permute(2, 0, 1)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, t, c)
        return self.proj(out)


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, G, G, C) -> (B*nW, window*window, C), row-major window order."""
    b, g, _, c = x.shape
    n = g // window
    x = x.reshape(b, n, window, n, window, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b * n * n, window * window, c)


def window_merge(x: torch.Tensor, window: int, grid: int, batch: int) -> torch.Tensor:
    n = grid // window
    c = x.shape[-1]
    x = x.reshape(batch, n, n, window, window, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(batch, grid, grid, c)


class WindowBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, drop_path: float = 0.0):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        # x: (B, G, G, C)
        b, g = x.shape[0], x.shape[1]
        windows = window_partition(self.norm1(x), self.window)
        attn_out = window_merge(self.attn(windows), self.window, g, b)
        x = x + self.drop_path(attn_out)
        return x + self.drop_path(self.mlp(self.norm2(x)))


class CrossWindowBlock(nn.Module):
    """Bottleneck residual convolution; zero-init final norm keeps it identity at init."""

    def __init__(self, dim: int):
        super().__init__()
        mid = dim // 2
        self.body = nn.Sequential(
            nn.Conv2d(dim, mid, 1, bias=False),
            LayerNorm2d(mid),
            nn.GELU(),
            nn.Conv2d(mid, mid, 3, padding=1, bias=False),
            LayerNorm2d(mid),
            nn.GELU(),
            nn.Conv2d(mid, dim, 1, bias=False),
            LayerNorm2d(dim),
        )
        nn.init.zeros_(self.body[-1].weight)

    def forward(self, x):
        # x: (B, G, G, C)
        y = x.permute(0, 3, 1, 2)
        y = y + self.body(y)
        return y.permute(0, 2, 3, 1)


def cross_block_positions(depth: int, n_cross: int) -> list[int]:
    """Window-block indices after which a cross-window block runs (evenly spaced)."""
    return [round((j + 1) * depth / n_cross) - 1 for j in range(n_cross)]


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.enc_dim, cfg.patch_size, stride=cfg.patch_size)
        g = cfg.grid_size
        self.pos_embed = nn.Parameter(torch.zeros(1, g, g, cfg.enc_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        rates = torch.linspace(0, cfg.drop_path, cfg.enc_depth).tolist()
        self.blocks = nn.ModuleList(
            WindowBlock(cfg.enc_dim, cfg.enc_heads, cfg.window_size, rates[i])
            for i in range(cfg.enc_depth)
        )
        cross_at = cross_block_positions(cfg.enc_depth, cfg.cross_blocks)
        self.cross_at = {pos: i for i, pos in enumerate(cross_at)}
        self.cross_blocks = nn.ModuleList(
            CrossWindowBlock(cfg.enc_dim) for _ in range(cfg.cross_blocks)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(cfg.enc_dim, cfg.dec_dim, 1, bias=False),
            LayerNorm2d(cfg.dec_dim),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> image embedding grid (B, C_dec, G, G)."""
        if images.shape[-1] != self.cfg.image_size or images.shape[-2] != self.cfg.image_size:
            raise ValueError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} input, got {tuple(images.shape[-2:])}"
            )
        x = self.patch_embed(2.0 * images - 1.0).permute(0, 2, 3, 1)
        x = x + self.pos_embed
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in self.cross_at:
                x = self.cross_blocks[self.cross_at[i]](x)
        return self.neck(x.permute(0, 3, 1, 2))
