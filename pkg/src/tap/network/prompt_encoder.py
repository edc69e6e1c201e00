"""Prompt encoder: labeled sine-cosine point embeddings.

Each prompt point contributes a deterministic sine-cosine encoding of its
normalized (x, y) coordinates plus a learned embedding for its label class.
There is no dense mask pathway: prior masks enter as sketch points instead.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from ..sampler import PromptSet

NUM_LABELS = 4  # negative, positive, box top-left, box bottom-right


def sincos_features(coords: torch.Tensor, dim: int, max_cycles: float = 64.0) -> torch.Tensor:
    """Sine-cosine features of normalized coords (..., 2) -> (..., dim).

    Half the channels encode x, half y. Frequencies are geometric between 1
    and `max_cycles` full periods over the unit interval.
    """
    if dim % 4:
        raise ValueError("encoding dim must be divisible by 4")
    n_freq = dim // 4
    device = coords.device
    exponents = torch.arange(n_freq, dtype=torch.float64, device=device)
    denom = max(n_freq - 1, 1)
    omega = 2.0 * math.pi * max_cycles ** (exponents / denom)
    angles = coords[..., :, None].to(torch.float64) * omega  # (..., 2, n_freq)
    feats = torch.cat([angles.sin(), angles.cos()], dim=-1)  # (..., 2, 2*n_freq)
    return feats.reshape(*coords.shape[:-1], dim).to(torch.float32)


class PromptEncoder(nn.Module):
    def __init__(self, dec_dim: int, grid_size: int):
        super().__init__()
        self.dec_dim = dec_dim
        self.grid_size = grid_size
        self.label_embed = nn.Embedding(NUM_LABELS, dec_dim)
        self.pad_embed = nn.Parameter(torch.zeros(dec_dim))
        nn.init.trunc_normal_(self.label_embed.weight, std=0.02)

    def point_embedding(self, x: float, y: float, label: int) -> torch.Tensor:
        coords = torch.tensor([[x, y]])
        return sincos_features(coords, self.dec_dim)[0] + self.label_embed.weight[label]

    def dense_grid_encoding(self) -> torch.Tensor:
        """Positional encoding of grid cell centers, (G*G, C)."""
        g = self.grid_size
        centers = (torch.arange(g, dtype=torch.float64) + 0.5) / g
        yy, xx = torch.meshgrid(centers, centers, indexing="ij")
        coords = torch.stack([xx, yy], dim=-1).reshape(-1, 2)
        return sincos_features(coords, self.dec_dim)

    def forward(self, prompts: list[PromptSet]) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch of prompt sets, padded to the longest.

        Returns (embeddings (P, L, C), valid (P, L) bool). Padded positions
        hold the learned pad embedding and are masked out of attention.
        """
        if not prompts:
            raise ValueError("no prompts to encode")
        longest = max(len(p) for p in prompts)
        if longest == 0:
            raise ValueError("cannot encode an empty prompt set")
        embeds = self.pad_embed.expand(len(prompts), longest, self.dec_dim).clone()
        valid = torch.zeros(len(prompts), longest, dtype=torch.bool)
        for i, prompt in enumerate(prompts):
            if len(prompt) == 0:
                raise ValueError("cannot encode an empty prompt set")
            coords = torch.tensor([[pt.x, pt.y] for pt in prompt.points])
            labels = torch.tensor([int(pt.label) for pt in prompt.points])
            pe = sincos_features(coords, self.dec_dim)
            embeds[i, : len(prompt)] = pe + self.label_embed(labels)
            valid[i, : len(prompt)] = True
        return embeds, valid
