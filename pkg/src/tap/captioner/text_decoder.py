"""Causal caption decoder prompted by a projected semantic token.

Sequence layout: position 0 carries the linearly projected semantic vector,
position 1 the BOS embedding, then caption tokens. Rotary embeddings encode
position inside attention; decoding is greedy with per-request key-value
caching and stops at EOS or the 40-token context limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from ..config import ModelConfig
from .bpe import BOS, EOS


@dataclass(frozen=True)
class CaptionSequence:
    """Generated caption token ids (content only; SEM/BOS/EOS are implicit)."""

    tokens: tuple[int, ...]
    max_tokens: int = 40

    def __post_init__(self):
        if len(self.tokens) > self.max_tokens:
            raise ValueError(f"caption exceeds {self.max_tokens} tokens")

    def __len__(self) -> int:
        return len(self.tokens)


def rotary_frequencies(dim: int, device=None) -> torch.Tensor:
    if dim % 2:
        raise ValueError("rotary embedding needs an even dimension")
    i = torch.arange(dim // 2, dtype=torch.float64, device=device)
    return 10000.0 ** (-2.0 * i / dim)


def apply_rotary(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate feature pairs of x (..., T, d) by per-position angles.

    positions is broadcastable to x's T axis; pairs are the even/odd
    interleaved channels.
    """
    freqs = rotary_frequencies(x.shape[-1], device=x.device)
    angles = positions.to(torch.float64)[..., :, None] * freqs  # (..., T, d/2)
    cos = angles.cos().to(x.dtype)
    sin = angles.sin().to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


class KVCache:
    """Per-layer cached keys/values; grows one position per consumed token."""

    def __init__(self, num_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * num_layers
        self.values: list[torch.Tensor | None] = [None] * num_layers

    def append(self, layer: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = torch.cat([self.keys[layer], k], dim=2)
            self.values[layer] = torch.cat([self.values[layer], v], dim=2)
        return self.keys[layer], self.values[layer]

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[2]


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, positions, layer_idx, cache: KVCache | None = None):
        b, t, c = x.shape
        hd = c // self.heads
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)  # (B, H, T, hd)
        q = apply_rotary(q, positions)
        k = apply_rotary(k, positions)
        if cache is not None:
            k, v = cache.append(layer_idx, k, v)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        # causal mask over global positions: query i sits at past+i and may
        # only see keys 0..past+i (past = keys already in the cache)
        total = k.shape[2]
        past = total - t
        key_pos = torch.arange(total, device=x.device)
        query_pos = past + torch.arange(t, device=x.device)
        attn = attn.masked_fill(key_pos[None, :] > query_pos[:, None], float("-inf"))
        attn = self.dropout(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj(out)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.resid_dropout = nn.Dropout(dropout)

    def forward(self, x, positions, layer_idx, cache=None):
        x = x + self.resid_dropout(self.attn(self.norm1(x), positions, layer_idx, cache))
        return x + self.resid_dropout(self.mlp(self.norm2(x)))


class CaptionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.projector = nn.Linear(cfg.dec_dim, cfg.txt_dim)
        self.token_embed = nn.Embedding(cfg.txt_vocab_size, cfg.txt_dim)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.txt_dim, cfg.txt_heads, cfg.text_dropout)
            for _ in range(cfg.txt_depth)
        )
        self.final_norm = nn.LayerNorm(cfg.txt_dim)
        self.lm_head = nn.Linear(cfg.txt_dim, cfg.txt_vocab_size, bias=False)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        nn.init.normal_(self.lm_head.weight, std=0.02)

    def project_semantic(self, semantic_token: torch.Tensor) -> torch.Tensor:
        """Linear map from decoder token space to text embedding space."""
        return self.projector(semantic_token)

    def forward_embeds(self, embeds: torch.Tensor, positions: torch.Tensor,
                       cache: KVCache | None = None) -> torch.Tensor:
        x = embeds
        for i, block in enumerate(self.blocks):
            x = block(x, positions, i, cache)
        return self.lm_head(self.final_norm(x))

    def build_sequence(self, semantic_token: torch.Tensor,
                       token_ids: torch.Tensor) -> torch.Tensor:
        """[projected SEM][BOS] t1..tn as an embedding sequence (B, n+2, D)."""
        b = semantic_token.shape[0]
        sem = self.project_semantic(semantic_token)[:, None, :]
        bos = self.token_embed.weight[BOS][None, None, :].expand(b, 1, -1)
        parts = [sem, bos]
        if token_ids.numel():
            parts.append(self.token_embed(token_ids))
        return torch.cat(parts, dim=1)

    def forward_train(self, semantic_token: torch.Tensor,
                      token_ids: torch.Tensor) -> torch.Tensor:
        """Causal logits over the [SEM][BOS] t1..tn sequence, (B, n+2, V)."""
        if token_ids.shape[-1] > self.cfg.max_caption_tokens:
            raise ValueError(
                f"caption length {token_ids.shape[-1]} exceeds the "
                f"{self.cfg.max_caption_tokens}-token context limit"
            )
        embeds = self.build_sequence(semantic_token, token_ids)
        positions = torch.arange(embeds.shape[1], device=embeds.device)
        return self.forward_embeds(embeds, positions)

    @torch.no_grad()
    def generate(self, semantic_token: torch.Tensor,
                 max_tokens: int | None = None) -> CaptionSequence:
        """Greedy decoding with a private KV cache; stops at EOS or the cap."""
        limit = self.cfg.max_caption_tokens if max_tokens is None else max_tokens
        if semantic_token.ndim == 1:
            semantic_token = semantic_token[None]
        cache = KVCache(len(self.blocks))
        prefix = self.build_sequence(semantic_token, semantic_token.new_empty(1, 0, dtype=torch.long))
        positions = torch.arange(2, device=semantic_token.device)
        logits = self.forward_embeds(prefix, positions, cache)
        tokens: list[int] = []
        for step in range(limit):
            next_id = int(logits[0, -1].argmax())
            if next_id == EOS:
                break
            tokens.append(next_id)
            emb = self.token_embed.weight[next_id][None, None, :]
            pos = torch.tensor([2 + step], device=semantic_token.device)
            logits = self.forward_embeds(emb, pos, cache)
        return CaptionSequence(tuple(tokens), max_tokens=limit)


def select_generation(candidates: list[CaptionSequence], kind: str, iou_pred) -> CaptionSequence:
    """Pick the caption of the routed mask/semantic slot."""
    from ..network.decoder import route

    if len(candidates) != 4:
        raise ValueError("expected one candidate per semantic token slot")
    return candidates[route(kind, iou_pred)]
