"""Two-layer two-way image decoder.

Nine learned output tokens (1 IoU + 4 mask + 4 semantic, one semantic bound
to each mask slot) are concatenated with the prompt embeddings and alternate
between token self-attention, token-to-image and image-to-token cross
attention. Heads read masks from upscaled grid features via per-slot
hypernetworks, predicted IoU from the IoU token, and concept logits from the
semantic tokens through the semantic head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ..config import ModelConfig
from .encoder import LayerNorm2d

NUM_SLOTS = 4
NUM_OUTPUT_TOKENS = 2 * NUM_SLOTS + 1  # 4 mask + 4 semantic + 1 IoU


@dataclass
class TokenBundle:
    """Per-prompt decoder outputs; leading dim is the prompt batch."""

    mask_tokens: torch.Tensor      # (P, 4, C)
    semantic_tokens: torch.Tensor  # (P, 4, C)
    iou_token: torch.Tensor        # (P, C)
    mask_logits: torch.Tensor      # (P, 4, g, g) at 4x grid resolution
    iou_pred: torch.Tensor         # (P, 4)

    @property
    def num_tokens(self) -> int:
        return self.mask_tokens.shape[1] + self.semantic_tokens.shape[1] + 1


def route(kind: str, iou_pred) -> int:
    """Select the mask/semantic slot: boxes fix slot 0, points take the
    highest predicted IoU among slots 1..3 (ties to the lowest index)."""
    if kind == "box":
        return 0
    scores = [float(v) for v in iou_pred]
    if len(scores) != NUM_SLOTS:
        raise ValueError(f"expected {NUM_SLOTS} iou predictions, got {len(scores)}")
    best = 1
    for i in (2, 3):
        if scores[i] > scores[best]:
            best = i
    return best


class Attention(nn.Module):
    """Multi-head attention with an optional key validity mask."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, q, k, v, key_valid=None):
        b, lq, c = q.shape
        hd = c // self.heads
        qh = self.q_proj(q).reshape(b, lq, self.heads, hd).transpose(1, 2)
        kh = self.k_proj(k).reshape(b, k.shape[1], self.heads, hd).transpose(1, 2)
        vh = self.v_proj(v).reshape(b, v.shape[1], self.heads, hd).transpose(1, 2)
        attn = (qh @ kh.transpose(-2, -1)) * self.scale
        if key_valid is not None:
            attn = attn.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = self.dropout(attn.softmax(dim=-1))
        out = (attn @ vh).transpose(1, 2).reshape(b, lq, c)
        return self.out_proj(out)


class TwoWayLayer(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float, skip_first_pe: bool):
        super().__init__()
        self.skip_first_pe = skip_first_pe
        self.self_attn = Attention(dim, heads, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, heads, dropout)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, image, token_pe, image_pe, token_valid):
        q = tokens if self.skip_first_pe else tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens, key_valid=token_valid))
        tokens = self.norm2(
            tokens + self.cross_token_to_image(tokens + token_pe, image + image_pe, image)
        )
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(
            image
            + self.cross_image_to_token(image + image_pe, tokens + token_pe, tokens,
                                        key_valid=token_valid)
        )
        return tokens, image


class TwoLayerHead(nn.Module):
    """Perceptron with one hidden layer (input -> hidden -> out)."""

    def __init__(self, dim_in: int, hidden: int, dim_out: int):
        super().__init__()
        self.fc1 = nn.Linear(dim_in, hidden)
        self.fc2 = nn.Linear(hidden, dim_out)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class SemanticHead(nn.Module):
    """Semantic token -> visual embedding -> concept logits.

    The perceptron maps C_dec -> H -> D_text; the projection to K logits uses
    the frozen source concept-weight matrix (a buffer, never optimized).
    """

    def __init__(self, dec_dim: int, hidden: int, d_text: int, num_concepts: int):
        super().__init__()
        self.mlp = TwoLayerHead(dec_dim, hidden, d_text)
        self.register_buffer("source_weights", torch.zeros(d_text, num_concepts))

    def set_source_weights(self, columns: np.ndarray) -> None:
        w = torch.as_tensor(np.asarray(columns), dtype=torch.float32)
        if w.shape != self.source_weights.shape:
            raise ValueError(
                f"weight shape {tuple(w.shape)} != {tuple(self.source_weights.shape)}"
            )
        self.source_weights.copy_(w)

    def embed(self, semantic_token: torch.Tensor) -> torch.Tensor:
        return self.mlp(semantic_token)

    def project(self, visual_embedding: torch.Tensor) -> torch.Tensor:
        if visual_embedding.shape[-1] != self.source_weights.shape[0]:
            raise ValueError("visual embedding dim does not match weight rows")
        return visual_embedding @ self.source_weights

    def forward(self, semantic_token: torch.Tensor) -> torch.Tensor:
        return self.project(self.embed(semantic_token))


class ImageDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.dec_dim
        self.output_tokens = nn.Embedding(NUM_OUTPUT_TOKENS, dim)
        nn.init.trunc_normal_(self.output_tokens.weight, std=0.02)
        self.layers = nn.ModuleList(
            TwoWayLayer(dim, cfg.dec_heads, cfg.image_dropout, skip_first_pe=(i == 0))
            for i in range(cfg.dec_depth)
        )
        self.final_token_to_image = Attention(dim, cfg.dec_heads, cfg.image_dropout)
        self.final_norm = nn.LayerNorm(dim)
        up = dim // 4
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, up, 2, stride=2),
            LayerNorm2d(up),
            nn.GELU(),
            nn.ConvTranspose2d(up, dim // 8, 2, stride=2),
            nn.GELU(),
        )
        self.mask_hypernets = nn.ModuleList(
            TwoLayerHead(dim, dim, dim // 8) for _ in range(NUM_SLOTS)
        )
        self.iou_head = TwoLayerHead(dim, dim, NUM_SLOTS)
        self.semantic_head = SemanticHead(
            dim, cfg.semantic_hidden, cfg.d_text, cfg.num_concepts
        )

    def forward(self, grid: torch.Tensor, prompt_embeds: torch.Tensor,
                prompt_valid: torch.Tensor, image_pe: torch.Tensor) -> TokenBundle:
        """Decode one TokenBundle per prompt.

        grid: (P, C, G, G) image embeddings, already expanded per prompt.
        prompt_embeds/prompt_valid: (P, L, C) and (P, L) from the prompt encoder.
        image_pe: (G*G, C) dense positional encoding.
        """
        p, c, g, _ = grid.shape
        out_tok = self.output_tokens.weight.unsqueeze(0).expand(p, -1, -1)
        tokens = torch.cat([out_tok, prompt_embeds], dim=1)
        token_pe = tokens  # initial embeddings double as the token positional code
        valid = torch.cat(
            [prompt_valid.new_ones(p, NUM_OUTPUT_TOKENS), prompt_valid], dim=1
        )
        image = grid.flatten(2).transpose(1, 2)  # (P, G*G, C)
        image_pe = image_pe.unsqueeze(0).expand(p, -1, -1).to(image.dtype)

        for layer in self.layers:
            tokens, image = layer(tokens, image, token_pe, image_pe, valid)
        tokens = self.final_norm(
            tokens + self.final_token_to_image(tokens + token_pe, image + image_pe, image)
        )

        iou_token = tokens[:, 0]
        mask_tokens = tokens[:, 1 : 1 + NUM_SLOTS]
        semantic_tokens = tokens[:, 1 + NUM_SLOTS : NUM_OUTPUT_TOKENS]

        feats = self.upscale(image.transpose(1, 2).reshape(p, c, g, g))
        weights = torch.stack(
            [net(mask_tokens[:, i]) for i, net in enumerate(self.mask_hypernets)], dim=1
        )  # (P, 4, C//8)
        mask_logits = torch.einsum("psc,pchw->pshw", weights, feats)
        iou_pred = self.iou_head(iou_token)
        return TokenBundle(
            mask_tokens=mask_tokens,
            semantic_tokens=semantic_tokens,
            iou_token=iou_token,
            mask_logits=mask_logits,
            iou_pred=iou_pred,
        )
