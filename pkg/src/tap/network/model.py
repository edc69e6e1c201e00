"""The promptable model: image encoder + prompt encoder + image decoder."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ..config import ModelConfig
from ..sampler import PromptSet
from .decoder import NUM_OUTPUT_TOKENS, NUM_SLOTS, ImageDecoder, TokenBundle, route
from .encoder import ImageEncoder
from .prompt_encoder import PromptEncoder


def images_to_tensor(images) -> torch.Tensor:
    """Stack HxWx3 uint8 arrays into a (B, 3, H, W) float tensor in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().float() / 255.0


class PromptableModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg.dec_dim, cfg.grid_size)
        self.decoder = ImageDecoder(cfg)
        self.register_buffer(
            "dense_pe", self.prompt_encoder.dense_grid_encoding(), persistent=False
        )

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(images)

    def decode(self, grid: torch.Tensor, prompts: list[PromptSet],
               image_indices=None) -> TokenBundle:
        """Decode a TokenBundle per prompt.

        grid is (B, C, G, G); `image_indices` maps each prompt to its image
        (defaults to one prompt per image, in order).
        """
        if image_indices is None:
            if len(prompts) != grid.shape[0]:
                raise ValueError("need image_indices when prompts != images")
            image_indices = list(range(len(prompts)))
        embeds, valid = self.prompt_encoder(prompts)
        per_prompt = grid[torch.as_tensor(image_indices, dtype=torch.long)]
        return self.decoder(per_prompt, embeds, valid, self.dense_pe)

    def forward(self, images: torch.Tensor, prompts: list[PromptSet],
                image_indices=None) -> TokenBundle:
        return self.decode(self.encode_image(images), prompts, image_indices)

    def predict_concepts(self, semantic_token: torch.Tensor) -> torch.Tensor:
        """Concept logits for semantic tokens of shape (..., C_dec)."""
        return self.decoder.semantic_head(semantic_token)

    def masks_at(self, mask_logits: torch.Tensor, size: int) -> torch.Tensor:
        """Bilinearly resize mask logits (..., g, g) to (..., size, size)."""
        if mask_logits.shape[-1] == size:
            return mask_logits
        return F.interpolate(mask_logits, size=(size, size), mode="bilinear",
                             align_corners=False)

    def classify_zero_shot(self, semantic_token: torch.Tensor, dataset_weights,
                           topk: int = 5):
        """Ranked (indices, scores) against a dataset vocabulary's weight columns."""
        columns = getattr(dataset_weights, "columns", dataset_weights)
        w = torch.as_tensor(np.asarray(columns), dtype=torch.float32)
        vis = self.decoder.semantic_head.embed(semantic_token)
        logits = vis @ w
        k = min(topk, w.shape[1])
        scores, indices = torch.sort(logits, dim=-1, descending=True, stable=True)
        return indices[..., :k], scores[..., :k]


# -- shape audit ------------------------------------------------------------


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Contract-level parameter shapes implied by the config."""
    g = cfg.grid_size
    return {
        "image_encoder.patch_embed.weight": (cfg.enc_dim, 3, cfg.patch_size, cfg.patch_size),
        "image_encoder.pos_embed": (1, g, g, cfg.enc_dim),
        "image_encoder.neck.0.weight": (cfg.dec_dim, cfg.enc_dim, 1, 1),
        "prompt_encoder.label_embed.weight": (4, cfg.dec_dim),
        "decoder.output_tokens.weight": (NUM_OUTPUT_TOKENS, cfg.dec_dim),
        "decoder.iou_head.fc1.weight": (cfg.dec_dim, cfg.dec_dim),
        "decoder.iou_head.fc2.weight": (NUM_SLOTS, cfg.dec_dim),
        "decoder.semantic_head.mlp.fc1.weight": (cfg.semantic_hidden, cfg.dec_dim),
        "decoder.semantic_head.mlp.fc2.weight": (cfg.d_text, cfg.semantic_hidden),
        "decoder.semantic_head.source_weights": (cfg.d_text, cfg.num_concepts),
        "decoder.mask_hypernets.0.fc2.weight": (cfg.dec_dim // 8, cfg.dec_dim),
        "decoder.upscale.0.weight": (cfg.dec_dim, cfg.dec_dim // 4, 2, 2),
        "decoder.upscale.3.weight": (cfg.dec_dim // 4, cfg.dec_dim // 8, 2, 2),
    }


def audit_shapes(model: PromptableModel) -> dict[str, dict]:
    """Check every contract shape against the live model; raises on mismatch."""
    state = dict(model.named_parameters())
    state.update(dict(model.named_buffers()))
    report = {}
    failures = []
    for name, want in expected_shapes(model.cfg).items():
        got = tuple(state[name].shape) if name in state else None
        report[name] = {"expected": want, "actual": got, "ok": got == want}
        if got != want:
            failures.append(name)
    counts = {
        "window_blocks": len(model.image_encoder.blocks),
        "cross_blocks": len(model.image_encoder.cross_blocks),
        "decoder_layers": len(model.decoder.layers),
        "mask_hypernets": len(model.decoder.mask_hypernets),
        "output_tokens": model.decoder.output_tokens.weight.shape[0],
    }
    expected_counts = {
        "window_blocks": model.cfg.enc_depth,
        "cross_blocks": model.cfg.cross_blocks,
        "decoder_layers": model.cfg.dec_depth,
        "mask_hypernets": NUM_SLOTS,
        "output_tokens": NUM_OUTPUT_TOKENS,
    }
    for key, got in counts.items():
        want = expected_counts[key]
        report[f"count.{key}"] = {"expected": want, "actual": got, "ok": got == want}
        if got != want:
            failures.append(key)
    if failures:
        raise AssertionError(f"shape audit failed for: {', '.join(failures)}")
    return report
