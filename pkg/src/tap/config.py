"""Configuration objects and the flat key=value config file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    """Shape-defining hyperparameters for the image and text paths.

    Defaults are the desk-scale configuration; :func:`paper_model_config`
    returns the full-scale variant expressible in the same schema.
    """

    # image encoder
    image_size: int = 128
    patch_size: int = 8
    window_size: int = 4
    enc_dim: int = 192
    enc_depth: int = 6
    enc_heads: int = 4
    cross_blocks: int = 4
    # prompt encoder / image decoder
    dec_dim: int = 128
    dec_heads: int = 4
    dec_depth: int = 2
    num_mask_slots: int = 4
    # semantic head
    semantic_hidden: int = 256
    d_text: int = 64
    num_concepts: int = 12
    # text decoder
    txt_vocab_size: int = 512
    txt_dim: int = 128
    txt_depth: int = 4
    txt_heads: int = 4
    max_caption_tokens: int = 40
    # regularization rates (full-scale values live in paper_model_config)
    drop_path: float = 0.0
    image_dropout: float = 0.0
    text_dropout: float = 0.0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def mask_logit_size(self) -> int:
        # mask logits are predicted at 4x the embedding grid resolution
        return 4 * self.grid_size

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.grid_size % self.window_size != 0:
            raise ValueError(
                f"grid {self.grid_size} not divisible by window_size {self.window_size}"
            )
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("embedding dims must divide head counts")
        if self.txt_dim % self.txt_heads:
            raise ValueError("txt_dim must divide txt_heads")
        if (self.txt_dim // self.txt_heads) % 2:
            raise ValueError("rotary embedding needs an even per-head dimension")
        for rate in (self.drop_path, self.image_dropout, self.text_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"rate {rate} outside [0, 1)")


def paper_model_config() -> ModelConfig:
    """Full-scale configuration (ViT-L image path, 12-layer text decoder)."""
    return ModelConfig(
        image_size=1024,
        patch_size=16,
        window_size=16,
        enc_dim=1024,
        enc_depth=24,
        enc_heads=16,
        cross_blocks=4,
        dec_dim=256,
        dec_heads=8,
        dec_depth=2,
        semantic_hidden=1024,
        d_text=1024,
        num_concepts=2560,
        txt_vocab_size=32000,
        txt_dim=512,
        txt_depth=12,
        txt_heads=8,
        max_caption_tokens=40,
        drop_path=0.2,
        image_dropout=0.1,
        text_dropout=0.3,
    )


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule, sampling budget and loss weighting."""

    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    final_lr_fraction: float = 0.01
    steps: int = 800
    images_per_step: int = 4
    prompt_cap: int = 64
    batch_captions: int = 64
    seed: int = 0
    w_mask: float = 1.0
    w_iou: float = 1.0
    w_concept: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # open-question switches (defaults follow the mainline reading)
    reverse_kl: bool = False
    supervise_all_semantic: bool = False
    min_loss_over_slots: bool = False
    scale_jitter: bool = False
    # teacher parameters used when targets are computed
    teacher_seed: int = 0
    teacher_sigma: float = 0.05
    # bookkeeping
    checkpoint_every: int = 0
    log_every: int = 25
    data_dir: str = ""
    embed_dir: str = ""
    out_dir: str = ""

    @property
    def final_lr(self) -> float:
        return self.final_lr_fraction * self.base_lr

    def validate(self) -> None:
        if not 0.0 < self.final_lr_fraction < 1.0:
            raise ValueError("final_lr_fraction must lie in (0, 1)")
        if min(self.w_mask, self.w_iou, self.w_concept) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.prompt_cap < 1 or self.images_per_step < 1 or self.steps < 0:
            raise ValueError("budget fields must be positive")


def _coerce(raw: str, target_type: type):
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return target_type(raw)


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` config file. '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_FIELD_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def configs_from_kv(kv: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat key space into model and train configs by field name."""
    model_fields = {f.name: _FIELD_TYPES[f.type] for f in fields(ModelConfig)}
    train_fields = {f.name: _FIELD_TYPES[f.type] for f in fields(TrainConfig)}
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    for key, raw in kv.items():
        if key in model_fields:
            model_kwargs[key] = _coerce(raw, model_fields[key])
        elif key in train_fields:
            train_kwargs[key] = _coerce(raw, train_fields[key])
        else:
            raise KeyError(f"unknown config key: {key}")
    model = ModelConfig(**model_kwargs)
    train = TrainConfig(**train_kwargs)
    model.validate()
    train.validate()
    return model, train


def load_configs(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    return configs_from_kv(parse_kv_file(path))


def config_hash(*cfgs) -> str:
    """Stable hash of one or more config dataclasses, used to guard resume."""
    payload = json.dumps([asdict(c) for c in cfgs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def with_overrides(cfg, **kwargs):
    return replace(cfg, **kwargs)
