from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_model_blobs,
    model_blobs,
    save_checkpoint,
)
from .decoder import NUM_OUTPUT_TOKENS, NUM_SLOTS, ImageDecoder, SemanticHead, TokenBundle, route
from .encoder import ImageEncoder, cross_block_positions, window_merge, window_partition
from .model import PromptableModel, audit_shapes, expected_shapes, images_to_tensor
from .prompt_encoder import PromptEncoder, sincos_features

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ImageDecoder",
    "ImageEncoder",
    "NUM_OUTPUT_TOKENS",
    "NUM_SLOTS",
    "PromptEncoder",
    "PromptableModel",
    "SemanticHead",
    "TokenBundle",
    "audit_shapes",
    "cross_block_positions",
    "expected_shapes",
    "images_to_tensor",
    "load_checkpoint",
    "load_model_blobs",
    "model_blobs",
    "route",
    "save_checkpoint",
    "sincos_features",
    "window_merge",
    "window_partition",
]
