from .crops import crop_and_mask
from .rle import rle_decode, rle_encode
from .shapes import (
    ALL_CONCEPTS,
    ImageRecord,
    Region,
    ShapesConfig,
    ShapesDataset,
    generate_shapes_dataset,
    load_dataset,
    save_dataset,
)
from .store import (
    EmbeddingNotFound,
    EmbeddingStore,
    EmbeddingStoreWriter,
    StoreCorruption,
    precompute_embeddings,
    read_shard_index,
)

__all__ = [
    "ALL_CONCEPTS",
    "EmbeddingNotFound",
    "EmbeddingStore",
    "EmbeddingStoreWriter",
    "ImageRecord",
    "Region",
    "ShapesConfig",
    "ShapesDataset",
    "StoreCorruption",
    "crop_and_mask",
    "generate_shapes_dataset",
    "load_dataset",
    "precompute_embeddings",
    "read_shard_index",
    "rle_decode",
    "rle_encode",
    "save_dataset",
]
