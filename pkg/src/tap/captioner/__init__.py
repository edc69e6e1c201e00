from .bpe import BOS, EOS, PAD, UNK, BpeTokenizer
from .text_decoder import (
    CaptionDecoder,
    CaptionSequence,
    KVCache,
    apply_rotary,
    rotary_frequencies,
    select_generation,
)

__all__ = [
    "BOS",
    "BpeTokenizer",
    "CaptionDecoder",
    "CaptionSequence",
    "EOS",
    "KVCache",
    "PAD",
    "UNK",
    "apply_rotary",
    "rotary_frequencies",
    "select_generation",
]
