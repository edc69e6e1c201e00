"""Byte-pair tokenizer learned from the caption corpus.

Words are whitespace-separated, lowercased, and end with the "</w>" marker
symbol. Merges are learned greedily by pair frequency (ties broken by the
lexicographically smallest pair) until the vocabulary target is reached or no
pair repeats. Serialized as a vocabulary file plus a merges file.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]")
END = "</w>"


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (END,)


class BpeTokenizer:
    def __init__(self, symbols: list[str], merges: list[tuple[str, str]]):
        self.symbols = list(_SPECIALS) + [s for s in symbols if s not in _SPECIALS]
        self.merges = list(merges)
        self._sym_to_id = {s: i for i, s in enumerate(self.symbols)}
        self._rank = {pair: i for i, pair in enumerate(self.merges)}

    # -- training -------------------------------------------------------------

    @classmethod
    def train(cls, corpus: list[str], vocab_size: int = 512) -> "BpeTokenizer":
        word_freq = Counter()
        for text in corpus:
            word_freq.update(text.lower().split())
        if not word_freq:
            raise ValueError("empty caption corpus")
        words = {w: list(_word_symbols(w)) for w in word_freq}
        base = sorted({s for syms in words.values() for s in syms})
        merges: list[tuple[str, str]] = []
        merged_symbols: list[str] = []
        while len(_SPECIALS) + len(base) + len(merged_symbols) < vocab_size:
            pairs = Counter()
            for w, syms in words.items():
                f = word_freq[w]
                for a, b in zip(syms, syms[1:]):
                    pairs[(a, b)] += f
            if not pairs:
                break
            best, count = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
            if count < 2:
                break
            merges.append(best)
            merged_symbols.append(best[0] + best[1])
            for w, syms in words.items():
                words[w] = _merge_once(syms, best)
        return cls(base + merged_symbols, merges)

    # -- encode / decode --------------------------------------------------------

    def _bpe_word(self, word: str) -> list[str]:
        syms = list(_word_symbols(word))
        while len(syms) > 1:
            candidates = [
                (self._rank[p], i)
                for i, p in enumerate(zip(syms, syms[1:]))
                if p in self._rank
            ]
            if not candidates:
                break
            rank, _ = min(candidates)
            syms = _merge_once(syms, self.merges[rank])
        return syms

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.lower().split():
            for sym in self._bpe_word(word):
                ids.append(self._sym_to_id.get(sym, UNK))
        return ids

    def decode(self, ids) -> str:
        parts = []
        for i in ids:
            if i in (PAD, BOS, EOS):
                continue
            parts.append(self.symbols[i] if 0 <= i < len(self.symbols) else "[UNK]")
        return "".join(parts).replace(END, " ").strip()

    def __len__(self) -> int:
        return len(self.symbols)

    # -- files --------------------------------------------------------------

    def save(self, vocab_path: str | Path, merges_path: str | Path) -> None:
        Path(vocab_path).write_text("".join(s + "\n" for s in self.symbols))
        Path(merges_path).write_text("".join(f"{a}\t{b}\n" for a, b in self.merges))

    @classmethod
    def load(cls, vocab_path: str | Path, merges_path: str | Path) -> "BpeTokenizer":
        symbols = [ln for ln in Path(vocab_path).read_text().splitlines() if ln]
        merges = []
        for ln in Path(merges_path).read_text().splitlines():
            if ln:
                a, b = ln.split("\t")
                merges.append((a, b))
        return cls(symbols[len(_SPECIALS):], merges)


def _merge_once(syms: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
            out.append(syms[i] + syms[i + 1])
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out
