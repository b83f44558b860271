"""Caption sampling policy and the hash-embedding text encoder.

Captions come in two languages x three lengths per image. Training draws
the language and the length independently per sample. The "second
language" is a synthetic stand-in (the English caption with its token
order reversed) so the bilingual sampling path is exercised without any
external data.

Text enters the model through a whitespace tokenizer whose words map to a
fixed-size embedding table by a stable 32-bit FNV-1a hash. Index 0 is the
null token: it embeds the empty caption and doubles as guidance dropout
and padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .rng import Rng
from .tensor import Tensor

LANGS = ("en", "zh")
LENGTHS = ("short", "middle", "long")
VOCAB_HASH_SIZE = 4096
NULL_ID = 0


@dataclass
class CaptionRecord:
    """Bilingual {short, middle, long} caption set for one image."""

    texts: dict[str, dict[str, str]]  # texts[lang][length]

    def __post_init__(self):
        if not any(self.texts.get(lg, {}).get(ln, "") for lg in LANGS for ln in LENGTHS):
            raise DataError("fflow.textcond: caption record has no non-empty caption")

    def get(self, lang: str, length: str) -> str:
        return self.texts.get(lang, {}).get(length, "")


@dataclass
class SamplingPolicy:
    length_ratios: tuple[float, float, float] = (0.10, 0.35, 0.55)
    lang_ratio_primary: float = 0.8

    def __post_init__(self):
        r = self.length_ratios
        if any(v < 0 for v in r):
            raise ConfigError("fflow.textcond: length ratios must be nonnegative")
        if abs(sum(r) - 1.0) > 1e-9:
            raise ConfigError(f"fflow.textcond: length ratios sum to {sum(r)}, expected 1")
        if not 0.0 <= self.lang_ratio_primary <= 1.0:
            raise ConfigError("fflow.textcond: lang_ratio_primary must be in [0, 1]")


def reverse_tokens(text: str) -> str:
    """Second-language stand-in: same words, reversed order."""
    return " ".join(reversed(text.split()))


def _fallback(record: CaptionRecord, lang: str) -> str:
    # Longest available wins; try the other language only if this one is empty.
    for lg in (lang, "zh" if lang == "en" else "en"):
        for length in ("long", "middle", "short"):
            text = record.get(lg, length)
            if text:
                return text
    raise DataError("fflow.textcond: all caption slots empty")


def sample_caption(
    record: CaptionRecord, policy: SamplingPolicy, rng: Rng
) -> tuple[str, str, str]:
    """Draw (language, length, text); language and length are independent."""
    lang = "en" if float(rng.uniform(())) < policy.lang_ratio_primary else "zh"
    u = float(rng.uniform(()))
    cum = np.cumsum(policy.length_ratios)
    length = LENGTHS[int(np.searchsorted(cum, u, side="right").clip(0, 2))]
    text = record.get(lang, length)
    if not text:
        text = _fallback(record, lang)
    return lang, length, text


# ---- tokenizer / embedder ----


def _fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h = ((h ^ b) * 0x01000193) & 0xFFFFFFFF
    return h


def word_id(word: str) -> int:
    """Stable hash id in [1, VOCAB_HASH_SIZE); 0 is reserved for null."""
    return 1 + _fnv1a32(word.encode("utf-8")) % (VOCAB_HASH_SIZE - 1)


def tokenize(text: str, max_len: int = 256) -> list[int]:
    """Lowercased whitespace words -> hashed ids, truncated at max_len.

    The empty string yields the single null token (the CFG null branch).
    """
    words = text.lower().split()
    if not words:
        return [NULL_ID]
    return [word_id(w) for w in words[:max_len]]


@dataclass
class TextEmbedding:
    ids: np.ndarray  # [tokens] int64
    embeddings: Tensor  # [tokens, dim]

    @property
    def tokens(self) -> int:
        return int(self.ids.size)


class TextEmbedder:
    """Embeds captions through a table that trains jointly with the DiT."""

    def __init__(self, table: Tensor):
        self.table = table

    def embed(self, text: str, max_len: int = 256) -> TextEmbedding:
        ids = np.asarray(tokenize(text, max_len), dtype=np.int64)
        return TextEmbedding(ids, T.gather_rows(self.table, ids))


def embed_text(text: str, max_len: int, table: Tensor) -> TextEmbedding:
    return TextEmbedder(table).embed(text, max_len)
