"""Byte-level vocabulary: ids 0-255 are raw bytes, followed by four specials."""

from __future__ import annotations

PAD, EOS, SEP, CLS = 256, 257, 258, 259
VOCAB_SIZE = 260
SPECIALS = {PAD: "[PAD]", EOS: "[EOS]", SEP: "[SEP]", CLS: "[CLS]"}


def _to_bytes(text) -> bytes:
    return text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8")


def encode(text) -> list[int]:
    return list(_to_bytes(text))


def decode(ids) -> bytes:
    """Bytes for the non-special ids; special tokens are dropped."""
    return bytes(i for i in ids if i < 256)


def tokenize(text, max_len: int) -> list[int]:
    """UTF-8 bytes truncated to ``max_len - 1``, then EOS (FirstP truncation)."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return encode(text)[: max_len - 1] + [EOS]
