"""Token counting with a pluggable tokenizer registry."""
from __future__ import annotations

import math
from typing import Callable

from .errors import UnknownTokenizer

_TOKENIZERS: dict[str, Callable[[str], int]] = {
    "bytes/4": lambda text: math.ceil(len(text.encode("utf-8")) / 4),
}


def register_tokenizer(tokenizer_id: str, counter: Callable[[str], int]) -> None:
    """Make ``counter`` available under ``tokenizer_id`` (e.g. a tiktoken or HF wrapper)."""
    _TOKENIZERS[tokenizer_id] = counter


def count_tokens(text: str, tokenizer_id: str = "bytes/4") -> int:
    try:
        counter = _TOKENIZERS[tokenizer_id]
    except KeyError:
        raise UnknownTokenizer(f"unknown tokenizer {tokenizer_id!r}") from None
    n = int(counter(text))
    if n < 0:
        raise ValueError(f"tokenizer {tokenizer_id!r} returned a negative count")
    return n
