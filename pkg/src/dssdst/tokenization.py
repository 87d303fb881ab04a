"""Tokenizers that keep character offsets so extracted spans map back to text."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
SLOT = "[SLOT]"
TURN_SEP = ";"
VALUE_SEP = "-"

SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, SLOT, TURN_SEP, VALUE_SEP)

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


class Token(NamedTuple):
    text: str
    start: int = -1
    end: int = -1
    # "system" / "user" for dialogue text, None for inserted special tokens
    source: str | None = None


class WordTokenizer:
    """Lower-cased word/punctuation tokenizer over a fixed vocabulary.

    Unknown words map to ``[UNK]``.  The first ``len(SPECIAL_TOKENS)`` ids are
    reserved for the special tokens, ``[PAD]`` being id 0.
    """

    def __init__(self, vocab: Sequence[str]):
        vocab = list(vocab)
        if tuple(vocab[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens %r" % (SPECIAL_TOKENS,))
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary contains duplicate entries")
        self.vocab = vocab
        self.token_to_id = {tok: i for i, tok in enumerate(vocab)}

    def __len__(self):
        return len(self.vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "WordTokenizer":
        counts = Counter()
        for text in texts:
            counts.update(tok.text for tok in cls.split(text))
        words = sorted(w for w, c in counts.items() if c >= min_count and w not in SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + words)

    @staticmethod
    def split(text: str, source: str | None = None) -> list[Token]:
        lowered = text.lower()
        return [Token(m.group(0), m.start(), m.end(), source) for m in _WORD_RE.finditer(lowered)]

    def tokenize(self, text: str, source: str | None = None) -> list[Token]:
        return self.split(text, source)

    def special(self, name: str) -> Token:
        return Token(name)

    def convert_tokens_to_ids(self, tokens: Iterable[Token | str]) -> list[int]:
        unk = self.token_to_id[UNK]
        out = []
        for tok in tokens:
            text = tok.text if isinstance(tok, Token) else tok
            out.append(self.token_to_id.get(text, unk))
        return out

    def special_id(self, name: str) -> int:
        return self.token_to_id[name]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        return cls([line for line in lines if line])


class PretrainedTokenizerAdapter:
    """Wraps a Hugging Face fast tokenizer behind the :class:`WordTokenizer` surface.

    ``[SLOT]`` is registered as an additional special token; the remaining
    markers reuse the tokenizer's own ``[CLS]``/``[SEP]``/``[UNK]``/``[PAD]``.
    """

    def __init__(self, hf_tokenizer):
        if not getattr(hf_tokenizer, "is_fast", False):
            raise ValueError("a fast tokenizer is required for character offsets")
        hf_tokenizer.add_special_tokens({"additional_special_tokens": [SLOT]})
        self.hf = hf_tokenizer
        self._specials = {
            PAD: hf_tokenizer.pad_token,
            UNK: hf_tokenizer.unk_token,
            CLS: hf_tokenizer.cls_token,
            SEP: hf_tokenizer.sep_token,
            SLOT: SLOT,
            TURN_SEP: TURN_SEP,
            VALUE_SEP: VALUE_SEP,
        }

    @classmethod
    def from_pretrained(cls, name: str) -> "PretrainedTokenizerAdapter":
        from transformers import AutoTokenizer

        return cls(AutoTokenizer.from_pretrained(name, use_fast=True))

    @property
    def vocab_size(self) -> int:
        return len(self.hf)

    def __len__(self):
        return len(self.hf)

    def tokenize(self, text: str, source: str | None = None) -> list[Token]:
        enc = self.hf(text, add_special_tokens=False, return_offsets_mapping=True)
        pieces = self.hf.convert_ids_to_tokens(enc["input_ids"])
        return [Token(p, s, e, source) for p, (s, e) in zip(pieces, enc["offset_mapping"])]

    def special(self, name: str) -> Token:
        return Token(self._specials[name])

    def convert_tokens_to_ids(self, tokens: Iterable[Token | str]) -> list[int]:
        texts = [tok.text if isinstance(tok, Token) else tok for tok in tokens]
        return list(self.hf.convert_tokens_to_ids(texts))

    def special_id(self, name: str) -> int:
        return self.hf.convert_tokens_to_ids(self._specials[name])


def turn_tokens(tokenizer, system: str, user: str) -> list[Token]:
    """Token layout of one dialogue turn: ``R ; U [SEP]``."""
    return (
        tokenizer.tokenize(system, "system")
        + [tokenizer.special(TURN_SEP)]
        + tokenizer.tokenize(user, "user")
        + [tokenizer.special(SEP)]
    )
