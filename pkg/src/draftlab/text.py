"""Character tokenizer with id 0 reserved for the CTC blank."""

from __future__ import annotations

from typing import Sequence

from .errors import TokenizationError

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz' "
BLANK = 0


class Tokenizer:
    def __init__(self, alphabet: str = DEFAULT_ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise TokenizationError("alphabet has duplicate characters")
        self.alphabet = alphabet
        self._ids = {c: i + 1 for i, c in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 1

    def tokenize(self, transcript: str) -> list[int]:
        ids = []
        for pos, ch in enumerate(transcript):
            if ch not in self._ids:
                raise TokenizationError(f"character {ch!r} at position {pos} is not in the alphabet")
            ids.append(self._ids[ch])
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        chars = []
        for i in ids:
            if not 1 <= i <= len(self.alphabet):
                raise TokenizationError(f"token id {i} is outside 1..{len(self.alphabet)}")
            chars.append(self.alphabet[i - 1])
        return "".join(chars)


_DEFAULT = Tokenizer()


def tokenize(transcript: str) -> list[int]:
    return _DEFAULT.tokenize(transcript)


def detokenize(ids: Sequence[int]) -> str:
    return _DEFAULT.detokenize(ids)
