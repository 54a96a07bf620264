"""WordPiece and character tokenization over a shared :class:`Vocabulary`."""

from __future__ import annotations

import os
import unicodedata
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS, SEP = "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, SEP)
MAX_WORD_CHARS = 100


class VocabFormatError(ValueError):
    pass


class Vocabulary:
    """Bijective token <-> id map with the five reserved special tokens."""

    def __init__(self, tokens: Sequence[str], prefix: str = "##"):
        self.prefix = prefix
        self.id_to_token: list[str] = []
        self.token_to_id: dict[str, int] = {}
        for lineno, tok in enumerate(tokens, start=1):
            if tok == "":
                raise VocabFormatError(f"line {lineno}: empty token")
            if tok in self.token_to_id:
                raise VocabFormatError(f"line {lineno}: duplicate token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)
        for tok in SPECIAL_TOKENS:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.id_to_token)
                self.id_to_token.append(tok)
        self.pad_id = self.token_to_id[PAD]
        self.unk_id = self.token_to_id[UNK]
        self.bos_id = self.token_to_id[BOS]
        self.eos_id = self.token_to_id[EOS]
        self.sep_id = self.token_to_id[SEP]
        self.special_ids = frozenset(self.token_to_id[t] for t in SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")


def load_vocab(path) -> Vocabulary:
    """Read a one-token-per-line vocabulary; missing specials are appended."""
    with open(path, encoding="utf-8", newline="") as f:
        text = f.read()
    if text.endswith("\n"):
        text = text[:-1]
    lines = text.split("\n") if text else []
    return Vocabulary(lines)


def build_char_vocab(paths: Iterable[str | os.PathLike]) -> Vocabulary:
    """Specials first, then every distinct character in first-occurrence order."""
    seen: dict[str, None] = {}
    for path in paths:
        with open(path, encoding="utf-8") as f:
            for line in f:
                for ch in line:
                    if ch not in "\r\n":
                        seen.setdefault(ch)
    chars = [c for c in seen if c not in SPECIAL_TOKENS]
    return Vocabulary(list(SPECIAL_TOKENS) + chars)


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and detach punctuation as separate words."""
    words: list[str] = []
    for chunk in text.lower().split():
        current = []
        for ch in chunk:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


def normalize(text: str) -> str:
    """The text ``decode(wordpiece_encode(text))`` reproduces when nothing is UNK."""
    return " ".join(basic_tokenize(text))


def wordpiece_word(vocab: Vocabulary, word: str) -> list[int]:
    if len(word) > MAX_WORD_CHARS:
        return [vocab.unk_id]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = vocab.prefix + piece
            if piece in vocab.token_to_id:
                match = vocab.token_to_id[piece]
                break
            end -= 1
        if match is None:
            return [vocab.unk_id]
        pieces.append(match)
        start = end
    return pieces


def wordpiece_encode(vocab: Vocabulary, text: str) -> list[int]:
    ids: list[int] = []
    for word in basic_tokenize(text):
        ids.extend(wordpiece_word(vocab, word))
    return ids


def char_encode(vocab: Vocabulary, text: str) -> list[int]:
    """One id per character; whitespace the vocabulary lacks is dropped rather than mapped to UNK."""
    return [vocab.token_to_id.get(ch, vocab.unk_id) for ch in text
            if ch in vocab.token_to_id or not ch.isspace()]


def _check_ids(vocab: Vocabulary, ids: Sequence[int]) -> None:
    for i in ids:
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} out of range for vocabulary size {len(vocab)}")


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Inverse of :func:`wordpiece_encode`; special tokens are dropped."""
    _check_ids(vocab, ids)
    out: list[str] = []
    for i in ids:
        if i in vocab.special_ids and i != vocab.unk_id:
            continue
        tok = vocab.id_to_token[i]
        if tok.startswith(vocab.prefix) and out:
            out[-1] += tok[len(vocab.prefix):]
        else:
            out.append(tok)
    return " ".join(out)


def char_decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    _check_ids(vocab, ids)
    return "".join(vocab.id_to_token[i] for i in ids if i not in vocab.special_ids or i == vocab.unk_id)


TOKENIZER_MODES = ("wordpiece", "char")


def encode_text(vocab: Vocabulary, text: str, mode: str) -> list[int]:
    if mode == "wordpiece":
        return wordpiece_encode(vocab, text)
    if mode == "char":
        return char_encode(vocab, text)
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def decode_ids(vocab: Vocabulary, ids: Sequence[int], mode: str) -> str:
    if mode == "wordpiece":
        return decode(vocab, ids)
    if mode == "char":
        return char_decode(vocab, ids)
    raise ValueError(f"unknown tokenizer mode {mode!r}")
