"""Text pipeline: tokenization, vocabulary, embeddings, padded documents.

Raw text goes through three stages before it reaches the classifier:
tokenize into lowercased word/punctuation tokens, map tokens to dense
integer ids against a fixed vocabulary (unknown tokens collapse to a
single OOV id), and look the ids up in an embedding matrix whose PAD row
is all zeros so padding is inert in convolution windows.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ShapeError

PAD_TOKEN = "<PAD>"
OOV_TOKEN = "<OOV>"

# Words and standalone punctuation; "great tv," -> ["great", "tv", ","].
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_tokens(text: str) -> list[str]:
    """Lowercase and split into word tokens with punctuation detached."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Token-to-id map with reserved PAD and OOV ids.

    Ids are dense in [0, size); PAD is always id 0 and OOV id 1.  Lookup
    of an unknown token returns the OOV id, never an error.
    """

    index: dict[str, int]
    pad_id: int = 0
    oov_id: int = 1

    @property
    def size(self) -> int:
        return len(self.index)

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.oov_id)

    def tokens(self) -> list[str]:
        """All tokens ordered by id (including the PAD/OOV markers)."""
        ordered = sorted(self.index.items(), key=lambda kv: kv[1])
        return [tok for tok, _ in ordered]

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        """Build from an iterable of distinct tokens (PAD/OOV prepended)."""
        index = {PAD_TOKEN: 0, OOV_TOKEN: 1}
        for tok in tokens:
            if tok in (PAD_TOKEN, OOV_TOKEN):
                continue
            index.setdefault(tok, len(index))
        return cls(index)

    @classmethod
    def from_corpus(
        cls,
        texts: Iterable[str],
        min_count: int = 1,
        max_size: int | None = None,
    ) -> "Vocabulary":
        """Build from raw texts, most frequent tokens first.

        ``min_count`` and ``max_size`` control vocabulary truncation;
        truncated tokens map to OOV at lookup time.
        """
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(split_tokens(text))
        kept = [t for t, c in counts.items() if c >= min_count]
        kept.sort(key=lambda t: (-counts[t], t))
        if max_size is not None:
            kept = kept[: max(0, max_size - 2)]
        return cls.from_tokens(kept)


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    """Write one token per line; the line number is the token id."""
    Path(path).write_text("\n".join(vocab.tokens()) + "\n", encoding="utf-8")


def load_vocabulary(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or lines[0] != PAD_TOKEN or lines[1] != OOV_TOKEN:
        raise FormatError(f"{path}: vocabulary file must start with {PAD_TOKEN} and {OOV_TOKEN}")
    index = {tok: i for i, tok in enumerate(lines)}
    if len(index) != len(lines):
        raise FormatError(f"{path}: duplicate token in vocabulary file")
    return Vocabulary(index)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """V x m embedding table aligned to vocabulary ids; PAD row is zero."""

    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ShapeError("embedding matrix must be 2-D")
        if np.any(self.vectors[0] != 0.0):
            raise ShapeError("PAD embedding row must be all zeros")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class TokenizedDocument:
    """A document padded to fixed length.

    ``ids`` has exactly ``pad_len`` entries; ``tokens`` holds the original
    (pre-padding, post-truncation) token strings, so ``len(tokens)`` is the
    true length.
    """

    ids: np.ndarray
    tokens: tuple[str, ...]
    pad_len: int

    @property
    def true_length(self) -> int:
        return len(self.tokens)


def tokenize(text: str, vocab: Vocabulary, pad_len: int) -> TokenizedDocument:
    """Tokenize, map to ids, then truncate/pad to exactly ``pad_len``.

    Empty text yields an all-PAD document.
    """
    if pad_len < 1:
        raise ValueError("pad_len must be >= 1")
    toks = split_tokens(text)[:pad_len]
    ids = np.full(pad_len, vocab.pad_id, dtype=np.int64)
    for k, tok in enumerate(toks):
        ids[k] = vocab.id_of(tok)
    return TokenizedDocument(ids=ids, tokens=tuple(toks), pad_len=pad_len)


def _fallback_row(token: str, dim: int, scale: np.ndarray) -> np.ndarray:
    """Deterministic pseudorandom embedding for a token missing from the file.

    Seeded by the token string so repeated loads agree bit for bit, and
    scaled to the per-dimension spread of the rows that were loaded so the
    fallback is neither degenerate nor an outlier.
    """
    digest = int.from_bytes(token.encode("utf-8").ljust(8, b"\0")[:8], "little")
    rng = np.random.default_rng(np.random.SeedSequence([digest, dim]))
    return rng.standard_normal(dim) * scale


def load_embeddings(path: str | Path, vocab: Vocabulary) -> EmbeddingMatrix:
    """Load a GloVe-style text file ("token v1 v2 ... vm", one per line).

    Rows are aligned to vocabulary ids.  Vocabulary tokens absent from the
    file get a deterministic fallback row; the PAD row is zeroed.  Lines
    whose arity disagrees with the first line raise ``FormatError`` naming
    the line.
    """
    loaded: dict[str, np.ndarray] = {}
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                if not values:
                    raise FormatError(f"{path}:{lineno}: no embedding values")
                dim = len(values)
            if len(values) != dim:
                raise FormatError(
                    f"{path}:{lineno}: expected {dim} values, found {len(values)}"
                )
            try:
                loaded[token] = np.array([float(v) for v in values])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if dim is None:
        raise FormatError(f"{path}: embedding file is empty")

    if loaded:
        stacked = np.stack(list(loaded.values()))
        scale = stacked.std(axis=0)
        scale[scale == 0.0] = 1.0
    else:
        scale = np.ones(dim)

    vectors = np.zeros((vocab.size, dim))
    for token, idx in vocab.index.items():
        if idx == vocab.pad_id:
            continue
        row = loaded.get(token)
        vectors[idx] = row if row is not None else _fallback_row(token, dim, scale)
    return EmbeddingMatrix(vectors)


def embed(doc: TokenizedDocument, emb: EmbeddingMatrix) -> np.ndarray:
    """Row k of the result is the embedding of token id k (an l x m matrix)."""
    if doc.ids.max(initial=0) >= emb.vocab_size:
        raise ShapeError(
            f"token id {int(doc.ids.max())} out of range for vocabulary of size {emb.vocab_size}"
        )
    return emb.vectors[doc.ids]


@dataclass(frozen=True)
class CorpusRecord:
    label: int
    text: str


def load_corpus_tsv(path: str | Path) -> list[CorpusRecord]:
    """Read a labelled corpus: one "label<TAB>text" record per line, labels 0/1."""
    records: list[CorpusRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            head, sep, text = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}:{lineno}: missing tab separator")
            if head not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {head!r}")
            records.append(CorpusRecord(label=int(head), text=text))
    return records
