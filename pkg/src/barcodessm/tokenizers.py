"""Nucleotide tokenizers: character-level and non-overlapping k-mer.

Vocabulary layout is deterministic: special tokens first (in declared order),
then the symbol inventory — A,C,G,T,N for the character tokenizer, all 4**k
k-mers over A,C,G,T in lexicographic order for the k-mer tokenizer. A k-mer
window containing N (or any non-ACGT residue) maps to [UNK], which keeps the
vocabulary at exactly 4**k + n_special tokens.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from itertools import product

import numpy as np

CHAR_SYMBOLS = "ACGTN"
KMER_ALPHABET = "ACGT"
SUPPORTED_K = (4, 5, 6)
DEFAULT_SPECIALS = ("[PAD]", "[UNK]", "[MASK]")


@dataclass(frozen=True)
class TokenizerSpec:
    kind: str  # "char" | "kmer"
    k: int | None
    special_tokens: tuple[str, ...]
    tokens: tuple[str, ...]  # full vocabulary, specials first

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.special_tokens.index("[PAD]")

    @property
    def unk_id(self) -> int:
        return self.special_tokens.index("[UNK]")

    @property
    def mask_id(self) -> int:
        return self.special_tokens.index("[MASK]")

    @property
    def window(self) -> int:
        return 1 if self.kind == "char" else self.k

    def token_to_id(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "k": self.k,
                "special_tokens": list(self.special_tokens),
                "vocab_hash": self.vocab_hash(),
            }
        )

    @staticmethod
    def from_json(text: str) -> "TokenizerSpec":
        obj = json.loads(text)
        spec = build_tokenizer(obj["kind"], k=obj["k"], special_tokens=tuple(obj["special_tokens"]))
        if spec.vocab_hash() != obj["vocab_hash"]:
            raise ValueError("tokenizer vocab hash mismatch; incompatible checkpoint")
        return spec


@dataclass
class TokenSeq:
    ids: np.ndarray  # (n_tokens,) int64
    pad_mask: np.ndarray  # (n_tokens,) bool, true = real token
    source_len: int

    def __post_init__(self):
        if self.ids.shape != self.pad_mask.shape:
            raise ValueError("ids and pad_mask lengths differ")


def build_tokenizer(kind: str, k: int | None = None, special_tokens: tuple[str, ...] = DEFAULT_SPECIALS) -> TokenizerSpec:
    for name in ("[PAD]", "[UNK]", "[MASK]"):
        if name not in special_tokens:
            raise ValueError(f"special_tokens must include {name}")
    if kind == "char":
        symbols = tuple(CHAR_SYMBOLS)
        k = None
    elif kind == "kmer":
        if k not in SUPPORTED_K:
            raise ValueError(f"unsupported k={k}; expected one of {SUPPORTED_K}")
        symbols = tuple("".join(p) for p in product(KMER_ALPHABET, repeat=k))
    else:
        raise ValueError(f"unknown tokenizer kind {kind!r}")
    return TokenizerSpec(kind=kind, k=k, special_tokens=tuple(special_tokens), tokens=tuple(special_tokens) + symbols)


def encode(spec: TokenizerSpec, seq: str) -> TokenSeq:
    """Tokenize a normalized, length-fixed nucleotide string.

    char: one token per character. kmer: non-overlapping left-to-right windows
    of length k; a window containing N maps to [UNK]; a trailing remainder
    shorter than k is dropped.
    """
    bad = set(seq) - set(CHAR_SYMBOLS)
    if bad:
        raise ValueError(f"unnormalized characters in sequence: {sorted(bad)}")
    lut = spec.token_to_id()
    if spec.kind == "char":
        ids = np.fromiter((lut[ch] for ch in seq), dtype=np.int64, count=len(seq))
    else:
        k = spec.k
        n = len(seq) // k
        ids = np.empty(n, dtype=np.int64)
        for i in range(n):
            window = seq[i * k : (i + 1) * k]
            ids[i] = lut.get(window, spec.unk_id)
    return TokenSeq(ids=ids, pad_mask=np.ones(ids.shape, dtype=bool), source_len=len(seq))


def decode(spec: TokenizerSpec, ts: TokenSeq) -> str:
    """Inverse of encode on [UNK]-free output; [PAD] drops, [UNK] and [MASK]
    decode to a window of Ns."""
    w = spec.window
    parts = []
    n_special = len(spec.special_tokens)
    for tid in ts.ids:
        tid = int(tid)
        if tid < 0 or tid >= spec.vocab_size:
            raise ValueError(f"token id {tid} out of vocabulary (size {spec.vocab_size})")
        if tid == spec.pad_id:
            continue
        if tid < n_special:
            parts.append("N" * w)
        else:
            parts.append(spec.tokens[tid])
    return "".join(parts)


def encode_batch(spec: TokenizerSpec, seqs: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Stack encodings of same-length sequences into (ids, pad_mask) arrays."""
    encoded = [encode(spec, s) for s in seqs]
    lengths = {e.ids.size for e in encoded}
    if len(lengths) > 1:
        raise ValueError(f"cannot batch sequences with differing token counts: {sorted(lengths)}")
    ids = np.stack([e.ids for e in encoded])
    mask = np.stack([e.pad_mask for e in encoded])
    return ids, mask
