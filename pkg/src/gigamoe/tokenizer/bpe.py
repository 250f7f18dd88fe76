"""Byte-level BPE: greedy pair-merge training, encoding and decoding.

Ids 0..255 are the raw bytes. Every merge maps an adjacent id pair to the
token whose bytes are their concatenation; if that byte string already has an
id (two merge paths can spell the same bytes) the existing id is reused, so
ids and byte strings stay in one-to-one correspondence.
"""
from __future__ import annotations

import heapq
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import InputError
from ..kvtext import atomic_write_text

_CHUNK = re.compile(rb"\s*\S+|\s+")


def split_chunks(data: bytes, whitespace_split: bool) -> list[bytes]:
    """Pre-tokenization: whole input, or runs of whitespace glued to the
    following word (``b"hello world"`` -> ``[b"hello", b" world"]``)."""
    if not whitespace_split:
        return [data] if data else []
    return _CHUNK.findall(data)


@dataclass
class BPEVocab:
    merges: list[tuple[int, int]] = field(default_factory=list)
    whitespace_split: bool = False
    tokens: list[bytes] = field(init=False)
    ranks: dict[tuple[int, int], tuple[int, int]] = field(init=False)

    def __post_init__(self):
        self.tokens = [bytes([b]) for b in range(256)]
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self.ranks = {}
        merges, self.merges = self.merges, []
        for a, b in merges:
            self.add_merge(a, b)
        self._cache: dict[bytes, list[int]] = {}

    def add_merge(self, a: int, b: int) -> int:
        if not (0 <= a < len(self.tokens) and 0 <= b < len(self.tokens)):
            raise InputError(f"merge ({a}, {b}) refers to an unknown token")
        if (a, b) in self.ranks:
            raise InputError(f"duplicate merge ({a}, {b})")
        joined = self.tokens[a] + self.tokens[b]
        new_id = self._ids.get(joined)
        if new_id is None:
            new_id = len(self.tokens)
            self.tokens.append(joined)
            self._ids[joined] = new_id
        self.ranks[(a, b)] = (len(self.merges), new_id)
        self.merges.append((a, b))
        self._cache = {}
        return new_id

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def token_id(self, token: bytes) -> int | None:
        return self._ids.get(token)

    def truncated(self, n_merges: int) -> "BPEVocab":
        """The vocab after only the first ``n_merges`` merges."""
        return BPEVocab(self.merges[:n_merges], self.whitespace_split)

    # -- encode / decode ---------------------------------------------------
    def _encode_chunk(self, chunk: bytes) -> list[int]:
        ids = list(chunk)
        n = len(ids)
        if n < 2 or not self.ranks:
            return ids
        nxt = list(range(1, n)) + [-1]
        prv = list(range(-1, n - 1))
        alive = [True] * n
        heap = []
        ranks = self.ranks
        for i in range(n - 1):
            r = ranks.get((ids[i], ids[i + 1]))
            if r is not None:
                heap.append((r[0], i, ids[i], ids[i + 1]))
        heapq.heapify(heap)
        while heap:
            rank, i, a, b = heapq.heappop(heap)
            j = nxt[i] if alive[i] else -1
            if j < 0 or ids[i] != a or ids[j] != b:
                continue
            ids[i] = ranks[(a, b)][1]
            alive[j] = False
            nxt[i] = nxt[j]
            if nxt[j] >= 0:
                prv[nxt[j]] = i
            p = prv[i]
            if p >= 0:
                r = ranks.get((ids[p], ids[i]))
                if r is not None:
                    heapq.heappush(heap, (r[0], p, ids[p], ids[i]))
            q = nxt[i]
            if q >= 0:
                r = ranks.get((ids[i], ids[q]))
                if r is not None:
                    heapq.heappush(heap, (r[0], i, ids[i], ids[q]))
        return [t for t, keep in zip(ids, alive) if keep]

    def encode(self, data: bytes) -> list[int]:
        if isinstance(data, str):
            data = data.encode("utf-8")
        out: list[int] = []
        for chunk in split_chunks(data, self.whitespace_split):
            if self.whitespace_split:
                cached = self._cache.get(chunk)
                if cached is None:
                    cached = self._cache[chunk] = self._encode_chunk(chunk)
                out.extend(cached)
            else:
                out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int]) -> bytes:
        ids = [int(i) for i in ids]
        n = len(self.tokens)
        bad = [i for i in ids if not 0 <= i < n]
        if bad:
            raise InputError(f"unknown token id {bad[0]} (vocab size {n})")
        return b"".join(self.tokens[i] for i in ids)

    # -- file format -------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"bpe-vocab {self.vocab_size} {len(self.merges)} "
                 f"{'whitespace' if self.whitespace_split else 'bytes'}"]
        lines += [f"{self.tokens[a].hex()} {self.tokens[b].hex()}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "BPEVocab":
        lines = text.splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 4 or head[0] != "bpe-vocab" or head[3] not in ("whitespace", "bytes"):
            raise InputError("missing 'bpe-vocab <size> <merges> <mode>' header")
        vocab = cls(whitespace_split=head[3] == "whitespace")
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            try:
                left, right = (bytes.fromhex(h) for h in line.split())
            except ValueError:
                raise InputError(f"line {lineno}: expected two hex tokens") from None
            a, b = vocab.token_id(left), vocab.token_id(right)
            if a is None or b is None:
                raise InputError(f"line {lineno}: merge operand not defined by earlier lines")
            vocab.add_merge(a, b)
        if vocab.vocab_size != int(head[1]) or len(vocab.merges) != int(head[2]):
            raise InputError("header counts disagree with the merge list")
        return vocab

    @classmethod
    def load(cls, path) -> "BPEVocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def byte_vocab(whitespace_split: bool = False) -> BPEVocab:
    """The 256-token identity tokenizer."""
    return BPEVocab([], whitespace_split)


def _merge_seq(seq: list[int], a: int, b: int, new: int) -> list[int]:
    out = []
    i, n = 0, len(seq)
    while i < n:
        if i < n - 1 and seq[i] == a and seq[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_bpe(corpus: Sequence[bytes], target_vocab_size: int, seed: int = 0,
              whitespace_split: bool = False, protected_tokens: Sequence[bytes] = (),
              max_documents: int | None = None) -> BPEVocab:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Frequency ties go to the pair whose (left bytes, right bytes) sorts
    first. ``protected_tokens`` are spelled out by merges before training
    starts. ``seed`` only matters when ``max_documents`` subsamples the corpus.
    """
    docs = [d.encode("utf-8") if isinstance(d, str) else bytes(d) for d in corpus]
    if not docs or not any(docs):
        raise InputError("cannot train a tokenizer on an empty corpus")
    if target_vocab_size < 256:
        raise InputError("target_vocab_size must be at least 256")
    if max_documents is not None and len(docs) > max_documents:
        keep = np.sort(np.random.default_rng(seed).choice(len(docs), max_documents, replace=False))
        docs = [docs[i] for i in keep]
    vocab = BPEVocab(whitespace_split=whitespace_split)
    for tok in protected_tokens:
        tok = tok.encode("utf-8") if isinstance(tok, str) else bytes(tok)
        cur = tok[0]
        for byte in tok[1:]:
            if vocab.vocab_size >= target_vocab_size:
                break
            pair = (cur, byte)
            cur = vocab.ranks[pair][1] if pair in vocab.ranks else vocab.add_merge(*pair)

    freq: dict[bytes, int] = defaultdict(int)
    for d in docs:
        for chunk in split_chunks(d, whitespace_split):
            freq[chunk] += 1
    seqs = [vocab.encode(chunk) for chunk in freq]
    weights = list(freq.values())

    counts: dict[tuple[int, int], int] = defaultdict(int)
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for idx, (seq, w) in enumerate(zip(seqs, weights)):
        for pair in zip(seq, seq[1:]):
            counts[pair] += w
            where[pair].add(idx)

    tokens = vocab.tokens
    while vocab.vocab_size < target_vocab_size and counts:
        top = max(counts.values())
        if top < 2:
            break
        best = min((p for p, c in counts.items() if c == top),
                   key=lambda p: (tokens[p[0]], tokens[p[1]]))
        if best in vocab.ranks:
            # already merged via a protected token; nothing left to count
            del counts[best]
            continue
        new = vocab.add_merge(*best)
        for idx in sorted(where.pop(best, ())):
            seq, w = seqs[idx], weights[idx]
            for pair in zip(seq, seq[1:]):
                counts[pair] -= w
                if counts[pair] <= 0:
                    del counts[pair]
                    where.pop(pair, None)
            seq = seqs[idx] = _merge_seq(seq, best[0], best[1], new)
            for pair in zip(seq, seq[1:]):
                counts[pair] += w
                where[pair].add(idx)
        counts.pop(best, None)
    return vocab
