"""Exact and MinHash near-duplicate removal."""
from __future__ import annotations

import hashlib
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Sequence

import numpy as np

from ..errors import ConfigError, InputError
from .corpus import Document

MERSENNE_61 = np.uint64((1 << 61) - 1)
_TRAILING_WS = re.compile(r"[ \t\r\f\v]+$", re.MULTILINE)


def normalize_text(text: str) -> str:
    """Strip trailing whitespace from every line and from the end."""
    return _TRAILING_WS.sub("", text).rstrip()


def content_hash(text: str) -> str:
    return hashlib.sha256(normalize_text(text).encode("utf-8", "surrogatepass")).hexdigest()


def exact_dedup(documents: Sequence[Document]) -> list[Document]:
    """Keep the first document for each distinct normalized content."""
    seen: set[str] = set()
    kept = []
    for doc in documents:
        h = content_hash(doc.text)
        if h not in seen:
            seen.add(h)
            kept.append(doc)
    return kept


# -- MinHash ---------------------------------------------------------------

@dataclass(frozen=True)
class MinHashSignature:
    values: np.ndarray  # uint64, one minimum per hash function
    shingle_size: int
    seed: int
    short: bool = False  # document shorter than one shingle; hashed as a whole

    @property
    def num_hashes(self) -> int:
        return len(self.values)


@lru_cache(maxsize=32)
def _permutations(num_hashes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    a = rng.integers(1, 1 << 32, size=num_hashes, dtype=np.uint64)
    b = rng.integers(0, int(MERSENNE_61), size=num_hashes, dtype=np.uint64)
    return a, b


def shingles(text: str, shingle_size: int) -> set[str]:
    if len(text) < shingle_size:
        return {text}
    return {text[i:i + shingle_size] for i in range(len(text) - shingle_size + 1)}


def _shingle_hash(s: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(s.encode("utf-8", "surrogatepass"), digest_size=4).digest(), "little")


def minhash_signature(text: str, num_hashes: int = 128, shingle_size: int = 5,
                      seed: int = 0) -> MinHashSignature:
    """Minimum of ``(a_i * h(s) + b_i) mod (2**61 - 1)`` over character shingles ``s``."""
    if isinstance(text, Document):
        text = text.text
    if num_hashes < 1 or shingle_size < 1:
        raise ConfigError("num_hashes and shingle_size must be positive")
    short = len(text) < shingle_size
    hv = np.fromiter((_shingle_hash(s) for s in shingles(text, shingle_size)), dtype=np.uint64)
    a, b = _permutations(num_hashes, seed)
    # a, hv < 2**32 so the product fits in 64 bits
    perm = (np.multiply.outer(a, hv) % MERSENNE_61 + b[:, None]) % MERSENNE_61
    return MinHashSignature(perm.min(axis=1), shingle_size, seed, short)


def jaccard_estimate(a: MinHashSignature, b: MinHashSignature) -> float:
    if (a.num_hashes, a.seed, a.shingle_size) != (b.num_hashes, b.seed, b.shingle_size):
        raise InputError("signatures built with different parameters are not comparable")
    return float(np.mean(a.values == b.values))


def true_jaccard(x: str, y: str, shingle_size: int = 5) -> float:
    """Exact shingle-set Jaccard similarity (slow reference)."""
    sx, sy = shingles(x, shingle_size), shingles(y, shingle_size)
    union = sx | sy
    return len(sx & sy) / len(union) if union else 1.0


@dataclass
class DuplicateCluster:
    representative: str
    members: list[str]
    estimates: dict[str, float] = field(default_factory=dict)


@dataclass
class DedupResult:
    survivors: list[Document]
    clusters: list[DuplicateCluster]

    def report_lines(self) -> list[str]:
        lines = []
        for c in self.clusters:
            others = ", ".join(f"{m}:{c.estimates[m]:.3f}" for m in c.members
                               if m != c.representative)
            lines.append(f"{c.representative}\t{len(c.members)}\t{others}")
        return lines


def _id_key(doc_id: str):
    return (0, int(doc_id), "") if doc_id.isdigit() else (1, 0, doc_id)


def _sig_job(args):
    text, num_hashes, shingle_size, seed = args
    return minhash_signature(text, num_hashes, shingle_size, seed)


def minhash_dedup(documents: Sequence[Document], threshold: float = 0.8, band_count: int = 32,
                  num_hashes: int = 128, shingle_size: int = 5, seed: int = 0,
                  exhaustive: bool = False, workers: int = 1) -> DedupResult:
    """Cluster documents whose estimated Jaccard reaches ``threshold``.

    Candidate pairs come from LSH banding (``band_count`` bands of
    ``num_hashes // band_count`` rows) or, with ``exhaustive``, from all
    pairs. The lowest id of each cluster survives.
    """
    if not 0 < threshold <= 1:
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    if band_count < 1 or num_hashes % band_count:
        raise ConfigError(f"band_count {band_count} must divide num_hashes {num_hashes}")
    jobs = [(d.text, num_hashes, shingle_size, seed) for d in documents]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            sigs = list(pool.map(_sig_job, jobs, chunksize=64))
    else:
        sigs = [_sig_job(j) for j in jobs]
    n = len(documents)
    if exhaustive:
        candidates = set(combinations(range(n), 2))
    else:
        rows = num_hashes // band_count
        candidates = set()
        for band in range(band_count):
            buckets: dict[bytes, list[int]] = defaultdict(list)
            for i, s in enumerate(sigs):
                buckets[s.values[band * rows:(band + 1) * rows].tobytes()].append(i)
            for members in buckets.values():
                candidates.update(combinations(members, 2))

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in sorted(candidates):
        if jaccard_estimate(sigs[i], sigs[j]) >= threshold:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = defaultdict(list)
    for i in range(n):
        groups[find(i)].append(i)
    clusters, drop = [], set()
    for members in groups.values():
        if len(members) < 2:
            continue
        rep = min(members, key=lambda i: _id_key(documents[i].id))
        drop.update(m for m in members if m != rep)
        clusters.append(DuplicateCluster(
            documents[rep].id, [documents[m].id for m in members],
            {documents[m].id: jaccard_estimate(sigs[rep], sigs[m]) for m in members}))
    clusters.sort(key=lambda c: _id_key(c.representative))
    survivors = [d for i, d in enumerate(documents) if i not in drop]
    return DedupResult(survivors, clusters)
