"""Character-per-token comparison of tokenizers across domain corpora."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from ..errors import InputError
from .bpe import BPEVocab


@dataclass
class DomainCorpus:
    name: str
    documents: list[bytes]

    @property
    def char_count(self) -> int:
        return sum(count_chars(d) for d in self.documents)


def count_chars(doc: bytes) -> int:
    """Unicode scalar values in ``doc``; undecodable bytes count one each."""
    if isinstance(doc, str):
        return len(doc)
    return len(doc.decode("utf-8", errors="surrogateescape"))


def chars_per_token(vocab: BPEVocab, corpus: DomainCorpus) -> float:
    """Total characters over total tokens for the whole corpus."""
    chars = tokens = 0
    for doc in corpus.documents:
        chars += count_chars(doc)
        tokens += len(vocab.encode(doc))
    if tokens == 0:
        raise InputError(f"corpus {corpus.name!r} is empty")
    return chars / tokens


@dataclass
class ComparisonTable:
    """Rows of per-domain ratios plus their arithmetic mean, best mean first."""

    domains: list[str]
    rows: list[tuple[str, list[float], float]]

    @classmethod
    def from_ratios(cls, domains: Sequence[str],
                    ratios: Mapping[str, Sequence[float]]) -> "ComparisonTable":
        if not domains or not ratios:
            raise InputError("comparison needs at least one tokenizer and one domain")
        rows = []
        for name, vals in ratios.items():
            vals = [float(v) for v in vals]
            if len(vals) != len(domains):
                raise InputError(f"{name}: {len(vals)} ratios for {len(domains)} domains")
            rows.append((name, vals, sum(vals) / len(vals)))
        rows.sort(key=lambda r: -r[2])
        return cls(list(domains), rows)

    def mean_score(self, name: str) -> float:
        for row_name, _, mean in self.rows:
            if row_name == name:
                return mean
        raise KeyError(name)

    def to_text(self, digits: int = 2) -> str:
        header = ["Tokenizer", *self.domains, "Mean Score"]
        body = [[name, *(f"{v:.{digits}f}" for v in vals), f"{mean:.{digits}f}"]
                for name, vals, mean in self.rows]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        fmt = lambda cells: "  ".join(  # noqa: E731
            c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        return "\n".join([fmt(header), *(fmt(r) for r in body)]) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tokenizer", *self.domains, "mean_score"])
        for name, vals, mean in self.rows:
            w.writerow([name, *(repr(v) for v in vals), repr(mean)])
        return buf.getvalue()


def _score(args):
    vocab, corpus = args
    return chars_per_token(vocab, corpus)


def compare_tokenizers(vocabs: Mapping[str, BPEVocab], corpora: Sequence[DomainCorpus],
                       workers: int = 1) -> ComparisonTable:
    """Score every tokenizer on every corpus."""
    if not vocabs or not corpora:
        raise InputError("comparison needs at least one tokenizer and one corpus")
    jobs = [(v, c) for v in vocabs.values() for c in corpora]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_score, jobs))
    else:
        scores = [_score(j) for j in jobs]
    n = len(corpora)
    ratios = {name: scores[i * n:(i + 1) * n] for i, name in enumerate(vocabs)}
    return ComparisonTable.from_ratios([c.name for c in corpora], ratios)
