"""PassKey retrieval suite: a digit key hidden once inside repetitive filler."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import InputError
from ..kvtext import atomic_write_text
from ..tokenizer import byte_vocab

FILLER_SENTENCES = (
    "The grass is green.",
    "The sky is blue.",
    "The sun is yellow.",
    "Here we go.",
    "There and back again.",
)
QUESTION = "What is the pass key? The pass key is"
BUDGET_TOLERANCE = 0.02
_KEY_RE = re.compile(r"The pass key is (\d+)\. Remember it\.")


def key_sentence(key: str) -> str:
    return f"The pass key is {key}. Remember it."


@dataclass(frozen=True)
class PassKeySample:
    document: str
    question: str
    key: str
    n_tokens: int
    position_fraction: float


def _filler(rng: np.random.Generator, n_sentences: int) -> tuple[str, list[int]]:
    picks = rng.integers(0, len(FILLER_SENTENCES), size=n_sentences)
    parts, starts, pos = [], [], 0
    for i in picks:
        starts.append(pos)
        s = FILLER_SENTENCES[i] + " "
        parts.append(s)
        pos += len(s)
    return "".join(parts), starts


def passkey_generate(filler_token_budget: int, key: str, seed: int = 0, tokenizer=None,
                     position_fraction: float | None = None) -> PassKeySample:
    """Build a document of about ``filler_token_budget`` tokens (key sentence
    included) with the key sentence at a sentence boundary near
    ``position_fraction`` of the filler (seeded when not given)."""
    key = str(key)
    if not key.isdigit() or not key.isascii():
        raise InputError(f"pass key must be a digit string, got {key!r}")
    if position_fraction is not None and not 0.0 <= position_fraction <= 1.0:
        raise InputError(f"position_fraction must lie in [0, 1], got {position_fraction}")
    tok = tokenizer if tokenizer is not None else byte_vocab()
    ntok = lambda text: len(tok.encode(text.encode("utf-8")))  # noqa: E731
    ks = key_sentence(key)
    if ntok(ks) > filler_token_budget:
        raise InputError(f"budget {filler_token_budget} cannot hold the key sentence "
                         f"({ntok(ks)} tokens)")
    rng = np.random.default_rng(seed)
    frac = float(rng.uniform()) if position_fraction is None else float(position_fraction)

    n_sent = max(8, filler_token_budget // 4)
    while True:
        filler, starts = _filler(np.random.default_rng([seed, n_sent]), n_sent)
        if ntok(filler) >= filler_token_budget:
            break
        n_sent *= 2
    starts_arr = np.asarray(starts)

    def build(length: int) -> str:
        cut = frac * length
        p = int(starts_arr[np.searchsorted(starts_arr, cut, side="right") - 1])
        p = min(p, length)
        return filler[:p] + ks + (" " + filler[p:length].rstrip() if length > p else "")

    lo, hi = 0, len(filler)
    while lo < hi:  # smallest filler length reaching the budget
        mid = (lo + hi) // 2
        if ntok(build(mid)) < filler_token_budget:
            lo = mid + 1
        else:
            hi = mid
    best = min((abs(ntok(build(n)) - filler_token_budget), -n, n)
               for n in range(max(0, lo - 8), min(len(filler), lo + 8) + 1))
    doc = build(best[2])
    count = ntok(doc)
    if abs(count - filler_token_budget) > BUDGET_TOLERANCE * filler_token_budget:
        raise InputError(f"could not fit budget {filler_token_budget} within 2% (got {count})")
    return PassKeySample(doc, QUESTION, key, count, frac)


def passkey_score(model_output: str, key: str) -> bool:
    return bool(key) and str(key) in (model_output or "")


def oracle_answer(document: str) -> str:
    """Cheating extractor: copy the key sentence out of the document."""
    m = _KEY_RE.search(document)
    return m.group(0) if m else ""


def generate_suite(budgets: Sequence[int], per_budget: int, seed: int = 0,
                   tokenizer=None) -> list[PassKeySample]:
    rng = np.random.default_rng(seed)
    samples = []
    for budget in budgets:
        for _ in range(per_budget):
            key = str(int(rng.integers(10_000, 100_000)))
            samples.append(passkey_generate(budget, key, int(rng.integers(2**31)), tokenizer))
    return samples


# -- suite directory ---------------------------------------------------------

def write_suite(out_dir, samples: Sequence[PassKeySample]) -> list[Path]:
    """``NNNN.document.txt`` / ``NNNN.question.txt`` / ``NNNN.answer.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        for kind, text in (("document", s.document), ("question", s.question), ("answer", s.key)):
            path = out_dir / f"{i:04d}.{kind}.txt"
            atomic_write_text(path, text + "\n")
            paths.append(path)
    return paths


def read_suite(suite_dir) -> list[tuple[str, str, str, str]]:
    """(number, document, question, answer) for every triple in the directory."""
    suite_dir = Path(suite_dir)
    if not suite_dir.is_dir():
        raise InputError(f"suite directory {suite_dir} does not exist")
    out = []
    for doc_path in sorted(suite_dir.glob("*.document.txt")):
        num = doc_path.name.split(".")[0]
        try:
            question = (suite_dir / f"{num}.question.txt").read_text(encoding="utf-8")
            answer = (suite_dir / f"{num}.answer.txt").read_text(encoding="utf-8").strip()
        except FileNotFoundError as exc:
            raise InputError(f"incomplete suite entry {num}: {exc.filename}") from None
        out.append((num, doc_path.read_text(encoding="utf-8").rstrip("\n"),
                    question.rstrip("\n"), answer))
    if not out:
        raise InputError(f"no suite entries in {suite_dir}")
    return out


def write_oracle_outputs(suite_dir, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for num, doc, _, _ in read_suite(suite_dir):
        atomic_write_text(out_dir / f"{num}.output.txt", oracle_answer(doc) + "\n")


def score_suite(suite_dir, outputs_dir) -> float:
    """Fraction of entries whose ``NNNN.output.txt`` contains the key; a
    missing output counts as a miss."""
    outputs_dir = Path(outputs_dir)
    if not outputs_dir.is_dir():
        raise InputError(f"outputs directory {outputs_dir} does not exist")
    entries = read_suite(suite_dir)
    hits = 0
    for num, _, _, answer in entries:
        path = outputs_dir / f"{num}.output.txt"
        if path.exists() and passkey_score(path.read_text(encoding="utf-8"), answer):
            hits += 1
    return hits / len(entries)
