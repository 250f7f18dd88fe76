"""Routing traces and the entropy summaries used to watch router health."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import InputError
from ..kvtext import atomic_write_text


@dataclass
class RoutingTrace:
    """Per-token routing of one sample through every MoE layer.

    ``selected[i]`` is a (tokens, top_k) int array and ``probs[i]`` a
    (tokens, n_experts) array of full router distributions for MoE layer ``i``.
    """

    sample_id: str
    n_tokens: int
    selected: list[np.ndarray]
    probs: list[np.ndarray]
    top_k: int = field(init=False)
    n_experts: int = field(init=False)

    def __post_init__(self):
        if len(self.selected) != len(self.probs):
            raise InputError("selected and probs must cover the same layers")
        if not self.selected:
            raise InputError("trace has no MoE layers")
        self.selected = [np.asarray(s, dtype=np.int64) for s in self.selected]
        self.probs = [np.asarray(p, dtype=np.float64) for p in self.probs]
        self.top_k = self.selected[0].shape[1]
        self.n_experts = self.probs[0].shape[1]
        for s, p in zip(self.selected, self.probs):
            if s.shape != (self.n_tokens, self.top_k) or p.shape != (self.n_tokens, self.n_experts):
                raise InputError(
                    f"layer arrays {s.shape}/{p.shape} inconsistent with "
                    f"{self.n_tokens} tokens, top_k {self.top_k}")

    @property
    def n_layers(self) -> int:
        return len(self.selected)

    @classmethod
    def from_records(cls, sample_id: str, records) -> "RoutingTrace":
        """Build from the activation records of one forward pass."""
        recs = sorted(records, key=lambda r: r.layer)
        return cls(str(sample_id), recs[0].n_tokens,
                   [np.array(r.selected) for r in recs],
                   [np.array(r.distribution) for r in recs])

    def layer_counts(self, layer: int) -> np.ndarray:
        return np.bincount(self.selected[layer].reshape(-1), minlength=self.n_experts)


def _as_batch(traces) -> list[RoutingTrace]:
    batch = [traces] if isinstance(traces, RoutingTrace) else list(traces)
    if not batch:
        raise InputError("empty trace batch")
    return batch


def assignment_counts(traces, layer: int) -> np.ndarray:
    """Integer expert-assignment counts for ``layer`` summed over traces."""
    batch = _as_batch(traces)
    if not 0 <= layer < batch[0].n_layers:
        raise InputError(f"layer {layer} out of range [0, {batch[0].n_layers})")
    return sum(t.layer_counts(layer) for t in batch)


def normalized_entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy divided by ``log(n)``; 0 log 0 is taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[axis]
    if n == 1:
        return np.ones(np.delete(p.shape, axis if axis >= 0 else p.ndim + axis))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=axis) / np.log(n)


def h_utilization(traces, layer: int) -> float:
    """Balance of token-to-expert assignments: 1 uniform, 0 all on one expert."""
    counts = assignment_counts(traces, layer)
    total = counts.sum()
    if total == 0:
        raise InputError("no routed tokens in trace batch")
    return float(normalized_entropy(counts / total))


def h_sparsity(traces, layer: int) -> float:
    """Mean normalized entropy of per-token router distributions (low = confident)."""
    batch = _as_batch(traces)
    if not 0 <= layer < batch[0].n_layers:
        raise InputError(f"layer {layer} out of range")
    probs = [t.probs[layer] for t in batch if t.n_tokens]
    if not probs:
        raise InputError("no routed tokens in trace batch")
    return float(normalized_entropy(np.concatenate(probs)).mean())


def expert_frequencies(traces, layer: int) -> np.ndarray:
    counts = assignment_counts(traces, layer)
    return counts / counts.sum()


def detect_collapse(traces, min_fraction: float | None = None) -> list[tuple[int, int]]:
    """(layer, expert) pairs whose share of assignments is below ``min_fraction``
    (default ``0.1 / n_experts``)."""
    batch = _as_batch(traces)
    e = batch[0].n_experts
    threshold = 0.1 / e if min_fraction is None else min_fraction
    flagged = []
    for layer in range(batch[0].n_layers):
        freq = expert_frequencies(batch, layer)
        flagged += [(layer, int(j)) for j in np.nonzero(freq < threshold)[0]]
    return flagged


@dataclass
class TelemetryReport:
    h_utilization: list[float]
    h_sparsity: list[float]
    collapsed: list[tuple[int, int]]
    topk_summary: list[dict]

    def to_dict(self) -> dict:
        return {"h_utilization": self.h_utilization, "h_sparsity": self.h_sparsity,
                "collapsed": [list(c) for c in self.collapsed],
                "topk_summary": self.topk_summary}


def telemetry_report(traces, min_fraction: float | None = None) -> TelemetryReport:
    batch = _as_batch(traces)
    L = batch[0].n_layers
    summary = []
    for layer in range(L):
        probs = np.concatenate([t.probs[layer] for t in batch])
        sel = np.concatenate([t.selected[layer] for t in batch])
        chosen = np.take_along_axis(probs, sel, axis=1)
        summary.append({
            "layer": layer,
            "mean_top1_prob": float(probs.max(axis=1).mean()),
            "mean_selected_mass": float(chosen.sum(axis=1).mean()),
            "frequencies": [float(f) for f in expert_frequencies(batch, layer)],
        })
    return TelemetryReport([h_utilization(batch, i) for i in range(L)],
                           [h_sparsity(batch, i) for i in range(L)],
                           detect_collapse(batch, min_fraction), summary)


# -- trace files ---------------------------------------------------------

def trace_lines(trace: RoutingTrace) -> Iterable[str]:
    for layer in range(trace.n_layers):
        for t in range(trace.n_tokens):
            yield json.dumps({
                "sample": trace.sample_id, "layer": layer, "token": t,
                "selected": trace.selected[layer][t].tolist(),
                "probs": [float(x) for x in trace.probs[layer][t]],
            })


def write_traces(path, traces: Sequence[RoutingTrace]) -> None:
    atomic_write_text(path, "".join(line + "\n" for tr in traces for line in trace_lines(tr)))


def read_traces(path) -> list[RoutingTrace]:
    rows: dict[str, dict[int, dict[int, tuple]]] = {}
    order: list[str] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid, layer, tok = str(rec["sample"]), int(rec["layer"]), int(rec["token"])
            entry = (rec["selected"], rec["probs"])
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: bad trace record ({exc})") from None
        if sid not in rows:
            rows[sid] = {}
            order.append(sid)
        rows[sid].setdefault(layer, {})[tok] = entry
    traces = []
    for sid in order:
        layers = rows[sid]
        n_layers = max(layers) + 1
        n_tok = max(max(v) for v in layers.values()) + 1
        sel, prob = [], []
        for i in range(n_layers):
            toks = layers.get(i, {})
            if len(toks) != n_tok:
                raise InputError(f"sample {sid}: layer {i} has {len(toks)} of {n_tok} tokens")
            sel.append([toks[t][0] for t in range(n_tok)])
            prob.append([toks[t][1] for t in range(n_tok)])
        traces.append(RoutingTrace(sid, n_tok, sel, prob))
    return traces
