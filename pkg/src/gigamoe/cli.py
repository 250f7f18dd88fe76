"""``gigamoe`` command line: one binary, one subcommand per workflow.

Run settings come from a ``key = value`` file (``--config``), then
``GIGAMOE_<KEY>`` environment variables, then ``--<key>`` flags, later sources
winning. Failures print a single ``error<TAB>kind<TAB>message`` line on stderr
and exit with 2 (config), 3 (input) or 4 (numerical).
"""
from __future__ import annotations

import argparse
import dataclasses
import io
import json
import os
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (Document, document_line, exact_dedup, generate_suite, load_documents,
                   minhash_dedup, score_suite, write_oracle_outputs, write_suite)
from .errors import ConfigError, GigaMoEError, InputError
from .kvtext import atomic_write_text, from_kv, parse_kv, to_kv
from .model import ModelConfig, MoETransformer, generate, load_checkpoint, model_forward
from .routing import (EmissionsInput, RoutingTrace, co2_estimate, domain_embedding,
                      filter_embedding, read_embedding, routing_embedding, steering_matrix,
                      telemetry_report, write_embedding, write_traces)
from .tensor import no_grad
from .tokenizer import (BPEVocab, DomainCorpus, byte_vocab, chars_per_token, compare_tokenizers,
                        train_bpe)
from .train import TokenizedPreference, TrainConfig, dpo_train_loop, train_loop

ENV_PREFIX = "GIGAMOE_"
_MODEL_FIELDS = [f.name for f in dataclasses.fields(ModelConfig)]
_TRAIN_FIELDS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# -- run configuration ---------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_fields(p: argparse.ArgumentParser, names: Sequence[str], title: str) -> None:
    g = p.add_argument_group(title, "override the matching config-file key")
    for name in names:
        g.add_argument(_flag(name), dest=f"cfg_{name}", metavar="VALUE", default=None,
                       help=f"{name} (see the config file reference)")


def run_config(args, with_model: bool = True) -> tuple[ModelConfig | None, TrainConfig]:
    """Merge config file, environment and flags into model and train configs."""
    values: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file {path} does not exist")
        values = parse_kv(path.read_text(encoding="utf-8"))
    known = set(_MODEL_FIELDS) | set(_TRAIN_FIELDS) | {"seed"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for name in known:
        if ENV_PREFIX + name.upper() in os.environ:
            values[name] = os.environ[ENV_PREFIX + name.upper()]
    for name in known:
        v = getattr(args, f"cfg_{name}", None)
        if v is not None:
            values[name] = v
    if args.seed is not None:
        values["seed"] = str(args.seed)
    model_cfg = None
    if with_model:
        model_cfg = from_kv(ModelConfig, {k: v for k, v in values.items() if k in _MODEL_FIELDS})
    train_cfg = from_kv(TrainConfig, {k: v for k, v in values.items() if k not in _MODEL_FIELDS})
    return model_cfg, train_cfg


def _need_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{what} {path} does not exist")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tokenizer(path) -> BPEVocab:
    return BPEVocab.load(_need_file(path, "vocab file")) if path else byte_vocab()


def _encode_checked(tok: BPEVocab, text: str, vocab_size: int) -> list[int]:
    ids = tok.encode(text.encode("utf-8", "surrogateescape"))
    if tok.vocab_size > vocab_size:
        raise ConfigError(f"tokenizer has {tok.vocab_size} tokens but the model vocab_size "
                          f"is {vocab_size}")
    return ids


def _load_model(path) -> MoETransformer:
    cfg, params, _ = load_checkpoint(_need_file(path, "checkpoint"))
    return MoETransformer(cfg, params)


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", s) or "_"


# -- subcommands -----------------------------------------------------------------

def cmd_pretrain(args) -> int:
    corpus = _need_file(args.corpus, "corpus")
    model_cfg, train_cfg = run_config(args)
    tok = _tokenizer(args.vocab)
    docs = load_documents(corpus)
    tokens = np.array([t for d in docs for t in _encode_checked(tok, d.text, model_cfg.vocab_size)],
                      dtype=np.int64)
    out = _out_dir(args)
    model = MoETransformer(model_cfg, seed=train_cfg.seed)
    atomic_write_text(out / "run_config.txt", to_kv(model_cfg) + to_kv(train_cfg))
    log = io.StringIO()
    result = train_loop(model, tokens, train_cfg, out_dir=out, telemetry=log)
    atomic_write_text(out / "telemetry.tsv", log.getvalue())
    first, last = result.losses[0], result.losses[-1]
    print(f"steps {len(result.losses)} loss {first:.4f} -> {last:.4f}")
    print("H_utilization " + " ".join(f"{h:.3f}" for h in result.per_layer_h_utilization))
    print(f"checkpoint {result.checkpoints[-1]}")
    return 0


def _read_pairs(path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rows.append({k: str(rec[k]) for k in ("prompt", "chosen", "rejected")})
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: bad preference record ({exc})") from None
    if not rows:
        raise InputError(f"{path}: no preference pairs")
    return rows


def cmd_dpo(args) -> int:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    pairs_path = _need_file(args.pairs, "preference file")
    _, train_cfg = run_config(args, with_model=False)
    policy, reference = _load_model(ckpt), _load_model(ckpt)
    tok = _tokenizer(args.vocab)
    V = policy.config.vocab_size
    data = [TokenizedPreference(_encode_checked(tok, r["prompt"], V),
                                _encode_checked(tok, r["chosen"], V),
                                _encode_checked(tok, r["rejected"], V))
            for r in _read_pairs(pairs_path)]
    out = _out_dir(args)
    log = io.StringIO()
    result = dpo_train_loop(policy, reference, data, train_cfg, out_dir=out, telemetry=log)
    atomic_write_text(out / "dpo_telemetry.tsv", log.getvalue())
    print(f"steps {len(result.losses)} loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    print(f"checkpoint {result.checkpoints[-1]}")
    return 0


def cmd_trace(args) -> int:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    corpus = _need_file(args.corpus, "corpus")
    model = _load_model(ckpt)
    tok = _tokenizer(args.vocab)
    limit = min(args.max_tokens or model.config.context_len, model.config.context_len)
    traces = []
    with no_grad():
        for doc in load_documents(corpus):
            ids = _encode_checked(tok, doc.text, model.config.vocab_size)[:limit]
            if not ids:
                continue
            _, records = model_forward(model, np.array(ids, dtype=np.int64))
            traces.append(RoutingTrace.from_records(doc.id, records))
    if not traces:
        raise InputError("corpus produced no tokens to trace")
    out = _out_dir(args)
    write_traces(out / "traces.jsonl", traces)
    embs = [routing_embedding(t) for t in traces]
    for t, emb in zip(traces, embs):
        write_embedding(out / "embeddings" / f"{_safe_name(t.sample_id)}.txt", emb)
    write_embedding(out / "domain_embedding.txt", domain_embedding(embs))
    report = telemetry_report(traces, args.min_fraction)
    atomic_write_text(out / "telemetry.json", json.dumps(report.to_dict(), indent=2) + "\n")
    print("H_utilization " + " ".join(f"{h:.3f}" for h in report.h_utilization))
    print("H_sparsity " + " ".join(f"{h:.3f}" for h in report.h_sparsity))
    print(f"collapsed {len(report.collapsed)}")
    return 0


def cmd_steer(args) -> int:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    emb_path = _need_file(args.embedding, "embedding file")
    model = _load_model(ckpt)
    emb = read_embedding(emb_path)
    cfg = model.config
    if emb.shape != (cfg.n_moe_layers, cfg.n_routed_experts):
        raise InputError(f"embedding shape {emb.shape} does not match the model "
                         f"({cfg.n_moe_layers}, {cfg.n_routed_experts})")
    if not args.no_filter:
        emb = filter_embedding(emb)
    bias = steering_matrix(emb, args.strength)
    tok = _tokenizer(args.vocab)
    prompt = _encode_checked(tok, args.prompt, cfg.vocab_size)
    new, _ = generate(model, prompt, args.max_new_tokens, steering=bias,
                      temperature=args.temperature, seed=args.seed or 0)
    with no_grad():
        _, records = model_forward(model, np.array(prompt + new, dtype=np.int64), steering=bias)
    out = _out_dir(args)
    write_traces(out / "steered_trace.jsonl", [RoutingTrace.from_records("steered", records)])
    atomic_write_text(out / "generated.txt", " ".join(map(str, new)) + "\n")
    print("tokens " + " ".join(map(str, new)))
    text = tok.decode([t for t in new if t < tok.vocab_size])
    print("text " + json.dumps(text.decode("utf-8", "replace")))
    return 0


def _corpus_bytes(path) -> list[bytes]:
    return [d.text.encode("utf-8", "surrogateescape")
            for d in load_documents(_need_file(path, "corpus"))]


def _named_paths(items: Sequence[str], what: str) -> list[tuple[str, Path]]:
    out = []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, Path(item).stem
        out.append((name, _need_file(path, what)))
    return out


def cmd_tok(args) -> int:
    if args.action == "train":
        docs = _corpus_bytes(args.corpus)
        vocab = train_bpe(docs, args.vocab_size, seed=args.seed or 0,
                          whitespace_split=args.whitespace_split,
                          max_documents=args.max_documents)
        out = _out_dir(args)
        vocab.save(out / "vocab.txt")
        print(f"vocab {vocab.vocab_size} merges {len(vocab.merges)} -> {out / 'vocab.txt'}")
    elif args.action == "score":
        if not args.vocab or len(args.vocab) != 1:
            raise ConfigError("tok score needs exactly one --vocab")
        vocab = _tokenizer(args.vocab[0])
        ratio = chars_per_token(vocab, DomainCorpus(Path(args.corpus).stem,
                                                    _corpus_bytes(args.corpus)))
        print(f"chars_per_token {ratio:.4f}")
    else:
        vocabs = {name: BPEVocab.load(p) for name, p in _named_paths(args.vocab or [], "vocab")}
        if args.include_bytes:
            vocabs = {"bytes": byte_vocab(), **vocabs}
        domains = [DomainCorpus(name, [d.text.encode("utf-8", "surrogateescape")
                                       for d in load_documents(p)])
                   for name, p in _named_paths(args.domain or [], "corpus")]
        table = compare_tokenizers(vocabs, domains, workers=args.workers)
        out = _out_dir(args)
        atomic_write_text(out / "comparison.csv", table.to_csv())
        sys.stdout.write(table.to_text())
    return 0


def cmd_dedup(args) -> int:
    docs = load_documents(_need_file(args.corpus, "corpus"))
    out = _out_dir(args)
    if args.method == "exact":
        kept = exact_dedup(docs)
        report = ""
    else:
        res = minhash_dedup(docs, args.threshold, args.bands, args.num_hashes, args.shingle_size,
                            seed=args.seed or 0, exhaustive=args.exhaustive, workers=args.workers)
        kept = res.survivors
        report = "".join(line + "\n" for line in res.report_lines())
    atomic_write_text(out / "survivors.jsonl", "".join(document_line(d) + "\n" for d in kept))
    atomic_write_text(out / "report.tsv", "representative\tsize\tmembers\n" + report)
    print(f"kept {len(kept)} of {len(docs)}")
    return 0


def cmd_passkey(args) -> int:
    if args.action == "generate":
        try:
            budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
        except ValueError:
            raise ConfigError(f"--budgets must be comma-separated integers: {args.budgets!r}")
        tok = _tokenizer(args.vocab)
        samples = generate_suite(budgets, args.per_budget, seed=args.seed or 0, tokenizer=tok)
        write_suite(_out_dir(args), samples)
        print(f"suite {len(samples)} documents -> {args.out}")
    elif args.action == "oracle":
        write_oracle_outputs(_need_file(args.suite, "suite directory"), _out_dir(args))
        print(f"oracle outputs -> {args.out}")
    else:
        acc = score_suite(_need_file(args.suite, "suite directory"),
                          _need_file(args.outputs, "outputs directory"))
        print(f"accuracy {acc:.3f}")
    return 0


def cmd_emissions(args) -> int:
    kg = co2_estimate(EmissionsInput(args.pue, args.kwh, args.intensity))
    print(f"{kg:.3f} kg")
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                   help="key = value file with model and training settings")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="seed for every random choice of the run")
    g.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS,
                   help="output directory (default: current directory)")
    g.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                   help="cap on parallel worker processes (results do not depend on it)")

    parser = _Parser(prog="gigamoe", parents=[common],
                     description="Desk-scale mixture-of-experts toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "train a model from scratch on a document corpus")
    p.add_argument("--corpus", required=True, help="JSON-lines documents or a directory of .txt")
    p.add_argument("--vocab", help="BPE vocab file (default: raw bytes)")
    _add_fields(p, _MODEL_FIELDS, "model config")
    _add_fields(p, _TRAIN_FIELDS, "training config")

    p = add("dpo", cmd_dpo, "preference-tune a checkpoint with the modified DPO loss")
    p.add_argument("--checkpoint", required=True, help="policy and reference start point")
    p.add_argument("--pairs", required=True,
                   help="JSON-lines records with prompt, chosen and rejected text")
    p.add_argument("--vocab", help="BPE vocab file (default: raw bytes)")
    _add_fields(p, _TRAIN_FIELDS, "training config")

    p = add("trace", cmd_trace, "record router activations, telemetry and routing embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", help="BPE vocab file (default: raw bytes)")
    p.add_argument("--max-tokens", type=int, default=None,
                   help="truncate each document (default: model context length)")
    p.add_argument("--min-fraction", type=float, default=None,
                   help="collapse threshold on expert frequency (default 0.1/e)")

    p = add("steer", cmd_steer, "generate with router biases taken from a routing embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embedding", required=True, help="routing embedding text file")
    p.add_argument("--strength", type=float, required=True, help="bias added per unit of frequency")
    p.add_argument("--prompt", required=True)
    p.add_argument("--vocab", help="BPE vocab file (default: raw bytes)")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--no-filter", action="store_true",
                   help="skip zeroing entries below 3/e before steering")

    p = add("tok", cmd_tok, "train, score or compare byte-level BPE tokenizers")
    p.add_argument("action", choices=("train", "score", "compare"))
    p.add_argument("--corpus", help="training or scoring corpus")
    p.add_argument("--vocab", action="append",
                   help="vocab file; for compare NAME=PATH, repeatable")
    p.add_argument("--domain", action="append", help="NAME=CORPUS for compare, repeatable")
    p.add_argument("--vocab-size", type=int, default=1024)
    p.add_argument("--whitespace-split", action="store_true")
    p.add_argument("--max-documents", type=int, default=None)
    p.add_argument("--include-bytes", action="store_true",
                   help="add the raw byte tokenizer as a baseline row")

    p = add("dedup", cmd_dedup, "exact or MinHash near-duplicate removal")
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", choices=("exact", "minhash"), default="minhash")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--num-hashes", type=int, default=128)
    p.add_argument("--shingle-size", type=int, default=5)
    p.add_argument("--exhaustive", action="store_true", help="compare all pairs instead of LSH")

    p = add("passkey", cmd_passkey, "generate, answer by oracle, or score a PassKey suite")
    p.add_argument("action", choices=("generate", "oracle", "score"))
    p.add_argument("--budgets", default="512,2048,8192", help="comma-separated token budgets")
    p.add_argument("--per-budget", type=int, default=5)
    p.add_argument("--vocab", help="tokenizer measuring the budget (default: raw bytes)")
    p.add_argument("--suite", help="suite directory (oracle, score)")
    p.add_argument("--outputs", help="directory of NNNN.output.txt answers (score)")

    p = add("emissions", cmd_emissions, "estimate training CO2 in kilograms")
    p.add_argument("pue", type=float, help="power usage effectiveness")
    p.add_argument("kwh", type=float, help="energy consumed in kWh")
    p.add_argument("intensity", type=float, help="grid carbon intensity in g CO2 per kWh")
    return parser


_REQUIRED = {("tok", "train"): ("corpus",), ("tok", "score"): ("corpus",),
             ("tok", "compare"): ("domain",), ("passkey", "score"): ("suite", "outputs"),
             ("passkey", "oracle"): ("suite",)}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        for name, default in (("config", None), ("seed", None), ("out", "."), ("workers", 1)):
            if not hasattr(args, name):
                setattr(args, name, default)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        for name in _REQUIRED.get((args.command, getattr(args, "action", None)), ()):
            if not getattr(args, name):
                raise ConfigError(f"{args.command} {args.action} requires --{name}")
        return args.func(args)
    except GigaMoEError as exc:
        msg = " ".join(str(exc).split())
        print(f"error\t{type(exc).__name__}\t{msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
