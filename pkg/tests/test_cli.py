import json
import subprocess
import sys

import pytest

from gigamoe.cli import build_parser, main

TINY = ["--vocab-size", "256", "--d-model", "16", "--n-layers", "2", "--n-heads", "2",
        "--n-kv-heads", "1", "--n-routed-experts", "4", "--d-ff-expert", "8",
        "--d-ff-first", "16", "--total-steps", "6", "--warmup-steps", "1", "--batch-size", "2",
        "--seq-len", "8", "--checkpoints-per-epoch", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    lines = [json.dumps({"id": i, "text": f"the cat sat on mat number {i}. " * 6}) for i in range(6)]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def pretrained(tmp_path, corpus, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "pretrain", "--corpus", corpus, "--out", out, "--seed", 3, *TINY)
    assert code == 0, stdout
    return out


def test_emissions_prints_kilograms(capsys):
    assert run(capsys, "emissions", "1.0", "1000", "1000") == (0, "1000.000 kg\n", "")


def test_emissions_bad_pue_is_input_error(capsys):
    code, _, err = run(capsys, "emissions", "0.5", "1", "1")
    assert code == 3 and err.startswith("error\tInputError\t") and err.count("\n") == 1


def test_unknown_flag_exits_2(capsys):
    code, out, err = run(capsys, "emissions", "1", "1", "1", "--bogus")
    assert code == 2 and out == ""
    assert err.startswith("error\tConfigError\t") and err.count("\n") == 1


def test_missing_corpus_exits_3(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--corpus", tmp_path / "none.jsonl", "--out", tmp_path)
    assert code == 3 and "does not exist" in err
    assert list(tmp_path.iterdir()) == []


def test_bad_model_config_exits_2(tmp_path, corpus, capsys):
    code, _, err = run(capsys, "pretrain", "--corpus", corpus, "--out", tmp_path / "o",
                       "--d-model", "15")
    assert code == 2 and err.startswith("error\tConfigError")


@pytest.mark.parametrize("command", ["pretrain", "dpo", "trace", "steer", "tok", "dedup",
                                     "passkey", "emissions"])
def test_help_lists_common_flags(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--workers"):
        assert flag in text


def test_help_documents_config_fields():
    text = build_parser()._subparsers._group_actions[0].choices["pretrain"].format_help()
    for flag in ("--gate-mode", "--base-lr", "--aux-loss-weight", "--drop-fractions"):
        assert flag in text


def test_pretrain_is_byte_reproducible(tmp_path, corpus, capsys, pretrained):
    again = tmp_path / "again"
    assert run(capsys, "pretrain", "--corpus", corpus, "--out", again, "--seed", 3, *TINY)[0] == 0
    names = sorted(p.name for p in pretrained.iterdir())
    assert "telemetry.tsv" in names and any(n.endswith(".ckpt") for n in names)
    assert names == sorted(p.name for p in again.iterdir())
    for n in names:
        assert (pretrained / n).read_bytes() == (again / n).read_bytes(), n


def test_config_file_env_and_flag_precedence(tmp_path, corpus, capsys, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("total_steps = 8\nbase_lr = 0.002\n")
    monkeypatch.setenv("GIGAMOE_TOTAL_STEPS", "7")
    flags = [a for a in TINY]
    i = flags.index("--total-steps")
    del flags[i:i + 2]
    out = tmp_path / "o"
    assert run(capsys, "pretrain", "--corpus", corpus, "--out", out, "--config", cfg, *flags)[0] == 0
    written = (out / "run_config.txt").read_text()
    assert "total_steps = 7" in written and "base_lr = 0.002" in written
    assert len((out / "telemetry.tsv").read_text().splitlines()) == 1 + 7
    out2 = tmp_path / "o2"
    run(capsys, "pretrain", "--corpus", corpus, "--out", out2, "--config", cfg, *flags,
        "--total-steps", "6")
    assert "total_steps = 6" in (out2 / "run_config.txt").read_text()


def test_unknown_config_key(tmp_path, corpus, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 1\n")
    code, _, err = run(capsys, "pretrain", "--corpus", corpus, "--config", cfg, "--out", tmp_path)
    assert code == 2 and "learning_rate" in err


def test_trace_then_steer(tmp_path, corpus, capsys, pretrained):
    ckpt = sorted(pretrained.glob("*.ckpt"))[-1]
    tdir = tmp_path / "trace"
    code, out, _ = run(capsys, "trace", "--checkpoint", ckpt, "--corpus", corpus, "--out", tdir)
    assert code == 0 and out.startswith("H_utilization ")
    assert (tdir / "domain_embedding.txt").exists() and (tdir / "telemetry.json").exists()
    assert len(list((tdir / "embeddings").iterdir())) == 6
    sdir = tmp_path / "steer"
    argv = ["steer", "--checkpoint", ckpt, "--embedding", tdir / "domain_embedding.txt",
            "--strength", "1e9", "--prompt", "the cat", "--max-new-tokens", "4", "--out", sdir]
    code, out, _ = run(capsys, *argv)
    assert code == 0 and out.startswith("tokens ")
    first = (sdir / "steered_trace.jsonl").read_bytes()
    assert run(capsys, *argv)[0] == 0
    assert (sdir / "steered_trace.jsonl").read_bytes() == first


def test_dpo_subcommand(tmp_path, capsys, pretrained):
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text(json.dumps({"prompt": "the cat", "chosen": " sat", "rejected": " ran"}) + "\n")
    ckpt = sorted(pretrained.glob("*.ckpt"))[-1]
    code, out, _ = run(capsys, "dpo", "--checkpoint", ckpt, "--pairs", pairs,
                       "--out", tmp_path / "d", "--total-steps", "2", "--warmup-steps", "0")
    assert code == 0 and (tmp_path / "d" / "dpo_final.ckpt").exists()
    assert out.startswith("steps 2 loss 0.6931")


def test_tok_train_score_compare(tmp_path, corpus, capsys):
    out = tmp_path / "tok"
    code, stdout, _ = run(capsys, "tok", "train", "--corpus", corpus, "--vocab-size", "280",
                          "--out", out)
    assert code == 0 and (out / "vocab.txt").read_text().startswith("bpe-vocab 280 ")
    code, stdout, _ = run(capsys, "tok", "score", "--corpus", corpus, "--vocab", out / "vocab.txt")
    assert code == 0 and float(stdout.split()[1]) > 1.0
    code, stdout, _ = run(capsys, "tok", "compare", "--vocab", f"mine={out / 'vocab.txt'}",
                          "--domain", f"cats={corpus}", "--include-bytes", "--out", out)
    assert code == 0
    csv = (out / "comparison.csv").read_text().splitlines()
    assert csv[0] == "tokenizer,cats,mean_score" and len(csv) == 3
    assert run(capsys, "tok", "train", "--out", out)[0] == 2


def test_dedup_subcommand(tmp_path, capsys):
    path = tmp_path / "docs.jsonl"
    texts = ["alpha beta gamma delta", "alpha beta gamma delta  ", "something else here"]
    path.write_text("".join(json.dumps({"id": i, "text": t}) + "\n" for i, t in enumerate(texts)))
    for method in ("exact", "minhash"):
        out = tmp_path / method
        code, stdout, _ = run(capsys, "dedup", "--corpus", path, "--method", method, "--out", out)
        assert code == 0 and stdout == "kept 2 of 3\n"
        ids = [json.loads(line)["id"] for line in (out / "survivors.jsonl").read_text().splitlines()]
        assert ids == ["0", "2"]


def test_passkey_oracle_accuracy(tmp_path, capsys):
    suite, outs = tmp_path / "suite", tmp_path / "outs"
    assert run(capsys, "passkey", "generate", "--budgets", "128,256", "--per-budget", "3",
               "--out", suite)[0] == 0
    assert len(list(suite.glob("*.answer.txt"))) == 6
    assert run(capsys, "passkey", "oracle", "--suite", suite, "--out", outs)[0] == 0
    assert run(capsys, "passkey", "score", "--suite", suite, "--outputs", outs) == \
        (0, "accuracy 1.000\n", "")
    assert run(capsys, "passkey", "score", "--suite", suite)[0] == 2


def test_console_entry_point_exit_codes(tmp_path):
    cmd = [sys.executable, "-m", "gigamoe.cli"]
    ok = subprocess.run(cmd + ["emissions", "1.2", "250", "400"], capture_output=True, text=True)
    assert ok.returncode == 0 and ok.stdout == "120.000 kg\n"
    bad = subprocess.run(cmd + ["--nope"], capture_output=True, text=True)
    assert bad.returncode == 2 and bad.stderr.count("\n") == 1
