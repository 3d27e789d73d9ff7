import csv
import json

import pytest

from dysi.cli import main

CONFIG = """
task.kind = copy
task.vocab_size = 12
task.min_len = 2
task.max_len = 5
task.train_size = 100
task.valid_size = 20
task.test_size = 10
model.d_model = 16
model.n_heads = 2
model.ffn_dim = 32
model.max_positions = 16
training.max_steps = 20
training.warmup = 5
training.checkpoint_every = 10
training.max_tokens = 96
training.valid_batches = 2
decoding.strategy = greedy
decoding.max_len = 8
"""

LM_CONFIG = """
task.kind = lm
task.train_path = builtin
task.tokenization = char
task.lm_chars = 4000
task.context_len = 16
model.mode = decoder-only
model.d_model = 16
model.n_heads = 2
model.ffn_dim = 32
model.max_positions = 16
training.max_steps = 3
training.batch_size = 4
training.valid_batches = 1
decoding.strategy = nucleus
decoding.p = 0.9
decoding.max_len = 12
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(CONFIG, encoding="utf-8")
    return p


@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["--quiet", "train", "--config", str(cfg_file), "--out-dir", str(out)]) == 0
    return out


def test_train_writes_summary(trained):
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["step"] == 20 and summary["last_metrics"]["step"] == 20
    assert (trained / "config.txt").exists() and (trained / "vocab.txt").exists()


def test_average_and_evaluate(tmp_path, trained, cfg_file, capsys):
    avg = tmp_path / "avg.dysi"
    assert main(["--quiet", "average-checkpoints", "--last", "2", "--out-dir", str(trained),
                 "--output", str(avg)]) == 0
    report_file = tmp_path / "report.json"
    hyps = tmp_path / "hyps.txt"
    assert main(["--quiet", "evaluate", "--config", str(cfg_file), "--checkpoint", str(avg),
                 "--output", str(report_file), "--hyps", str(hyps)]) == 0
    report = json.loads(report_file.read_text())
    for key in ("bleu", "precisions", "brevity_penalty", "entropy", "repetition", "oracle_bleu",
                "bleu_single_ref", "token_accuracy", "sequence_accuracy", "n_sentences"):
        assert key in report
    assert report["n_sentences"] == 10
    assert len(hyps.read_text().splitlines()) == 10


def test_evaluate_with_tsv_and_extra_refs(tmp_path, trained):
    test = tmp_path / "t.tsv"
    test.write_text("w4 w5\tw4 w5\nw6 w7 w8\tw6 w7 w8\n", encoding="utf-8")
    refs = tmp_path / "r2.txt"
    refs.write_text("w4 w5\nw6 w7 w8\n", encoding="utf-8")
    out = tmp_path / "r.json"
    ck = trained / "checkpoints" / "step_0000020.dysi"
    assert main(["--quiet", "evaluate", "--checkpoint", str(ck), "--test", str(test),
                 "--refs", str(refs), "--output", str(out)]) == 0
    assert json.loads(out.read_text())["n_references"] == 2


def test_hot_start(tmp_path, trained, cfg_file):
    ck = trained / "checkpoints" / "step_0000020.dysi"
    out = tmp_path / "hot"
    assert main(["--quiet", "hot-start", "--config", str(cfg_file), "--init", str(ck),
                 "--out-dir", str(out), "--set", "training.max_steps=5"]) == 0
    assert json.loads((out / "summary.json").read_text())["step"] == 5


def test_generate_encoder_decoder(tmp_path, trained):
    prompts = tmp_path / "p.txt"
    prompts.write_text("w4 w5 w6\nw7\n", encoding="utf-8")
    out = tmp_path / "o.txt"
    ck = trained / "checkpoints" / "step_0000020.dysi"
    assert main(["--quiet", "generate", "--checkpoint", str(ck), "--prompts", str(prompts),
                 "--output", str(out), "--set", "decoding.strategy=greedy"]) == 0
    assert len(out.read_text().splitlines()) == 2


@pytest.fixture
def lm_ckpt(tmp_path):
    cfg = tmp_path / "lm.cfg"
    cfg.write_text(LM_CONFIG, encoding="utf-8")
    out = tmp_path / "lm"
    assert main(["--quiet", "train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return cfg, out / "checkpoints" / "step_0000003.dysi"


def test_generate_lm_seeded_and_line_count(tmp_path, lm_ckpt):
    cfg, ck = lm_ckpt
    prompts = tmp_path / "p.txt"
    prompts.write_text("The old \n\nShe was\n", encoding="utf-8")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.txt"
        assert main(["--quiet", "generate", "--config", str(cfg), "--seed", "4", "--checkpoint", str(ck),
                     "--prompts", str(prompts), "--output", str(out)]) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]
    assert len(outs[0].splitlines()) == 3


def test_perturb_identity_greedy_zero(tmp_path, lm_ckpt):
    cfg, ck = lm_ckpt
    paras = tmp_path / "paras.txt"
    paras.write_text("\n".join(" ".join(f"word{i % 7}" for i in range(j, j + 12)) for j in range(4)),
                     encoding="utf-8")
    out = tmp_path / "suite"
    assert main(["--quiet", "perturb", "--checkpoints", f"m={ck}", "--prompts", str(paras),
                 "--perturbations", "identity", "--p", "0", "--budget", "10", "--samples", "1",
                 "--words-per-prompt", "10", "--out-dir", str(out)]) == 0
    with open(out / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(float(r["mean_delta"]) == 0.0 for r in rows)


def test_perturb_grouped_rows(tmp_path, lm_ckpt):
    cfg, ck = lm_ckpt
    paras = tmp_path / "paras.txt"
    paras.write_text("\n".join(" ".join(f"w{i}" for i in range(j, j + 12)) for j in range(3)),
                     encoding="utf-8")
    out = tmp_path / "suite"
    assert main(["--quiet", "perturb", "--checkpoints", str(ck), "--prompts", str(paras),
                 "--perturbations", "ngram=3", "ngram=5", "ngram=7", "ngram=10",
                 "--budget", "8", "--samples", "1", "--words-per-prompt", "10",
                 "--out-dir", str(out)]) == 0
    with open(out / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for n in ("1", "2", "3"):
        assert sum(1 for r in rows if r["n"] == n) == 4


def test_error_codes(tmp_path, cfg_file, capsys):
    assert main(["train", "--config", str(cfg_file), "--set", "training.nope=1"]) == 2
    assert "E_CONFIG" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("training.alpha 0.5\n", encoding="utf-8")
    assert main(["train", "--config", str(bad)]) == 2
    assert "E_PARSE" in capsys.readouterr().err
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.dysi")]) == 2
    assert "E_CHECKPOINT" in capsys.readouterr().err


def test_vocabulary_mismatch_refused(tmp_path, trained, cfg_file, capsys):
    ck = trained / "checkpoints" / "step_0000020.dysi"
    assert main(["--quiet", "evaluate", "--config", str(cfg_file), "--checkpoint", str(ck),
                 "--set", "task.vocab_size=14"]) == 2
    assert "E_CHECKPOINT" in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "dysi" in capsys.readouterr().out
