import json
import re

import pytest

from lctx.checkpoint import load_checkpoint
from lctx.cli import main, round_row

TINY = {"synth": {"n_train": 24, "n_val": 6, "n_test": 5, "max_turns": 8},
        "encoder": {"d": 8, "layers": 1},
        "decoder": {"d_model": 8, "layers": 1, "heads": 2},
        "train_encoder": {"epochs": 2, "lr": 0.003},
        "train_decoder": {"epochs": 1, "lr": 0.001},
        "generation": {"max_len": 6, "min_len": 2, "beam_width": 2}}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg)]
    assert main(["synth", *base, "--seed", "7", "--out", str(root / "data")]) == 0
    assert main(["train-encoder", *base, "--data", str(root / "data"), "--out", str(root / "m")]) == 0
    assert main(["train-decoder", *base, "--data", str(root / "data"),
                 "--encoder", str(root / "m" / "encoder.ckpt"), "--out", str(root / "m")]) == 0
    models = ["--data", str(root / "data"), "--encoder", str(root / "m" / "encoder.ckpt"),
              "--decoder", str(root / "m" / "decoder.ckpt")]
    return root, base, models


def test_synth_is_deterministic(run, tmp_path):
    root, base, _ = run
    assert main(["synth", *base, "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt"):
        assert (tmp_path / name).read_bytes() == (root / "data" / name).read_bytes()


def test_training_logs_have_loss_columns(run):
    root, _, _ = run
    enc = json.loads((root / "m" / "encoder_log.json").read_text())
    dec = json.loads((root / "m" / "decoder_log.json").read_text())
    assert enc["columns"] == ["total", "bow", "l1"]
    assert dec["columns"] == ["total", "lm", "bow"]
    assert set(enc["epochs"][0]["train"]) == {"total", "bow", "l1"}
    assert dec["config"]["encoder"]["d"] == 8 and "vocab_fingerprint" in dec
    for s in enc["steps"]:
        assert s["total"] == pytest.approx(s["bow"] + s["l1"], rel=1e-12)
    for s in dec["steps"]:
        assert s["total"] == pytest.approx(s["lm"] + 0.5 * s["bow"], rel=1e-12)
    ck = load_checkpoint(root / "m" / "encoder.ckpt")
    assert ck.config["run"]["train_encoder"]["lr"] == 0.003


def test_generate_is_deterministic(run, tmp_path):
    _, base, models = run
    for out in ("a", "b"):
        assert main(["generate", *base, *models, "--out", str(tmp_path / out)]) == 0
    a = (tmp_path / "a" / "responses.txt").read_text()
    assert a == (tmp_path / "b" / "responses.txt").read_text()
    assert len(a.splitlines()) == 5
    meta = json.loads((tmp_path / "a" / "responses.json").read_text())
    assert meta["generation"]["beam_width"] == 2 and "vocab_fingerprint" in meta


def test_flags_override_file(run, tmp_path):
    _, base, models = run
    assert main(["generate", *base, *models, "--beam-width", "1", "--k", "1", "--m-last", "1",
                 "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "responses.json").read_text())
    assert meta["generation"]["beam_width"] == 1
    assert meta["selection"] == {"k": 1, "m_last": 1, "N": 64}


def test_evaluate_reports(run, tmp_path):
    _, base, models = run
    assert main(["evaluate", *base, *models, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert set(rep["metrics"]) >= {"bleu_1", "nist_2", "distinct_1", "entropy_4"}
    assert rep["relevance"]["n"] == 5 and rep["samples"] == 5
    assert rep["context_budget"]["max"] <= rep["context_budget"]["bound"]


def test_evaluate_text_mode_identical(tmp_path):
    lines = "i would like a red hat .\nhow much is it ?\n"
    (tmp_path / "c.txt").write_text(lines)
    (tmp_path / "r.txt").write_text(lines)
    assert main(["evaluate", "--candidates", str(tmp_path / "c.txt"), "--references",
                 str(tmp_path / "r.txt"), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["metrics"]["bleu_1"] == pytest.approx(100.0)


def _table_rows(text):
    return [l for l in text.splitlines() if re.match(r"^\s+\d+ \|", l)]


def test_inspect_table(run, capsys):
    _, base, models = run
    assert main(["inspect", *base, *models, "--dialogue", "0"]) == 0
    rows = _table_rows(capsys.readouterr().out)
    assert rows[0].split("|")[1].split() == ["[1.00]"]
    for i, row in enumerate(rows, 1):
        cells = row.split("|")[1].split()
        values = [float(c.strip("[]")) for c in cells]
        assert len(values) == i
        assert abs(sum(values) - 1.0) <= 0.01
        marked = [j for j, c in enumerate(cells, 1) if c.startswith("[")]
        assert len(marked) == min(i, 4) and {i, i - 1} & set(range(1, i + 1)) <= set(marked)


def test_chat_session(run, tmp_path, capsys):
    _, base, models = run
    script = tmp_path / "in.txt"
    script.write_text("i want a red hat\nhow much is it ?\nok then\n:reset\nhello\n:quit\nignored\n")
    assert main(["chat", *base, *models, "--input", str(script)]) == 0
    out = capsys.readouterr().out
    rows = _table_rows(out)
    # user turns land at dialogue turns 1, 3, 5; after :reset it starts over
    assert [len(r.split("|")[1].split()) for r in rows] == [1, 3, 5, 1]
    assert out.count("bot:") == 4 and "(dialogue reset)" in out


def test_error_exits(run, tmp_path, capsys):
    root, base, models = run
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"encoder": {"dd": 3}}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "encoder.dd" in capsys.readouterr().err
    assert main(["synth", "--set", "synth.max_turns=3", "--out", str(tmp_path)]) != 0
    assert main(["generate", *base, "--data", str(root / "data"), "--encoder",
                 str(tmp_path / "missing.ckpt"), "--decoder", "x", "--out", str(tmp_path)]) == 1
    # vocabulary from another corpus: fingerprint mismatch
    assert main(["synth", "--seed", "99", "--set", "synth.n_train=3", "--set", "synth.n_val=1",
                 "--set", "synth.n_test=1", "--set", "synth.vocab_size=5", "--out", str(tmp_path / "o")]) == 0
    assert main(["inspect", *base, "--data", str(root / "data"), "--vocab", str(tmp_path / "o" / "vocab.txt"),
                 "--encoder", str(root / "m" / "encoder.ckpt")]) == 1
    assert "fingerprint" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_round_row_sums_to_one():
    for row in ([1 / 3] * 3, [1 / 7] * 7, [0.125] * 8, [0.994, 0.006]):
        assert sum(round(v * 100) for v in round_row(row)) == 100
