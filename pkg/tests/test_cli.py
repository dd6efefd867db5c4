import json
import subprocess
import sys

import pytest

from usermoe.cli import main
from usermoe.finetune import read_embeddings


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_subcommand_is_usage_error(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and "usage:" in err


def test_no_subcommand(capsys):
    code, _, err = run(capsys)
    assert code == 2 and "usage:" in err


def test_gen_data_siupd(capsys, tmp_path):
    code, out, _ = run(capsys, "gen-data", "--preset", "siupd-like", "--seed", "7", "--out", "d/",
                       "--n-instances", "40", "--workdir", str(tmp_path))
    assert code == 0
    info = json.loads(out)
    assert info["channels"] == 11
    assert (tmp_path / "d" / "data.jsonl").exists() and (tmp_path / "d" / "schema.json").exists()
    schema = json.loads((tmp_path / "d" / "schema.json").read_text())
    assert len(schema["channels"]) == 11


def test_bad_config_exit_codes(capsys, tmp_path):
    (tmp_path / "bad.cfg").write_text("d_model = 7\nheads = 2\n")
    code, _, err = run(capsys, "pretrain", "--config", "bad.cfg", "--workdir", str(tmp_path))
    assert code == 2 and "usage error" in err
    code, _, err = run(capsys, "pretrain", "--set", "nope=1", "--workdir", str(tmp_path))
    assert code == 2
    code, _, _ = run(capsys, "pretrain", "--workdir", str(tmp_path / "missing"))
    assert code == 2


def test_runtime_errors_exit_one(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", "none.json", "--workdir", str(tmp_path))
    assert code == 1 and "checkpoint error" in err
    (tmp_path / "data.jsonl").write_text("{broken\n")
    (tmp_path / "schema.json").write_text('{"channels": [{"name": "c", "kind": "dense"}], "tasks": []}')
    code, _, err = run(capsys, "pretrain", "--set", "data=data.jsonl", "--workdir", str(tmp_path))
    assert code == 1 and "data error" in err


CFG = """
data = d/data.jsonl
d_model = 8
d_ff = 8
blocks = 1
experts = 2
batch_size = 16
max_len = 12
epochs = 1
"""


def test_pipeline(capsys, tmp_path):
    wd = str(tmp_path)
    (tmp_path / "run.cfg").write_text(CFG)
    assert run(capsys, "gen-data", "--preset", "custom", "--n-instances", "48", "--out", "d", "--workdir", wd)[0] == 0
    code, out, _ = run(capsys, "pretrain", "--config", "run.cfg", "--workdir", wd)
    assert code == 0 and (tmp_path / "pretrain.ckpt.json").exists()
    code, out, _ = run(capsys, "finetune", "--config", "run.cfg", "--workdir", wd,
                       "--checkpoint", "pretrain.ckpt.json", "--set", "bilevel=true",
                       "--set", "inner_outer_ratio=1", "--set", "outer_batch_size=8")
    assert code == 0
    report = json.loads(out)
    assert all(abs(sum(lam) - 2) < 1e-9 for lam in report["lambda_history"])
    code, out, _ = run(capsys, "embed", "--config", "run.cfg", "--workdir", wd,
                       "--checkpoint", "finetune.ckpt.json")
    assert code == 0
    header, users, emb = read_embeddings(tmp_path / "embeddings.jsonl")
    assert emb.shape == (48, 8)
    code, out, _ = run(capsys, "eval", "--config", "run.cfg", "--workdir", wd,
                       "--checkpoint", "finetune.ckpt.json", "--split", "all")
    assert code == 0
    rep = json.loads(out)
    assert "recall_at_precision_85" in rep and "recall_at_precision_50" in rep


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "usermoe.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


@pytest.mark.slow
def test_grad_check_command(capsys):
    code, out, _ = run(capsys, "grad-check")
    assert code == 0 and "max relative error" in out and "PASS" in out
