import json

import pytest

from hrp.cli import main
from hrp.mining import read_dataset

TINY_SYNTH = ["--clips", "3", "--size", "16", "--clip-length", "12"]
TINY_PRE = ["--encoder", "tiny", "--steps", "3", "--batch-size", "4"]
TINY_BC = ["--encoder", "tiny", "--iterations", "2", "--batch-size", "4", "--n-demos", "2", "--max-steps", "8"]


def run(*argv):
    return main([str(a) for a in argv])


def manifest(path):
    data = json.loads((path / "manifest.json").read_text())
    return data.get("run", data)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", *TINY_SYNTH, "--seed", 3, "--out", root / "corpus") == 0
    assert run("mine", "--detections", root / "corpus", "--wrist-horizon", 4, "--out", root / "mined") == 0
    assert run("pretrain", "--data", root / "mined", *TINY_PRE, "--out", root / "enc") == 0
    assert run("bc", "--init", root / "enc" / "encoder.hrpt", *TINY_BC, "--out", root / "pol") == 0
    return root


def test_every_command_writes_a_manifest(pipeline):
    for name, cmd in (("corpus", "synth"), ("mined", "mine"), ("enc", "pretrain"), ("pol", "bc")):
        m = manifest(pipeline / name)
        assert m["command"] == cmd
        assert set(m) >= {"config", "seeds", "inputs", "outputs", "tool_version", "wall_clock_s"}


def test_missing_required_flag_is_usage_error(tmp_path, capsys):
    assert run("mine", "--out", tmp_path / "x") == 2
    assert "usage" in capsys.readouterr().err
    assert run("pretrain", "--data", tmp_path, "--out", tmp_path / "p", "--steps", 0) == 2
    assert run("synth", "--clips", -1, "--out", tmp_path) == 2
    assert run("nosuchcommand") == 2


def test_runtime_failures_exit_one(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("mine", "--detections", empty, "--out", tmp_path / "m") == 1
    assert run("pretrain", "--data", tmp_path / "missing", "--out", tmp_path / "p") == 1


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"clips": 2, "size": 16, "clip_length": 10, "seed": 5}))
    assert run("synth", "--config", cfg, "--clips", 1, "--out", tmp_path / "a") == 0
    m = manifest(tmp_path / "a")
    assert m["config"]["clips"] == 1  # explicit flag wins
    assert m["config"]["clip_length"] == 10 and m["seeds"]["seed"] == 5
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "b") == 2


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("HRP_THREADS", "2")
    assert run("synth", *TINY_SYNTH, "--clips", 1, "--out", tmp_path / "a") == 0
    assert manifest(tmp_path / "a")["config"]["threads"] == 2
    assert run("synth", *TINY_SYNTH, "--clips", 1, "--threads", 1, "--out", tmp_path / "b") == 0
    assert manifest(tmp_path / "b")["config"]["threads"] == 1
    monkeypatch.setenv("HRP_THREADS", "zero")
    assert run("synth", *TINY_SYNTH, "--clips", 1, "--out", tmp_path / "c") == 2


def test_single_gmm_mode_descriptor(pipeline, tmp_path):
    assert run("mine", "--detections", pipeline / "corpus", "--gmm-modes", 1, "--wrist-horizon", 4,
               "--out", tmp_path / "m1") == 0
    ds = read_dataset(tmp_path / "m1")
    lengths = {len(r.contact) for recs in ds.clips.values() for r in recs}
    assert lengths == {2}


def test_pretrain_echoes_weights_and_mode(pipeline, tmp_path, capsys):
    assert run("pretrain", "--data", pipeline / "mined", *TINY_PRE, "--mode", "full", "--lambda-obj", 0,
               "--out", tmp_path / "p") == 0
    out = capsys.readouterr().out
    assert "lambda_ct=0.005" in out and "lambda_obj=0.0" in out and "mode=full" in out
    m = manifest(tmp_path / "p")
    assert m["config"]["mode"] == "full"
    rows = (tmp_path / "p" / "loss_trace.jsonl").read_text().splitlines()
    assert len(rows) == 3 and all(json.loads(r)["loss_object"] == 0.0 for r in rows)


def test_eval_shares_seeds(pipeline, tmp_path, capsys):
    ckpt = pipeline / "pol" / "policy.hrpt"
    assert run("eval", "--policy", ckpt, "--policy", "random", "--policy", "expert", "--episodes", 3,
               "--max-steps", 20, "--out", tmp_path / "e") == 0
    out = capsys.readouterr().out
    assert "+/-" in out
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert len(report["seeds"]) == 3 and len(report["policies"]) == 3
    assert run("eval", "--episodes", 3, "--out", tmp_path / "f") == 2


def test_ablate_prints_all_rows(pipeline, tmp_path, capsys):
    assert run("ablate", "--data", pipeline / "mined", *TINY_PRE, "--n-demos", 1, "--max-steps", 6,
               "--bc-iterations", 2, "--bc-batch-size", 4, "--episodes", 2, "--out", tmp_path / "a") == 0
    out = capsys.readouterr().out
    for label in ("Ours", "No Contact", "No Object", "No Hand"):
        assert label in out
    table = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert set(table) == {"full", "no_contact", "no_object", "no_hand"}


def test_gradcheck_passes(capsys):
    assert run("gradcheck") == 0
    assert "PASS" in capsys.readouterr().out


def _tree(path):
    files = {}
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        if f.name == "manifest.json":
            data = json.loads(f.read_text())
            data.get("run", data).pop("wall_clock_s")
            files[f.relative_to(path)] = json.dumps(data, sort_keys=True).encode()
        else:
            files[f.relative_to(path)] = f.read_bytes()
    return files


@pytest.mark.parametrize("stage", ["synth", "mine", "pretrain", "bc"])
def test_rerun_is_byte_identical(pipeline, tmp_path, stage):
    args = {
        "synth": ["synth", *TINY_SYNTH, "--seed", 3],
        "mine": ["mine", "--detections", pipeline / "corpus", "--wrist-horizon", 4],
        "pretrain": ["pretrain", "--data", pipeline / "mined", *TINY_PRE],
        "bc": ["bc", "--init", pipeline / "enc" / "encoder.hrpt", *TINY_BC],
    }[stage]
    out = tmp_path / "out"
    assert run(*args, "--out", out) == 0
    first = _tree(out)
    assert run(*args, "--out", out) == 0
    assert _tree(out) == first
