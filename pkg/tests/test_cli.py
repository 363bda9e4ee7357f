import json
from pathlib import Path

import pytest

from pmt.cli import RunConfig, main
from pmt.nn import lr_at

ROOT = Path(__file__).resolve().parents[1]
SMOKE = str(ROOT / "configs" / "smoke.json")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--config", SMOKE, "--out", d / "synth") == 0
    assert run("ingest", "--config", SMOKE, "--out", d / "ingest",
               "--sequences", d / "synth" / "sequences.txt") == 0
    assert run("pretrain", "--config", SMOKE, "--out", d / "next", "--task", "next",
               "--train", d / "ingest" / "train.txt") == 0
    return d


def _ckpt(d, task):
    return next((d / task).glob(f"{task}-*.pmt"))


def test_synth_outputs(pipeline):
    names = {p.name for p in (pipeline / "synth").iterdir()}
    assert {"regions.csv", "sequences.txt", "sequences.txt.truth", "records.csv",
            "manifest.json"} <= names
    m = json.loads((pipeline / "synth" / "manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 0 and "world" in m["sub_seeds"]


def test_ingest_from_records_matches_sequences(pipeline, tmp_path):
    assert run("ingest", "--config", SMOKE, "--out", tmp_path, "--records",
               pipeline / "synth" / "records.csv", "--regions",
               pipeline / "synth" / "regions.csv") == 0
    assert (tmp_path / "train.txt").read_bytes() == (pipeline / "ingest" / "train.txt").read_bytes()


def test_every_stage_runs(pipeline, capsys):
    d = pipeline
    assert run("pretrain", "--config", SMOKE, "--out", d / "mask", "--task", "mask",
               "--train", d / "ingest" / "train.txt", "--init", _ckpt(d, "next")) == 0
    assert run("eval-next", "--config", SMOKE, "--out", d / "en", "--checkpoint", _ckpt(d, "next"),
               "--test", d / "ingest" / "test.txt") == 0
    assert run("eval-impute", "--config", SMOKE, "--out", d / "ei", "--checkpoint",
               _ckpt(d, "mask"), "--test", d / "ingest" / "test.txt") == 0
    assert run("eval-generate", "--config", SMOKE, "--out", d / "eg", "--checkpoint",
               _ckpt(d, "next"), "--test", d / "ingest" / "test.txt", "--regions",
               d / "synth" / "regions.csv") == 0
    assert run("analyze-embed", "--config", SMOKE, "--out", d / "ae", "--checkpoint",
               _ckpt(d, "mask"), "--regions", d / "synth" / "regions.csv") == 0
    assert run("encode-dump", "--out", d / "ed", "--D", 16, "--windows", 5) == 0
    assert run("ckpt-info", "--checkpoint", _ckpt(d, "mask"), "--json") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["model_config"]["D"] == 16 and info["metadata"]["task"] == "mask"
    for sub, files in [("en", ["next_location.csv", "next_location.json"]),
                       ("ei", ["imputation.csv"]), ("eg", ["generation.csv"]),
                       ("ae", ["embed_correlation.csv", "similarity_hist.csv", "probe.json"]),
                       ("ed", ["temporal_encoding.csv"])]:
        for f in files:
            assert (d / sub / f).exists(), (sub, f)
        assert (d / sub / "manifest.json").exists()
    rows = (d / "ed" / "temporal_encoding.csv").read_text().splitlines()
    assert len(rows) == 6 and rows[0].split(",")[:2] == ["window", "d0"]
    models = {line.split(",")[0] for line in (d / "en" / "next_location.csv").read_text().splitlines()[1:]}
    assert models == {"pmt", "fbm"}


@pytest.mark.parametrize("stage", ["synth", "ingest", "pretrain"])
def test_manifest_replay_is_bit_exact(pipeline, tmp_path, stage):
    src = pipeline / stage if stage != "pretrain" else pipeline / "next"
    assert run(stage, "--from-manifest", src / "manifest.json", "--out", tmp_path) == 0
    m = json.loads((src / "manifest.json").read_text())
    assert m["outputs"]
    for name in m["outputs"]:
        assert (tmp_path / name).read_bytes() == (src / name).read_bytes(), name


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert run("synth", "--frobnicate", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "usage:" in err
    assert json.loads(err.strip().splitlines()[-1])["error"]["exit_code"] == 1
    assert run() == 1
    assert run("pretrain", "--out", tmp_path, "--train", "x.txt") == 1  # no --task


def test_unknown_config_key_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"synth": {"n_agents": 3, "colour": "red"}}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "synth.colour" in capsys.readouterr().err


def test_mismatched_init_checkpoint_is_validation_error(pipeline, tmp_path):
    assert run("pretrain", "--config", SMOKE, "--set", "model.D=24", "--out", tmp_path,
               "--task", "mask", "--train", pipeline / "ingest" / "train.txt",
               "--init", _ckpt(pipeline, "next")) == 2


def test_corrupt_checkpoint_is_validation_error(tmp_path):
    bad = tmp_path / "bad.pmt"
    bad.write_bytes(b"nope")
    assert run("ckpt-info", "--checkpoint", bad) == 2


def test_missing_input_is_validation_error(tmp_path):
    assert run("eval-next", "--out", tmp_path, "--checkpoint", tmp_path / "none.pmt",
               "--test", tmp_path / "none.txt") == 2


def test_runtime_failure_exit_code(pipeline, tmp_path, monkeypatch):
    import pmt.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli._COMMANDS, "encode-dump", boom)
    assert run("encode-dump", "--out", tmp_path, "--D", 8) == 3


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 4, "synth": {"n_agents": 2, "days": 1},
                               "world": {"bbox": [0, 0, 1000, 1000], "cell_size": 500}}))
    monkeypatch.setenv("PMT_SEED", "9")
    assert run("synth", "--config", cfg, "--out", tmp_path / "a") == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 9
    assert run("synth", "--config", cfg, "--seed", 11, "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 11


def test_flags_override_file_values(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n_agents": 2, "days": 1},
                               "world": {"bbox": [0, 0, 1000, 1000], "cell_size": 500}}))
    assert run("synth", "--config", cfg, "--agents", 3, "--set", "synth.days=2",
               "--out", tmp_path) == 0
    lines = (tmp_path / "sequences.txt").read_text().splitlines()
    assert len(lines) == 3 and len(lines[0].split("|")[2].split(",")) == 96


def test_training_seed_key_rejected():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"training": {"seed": 3}})


@pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_validate_and_respect_lr_cap(path):
    cfg = RunConfig.from_dict(json.loads(path.read_text()))
    tc = cfg.training_config("next")
    D = cfg.model_config().D
    steps = list(range(1, 20_001)) + list(range(20_001, 1_000_001, 997)) + [1_000_000]
    assert max(lr_at(s, tc.warmup_steps, D, tc.c, tc.lr_cap, tc.schedule) for s in steps) <= 1e-4
