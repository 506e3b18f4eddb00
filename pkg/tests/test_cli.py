import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from labnet.audio import read_wav, write_wav
from labnet.cli import load_config, main, parse_mics, ConfigError
from labnet.model import LABNet, ModelConfig
from labnet.params import save_params

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["simulate", "--synthetic", "--count", "3", "--mics", "4", "--seed", "7",
                 "--seconds", "1.0", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "m.labnet"
    save_params(LABNet(ModelConfig(hidden=8, seed=1)), path)
    return path


def lines(path):
    return [json.loads(x) for x in Path(path).read_text().splitlines()]


# --------------------------------------------------------------------- config


def test_default_config_file_is_complete():
    raw = load_config(ROOT / "configs" / "default.yaml")
    assert set(raw) == {"dsp", "model", "train", "sim"}


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  depth: 3\n")
    assert main(["--config", str(cfg), "describe"]) == 2
    assert "depth" in capsys.readouterr().err
    cfg.write_text("optim:\n  lr: 1\n")
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_invalid_value_exit_2(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  hidden: 10\n")
    assert main(["--config", str(cfg), "describe"]) == 2


def test_flags_override_file(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  hidden: 8\n")
    assert main(["--config", str(cfg), "describe", "--hidden", "12"]) == 0
    assert json.loads(capsys.readouterr().out)["model"]["hidden"] == 12


@pytest.mark.parametrize("text,expected", [("4", [4]), ("2..5", [2, 3, 4, 5]), ("1,3,6", [1, 3, 6])])
def test_parse_mics(text, expected):
    assert parse_mics(text) == expected


def test_bad_mics_spec_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--mics", "0..3"])
    assert exc.value.code == 2


# --------------------------------------------------------------------- simulate


def test_simulate_manifest(dataset):
    entries = lines(dataset / "manifest.jsonl")
    assert len(entries) == 3 and all(e["n_mics"] == 4 for e in entries)
    echo = yaml.safe_load((dataset / "config.yaml").read_text())
    assert echo["sim"]["mics"] == 4 and echo["sim"]["seconds"] == 1.0


def test_simulate_deterministic(dataset, tmp_path):
    assert main(["simulate", "--synthetic", "--count", "3", "--mics", "4", "--seed", "7",
                 "--seconds", "1.0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "manifest.jsonl").read_bytes() == (dataset / "manifest.jsonl").read_bytes()


def test_simulate_test_split_twelve_mics(tmp_path):
    assert main(["simulate", "--synthetic", "--count", "1", "--split", "test", "--seconds", "0.5",
                 "--out", str(tmp_path)]) == 0
    assert lines(tmp_path / "manifest.jsonl")[0]["n_mics"] == 12


def test_simulate_needs_a_source(tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == 2


# --------------------------------------------------------------------- enhance


def test_enhance_six_channel_file(tmp_path):
    x = np.random.default_rng(0).standard_normal((8000, 6)).astype(np.float32) * 0.1
    write_wav(tmp_path / "in.wav", x)
    assert main(["enhance", "--input", str(tmp_path / "in.wav"), "--out", str(tmp_path / "o.wav")]) == 0
    y, fs = read_wav(tmp_path / "o.wav")
    assert fs == 16000 and y.shape == (8000,)


def test_enhance_mono_files_and_stream(tmp_path, model_file):
    rng = np.random.default_rng(1)
    paths = []
    for c in range(3):
        write_wav(tmp_path / f"ch{c}.wav", rng.standard_normal(6000).astype(np.float32) * 0.1)
        paths.append(str(tmp_path / f"ch{c}.wav"))
    common = ["enhance", "--model", str(model_file), "--input", *paths]
    assert main(common + ["--out", str(tmp_path / "a.wav")]) == 0
    assert main(common + ["--out", str(tmp_path / "b.wav"), "--stream"]) == 0
    a, b = read_wav(tmp_path / "a.wav")[0], read_wav(tmp_path / "b.wav")[0]
    assert np.abs(a - b).max() < 1e-5


def test_enhance_mismatches_exit_2(tmp_path, capsys):
    write_wav(tmp_path / "in.wav", np.zeros((4000, 3), np.float32))
    assert main(["enhance", "--input", str(tmp_path / "in.wav"), "--mics", "4",
                 "--out", str(tmp_path / "o.wav")]) == 2
    assert "expected 4 channels" in capsys.readouterr().err
    write_wav(tmp_path / "r.wav", np.zeros(4000, np.float32), rate=8000)
    assert main(["enhance", "--input", str(tmp_path / "r.wav"), "--out", str(tmp_path / "o.wav")]) == 2


def test_enhance_corrupt_model_exit_2(tmp_path):
    (tmp_path / "bad.labnet").write_bytes(b"garbage")
    write_wav(tmp_path / "in.wav", np.zeros(4000, np.float32))
    assert main(["enhance", "--model", str(tmp_path / "bad.labnet"), "--input",
                 str(tmp_path / "in.wav"), "--out", str(tmp_path / "o.wav")]) == 2


def test_enhance_ablation_and_mvdr(dataset, tmp_path):
    assert main(["enhance", "--ablate", "no-stage2", "--manifest", str(dataset / "manifest.jsonl"),
                 "--id", "train_00001", "--out", str(tmp_path / "abl")]) == 0
    assert [p.name for p in (tmp_path / "abl").glob("*.wav")] == ["train_00001.wav"]
    assert main(["enhance", "--baseline", "mvdr", "--manifest", str(dataset / "manifest.jsonl"),
                 "--out", str(tmp_path / "mvdr")]) == 0
    assert len(list((tmp_path / "mvdr").glob("*.wav"))) == 3
    assert (tmp_path / "mvdr" / "config.yaml").exists()


def test_ablate_with_model_is_usage_error(tmp_path, model_file):
    write_wav(tmp_path / "in.wav", np.zeros(4000, np.float32))
    assert main(["enhance", "--model", str(model_file), "--ablate", "tac", "--input",
                 str(tmp_path / "in.wav"), "--out", str(tmp_path / "o.wav")]) == 2


# --------------------------------------------------------------------- eval


def test_eval_identity_zero(dataset, tmp_path, capsys):
    assert main(["eval", "--manifest", str(dataset / "manifest.jsonl"), "--enhancer", "identity",
                 "--out", str(tmp_path)]) == 0
    rows = lines(tmp_path / "report.jsonl")
    assert rows[-1]["type"] == "summary" and rows[-1]["mean_si_snr_improvement_db"] == 0.0
    assert "SI-SNRi=0.00" in capsys.readouterr().out


def test_eval_sweep(dataset, tmp_path, model_file):
    assert main(["eval", "--manifest", str(dataset / "manifest.jsonl"), "--model", str(model_file),
                 "--mics", "2..4", "--out", str(tmp_path)]) == 0
    sweep = lines(tmp_path / "sweep.jsonl")
    assert [s["channels"] for s in sweep] == [2, 3, 4]
    assert all(s["count"] == 3 for s in sweep)
    assert (tmp_path / "report_c03.jsonl").exists()


def test_eval_missing_file_continues(dataset, tmp_path):
    copy = tmp_path / "data"
    import shutil

    shutil.copytree(dataset, copy)
    (copy / "train_00000" / "noisy_ch01.wav").unlink()
    assert main(["eval", "--manifest", str(copy / "manifest.jsonl"), "--enhancer", "identity",
                 "--out", str(tmp_path / "r")]) == 0
    rows = lines(tmp_path / "r" / "report.jsonl")
    assert [r["type"] for r in rows] == ["utterance", "utterance", "error", "summary"]
    assert "noisy_ch01" in rows[2]["error"]


# --------------------------------------------------------------------- bench


def test_bench_report(tmp_path, capsys):
    assert main(["bench", "--mics", "1,3,6", "--rtf-seconds", "0.5", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "parameters: 49537" in text and "= 64 ms" in text
    rep = json.loads((tmp_path / "bench.json").read_text())
    m = rep["macs_per_second"]
    assert (m["3"] - m["1"]) / 2 == pytest.approx((m["6"] - m["3"]) / 3, rel=1e-12)
    assert rep["rtf"]["value"] > 0 and rep["latency"]["total_ms"] == 64.0


def test_bench_params_independent_of_mics(capsys):
    counts = set()
    for mics in ("1", "12"):
        assert main(["bench", "--mics", mics, "--rtf-seconds", "0"]) == 0
        counts.add(capsys.readouterr().out.splitlines()[0])
    assert len(counts) == 1


# --------------------------------------------------------------------- train


def test_train_and_resume(dataset, tmp_path):
    base = ["train", "--manifest", str(dataset / "manifest.jsonl"), "--hidden", "8",
            "--batch-size", "3", "--segment-seconds", "0.5", "--seed", "1"]
    assert main(base + ["--epochs", "2", "--out", str(tmp_path / "full")]) == 0
    assert main(base + ["--epochs", "1", "--out", str(tmp_path / "part")]) == 0
    # the echoed config restores every setting; only the epoch budget is raised
    assert main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--epochs", "2",
                 "--resume", str(tmp_path / "part")]) == 0
    assert lines(tmp_path / "full" / "curves.jsonl") == lines(tmp_path / "part" / "curves.jsonl")
    assert (tmp_path / "full" / "model.labnet").read_bytes() == \
        (tmp_path / "part" / "model.labnet").read_bytes()


def test_train_needs_manifest(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_train_divergence_exit_1(dataset, tmp_path, monkeypatch, capsys):
    import torch
    from labnet import train as T

    monkeypatch.setattr(T, "mask_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    assert main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--hidden", "8",
                 "--epochs", "1", "--segment-seconds", "0.5", "--out", str(tmp_path)]) == 1
    assert "diverged" in capsys.readouterr().err


def test_grad_check_mode(capsys, monkeypatch):
    from labnet import cli

    monkeypatch.setattr(cli, "grad_check", lambda cfg, eps: 1.5e-6)
    assert main(["train", "--grad-check", "--eps", "1e-4"]) == 0
    assert "worst relative gradient error: 1.500e-06" in capsys.readouterr().out


def test_console_script_runs():
    res = subprocess.run([sys.executable, "-m", "labnet.cli", "describe", "--hidden", "8"],
                         capture_output=True, text=True, check=True)
    assert json.loads(res.stdout)["params"] > 0


def test_thread_override_validated(monkeypatch):
    monkeypatch.setenv("LABNET_NUM_THREADS", "many")
    assert main(["describe"]) == 2
