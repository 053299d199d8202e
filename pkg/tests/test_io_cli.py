import json

import numpy as np
import pytest
import yaml

from csskit.autograd import Adam
from csskit.cli import main
from csskit.config import ConfigError, load_config, parse_config
from csskit.io import (CheckpointError, load_checkpoint, param_hash, restore_optimizer,
                       save_checkpoint, wav_read, wav_write)
from csskit.vararray import NetConfig, VarArray

TINY = NetConfig(num_blocks=1, layers_per_block=1, model_dim=8, attention_heads=2, conv_kernel=5)


def test_wav_float32_bitwise(tmp_path, rng):
    x = rng.standard_normal((7, 1234)).astype(np.float32)
    wav_write(tmp_path / "a.wav", x, 16000)
    y, fs = wav_read(tmp_path / "a.wav")
    assert fs == 16000 and y.dtype == np.float32
    assert np.array_equal(x, y)


def test_wav_pcm16(tmp_path):
    x = np.array([[-1.0, -0.5, 0.0, 0.5, 32767 / 32768]])
    wav_write(tmp_path / "p.wav", x, 8000, pcm16=True)
    y, fs = wav_read(tmp_path / "p.wav")
    assert fs == 8000
    assert y[0, 0] == -1.0
    assert np.allclose(y, x, atol=1 / 32768)


@pytest.mark.filterwarnings("ignore::scipy.io.wavfile.WavFileWarning")
def test_wav_malformed(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFFxxxxWAVEjunk")
    with pytest.raises(ValueError):
        wav_read(tmp_path / "bad.wav")


def test_checkpoint_round_trip(tmp_path):
    model = VarArray(TINY, seed=3)
    opt = Adam(model.params, lr=1e-3)
    for p in model.params.values():
        p.grad = np.ones_like(p.data)
    opt.step()
    save_checkpoint(tmp_path / "m.ckpt", model, opt)
    back, state = load_checkpoint(tmp_path / "m.ckpt")
    assert back.cfg == TINY
    assert param_hash(back.params) == param_hash(model.params)
    opt2 = restore_optimizer(back, state, lr=1e-3)
    assert opt2.t == opt.t
    assert all(np.array_equal(opt2.m[k], opt.m[k]) for k in opt.m)


def test_checkpoint_shape_mismatch(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", VarArray(TINY))
    other = NetConfig(num_blocks=1, layers_per_block=1, model_dim=12, attention_heads=2, conv_kernel=5)
    with pytest.raises(CheckpointError, match="expected"):
        load_checkpoint(tmp_path / "m.ckpt", expect=other)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, VarArray(TINY))
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_config_reports_all_problems():
    with pytest.raises(ConfigError) as exc:
        parse_config({"seed": -1, "bogus": 1, "train": {"nope": 2}, "css": {"window_shift": 5.0}})
    fields = [f for f, _ in exc.value.problems]
    assert {"seed", "bogus", "train.nope", "css"} <= set(fields)


def test_config_presets_and_defaults(tmp_path):
    cfg = parse_config({"net": {"preset": "LT"}, "seed": 4})
    assert cfg.net.model_dim == 96 and cfg.seed == 4
    assert parse_config({}).net.model_dim == 48
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"css": {"output_method": "mvdr"}}))
    assert load_config(str(tmp_path / "c.yaml")).css.output_method == "mvdr"
    with pytest.raises(ConfigError):
        parse_config({"net": {"preset": "huge"}})


SMALL = {
    "seed": 1,
    "net": {"num_blocks": 1, "layers_per_block": 1, "model_dim": 8, "attention_heads": 2, "conv_kernel": 5},
    "train": {"steps": 2, "batch_size": 1, "base_lr": 1e-3},
    "simulate": {"train_samples": 3, "test_samples": 2, "sample_dur": 0.8, "sessions": 2,
                 "session_dur": 8.0},
}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return str(path)


def test_cli_simulate_segment(tmp_path, small_config, capsys):
    out = str(tmp_path / "sim")
    assert main(["simulate", "--config", small_config, "--out", out]) == 0
    manifest = json.loads((tmp_path / "sim" / "manifest.json").read_text())
    assert [r["name"] for r in manifest["recordings"]] == ["session0", "session1", "demo"]
    wave, fs = wav_read(tmp_path / "sim" / "session0.wav")
    assert wave.shape == (7, 128000) and fs == 16000
    assert main(["segment", str(tmp_path / "sim" / "session0.tsv"), "--config", small_config,
                 "--out", out]) == 0
    lines = (tmp_path / "sim" / "segments.tsv").read_text().splitlines()
    assert lines and all(len(l.split("\t")) == 3 for l in lines)


def test_cli_train_and_separate(tmp_path, small_config, capsys):
    s1 = str(tmp_path / "s1")
    assert main(["train", "--stage", "1", "--config", small_config, "--out", s1]) == 0
    ckpt = str(tmp_path / "s1" / "model.ckpt")
    s2 = str(tmp_path / "s2")
    assert main(["train", "--stage", "2", "--config", small_config, "--teacher", ckpt,
                 "--student", ckpt, "--channels", "3", "--out", s2]) == 0
    report = json.loads((tmp_path / "s2" / "report.json").read_text())
    assert report["stage"] == 2 and report["steps"] == 2
    wav_write(tmp_path / "in.wav", np.random.default_rng(0).standard_normal((4, 40000)) * 0.1)
    sep = str(tmp_path / "sep")
    assert main(["separate", str(tmp_path / "in.wav"), "--student", ckpt, "--method", "mvdr",
                 "--out", sep, "--config", small_config]) == 0
    streams = [wav_read(tmp_path / "sep" / f"stream{i}.wav")[0] for i in range(2)]
    assert all(s.shape == (1, 40000) for s in streams)
    log = (tmp_path / "sep" / "windows.log").read_text().splitlines()
    assert log[0].startswith("#") and len(log) == 1 + 4


def test_cli_eval(tmp_path, capsys, rng):
    ref = rng.standard_normal((2, 8000)).astype(np.float32)
    wav_write(tmp_path / "ref.wav", ref)
    wav_write(tmp_path / "est.wav", ref[::-1])
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "est.wav"), "--reference", str(tmp_path / "ref.wav"),
                 "--out", str(tmp_path / "ev")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["perm"] == [1, 0] and report["si_snr_mean"] == 60.0


@pytest.mark.parametrize("argv,code,field", [
    (["train", "--stage", "2"], 2, "teacher"),
    (["separate", "missing.wav"], 2, "student"),
    (["eval", "x.wav"], 2, "reference"),
    (["segment"], 2, "input"),
    (["frobnicate"], 2, "argv"),
    (["eval", "nope.wav", "--reference", "nope.wav"], 1, None),
])
def test_cli_errors(tmp_path, capsys, argv, code, field):
    assert main(argv + ["--out", str(tmp_path)]) == code
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: ")
    rec = json.loads(err[len("error: "):])
    if field:
        assert rec["problems"][0]["field"] == field


def test_cli_bad_config(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("seed: -3\nwhat: 1\n")
    assert main(["simulate", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path)]) == 2
    rec = json.loads(capsys.readouterr().err.strip()[len("error: "):])
    assert {p["field"] for p in rec["problems"]} == {"seed", "what"}
