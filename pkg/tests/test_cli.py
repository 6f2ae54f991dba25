import configparser
import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rvae_st.cli import main, parse_schedule
from rvae_st.data import load_batch_csv, load_checkpoint

TINY = ["--hidden", "4", "--layers", "2", "--latent", "2", "--max-epochs", "2",
        "--batch-size", "8", "--lr", "1e-3"]


def files(d):
    out = {}
    for root, _, names in os.walk(d):
        for n in names:
            p = os.path.join(root, n)
            out[os.path.relpath(p, d)] = open(p, "rb").read()
    return out


def pipeline():
    assert main(["gen", "--kind", "sine", "--samples", "30", "--length", "24", "--channels", "2",
                 "--seed", "3", "--out", "data.csv"]) == 0
    assert main(["train", "--data", "data.csv", "--schedule", "12:12:24", "--out-dir", "run",
                 "--seed", "4"] + TINY) == 0
    assert main(["sample", "--checkpoint", "run/model.ckpt", "--n", "6", "--length", "30",
                 "--seed", "5", "--out", "synth.csv"]) == 0
    assert main(["eval", "--metric", "psd", "--real", "data.csv", "--synth", "synth.csv",
                 "--results", "res.csv"]) != 0          # length mismatch is reported
    assert main(["sample", "--checkpoint", "run/model.ckpt", "--n", "30", "--length", "24",
                 "--seed", "5", "--out", "synth24.csv"]) == 0
    assert main(["eval", "--metric", "psd", "--real", "data.csv", "--synth", "synth24.csv",
                 "--results", "res.csv", "--out", "psd.csv"]) == 0
    assert main(["eval", "--metric", "pca", "--real", "data.csv", "--synth", "synth24.csv",
                 "--results", "res.csv", "--out", "pca.csv"]) == 0
    assert main(["eval", "--metric", "esp", "--checkpoint", "run/model.ckpt", "--length", "40",
                 "--results", "res.csv", "--out", "esp.csv"]) == 0


def test_pipeline_outputs(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    pipeline()
    data, names = load_batch_csv("data.csv")
    assert data.shape == (30, 24, 2) and names == ["ch0", "ch1"]
    ck = load_checkpoint("run/model.ckpt")
    assert ck.schedule == [12, 24] and ck.seed == 4 and ck.scaler is not None
    synth, _ = load_batch_csv("synth.csv")
    assert synth.shape == (6, 30, 2)
    phases = list(csv.DictReader(open("run/phases.csv")))
    assert [int(r["length"]) for r in phases] == [12, 24]
    res = list(csv.DictReader(open("res.csv")))
    assert {r["metric"] for r in res} >= {"psd_peak1_offset", "pca_sv1", "esp_r_final"}
    esp = list(csv.reader(open("esp.csv")))
    assert esp[0] == ["t", "r"] and len(esp) == 42 and float(esp[1][1]) == 1.0
    cfg = configparser.ConfigParser()
    cfg.read("run/config.ini")
    assert cfg["train"]["schedule"] == "12:12:24"


def test_determinism_byte_identical(tmp_path, monkeypatch):
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        monkeypatch.chdir(tmp_path / d)
        pipeline()
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) >= 10
    for k in a:
        assert a[k] == b[k], k


def test_inspect_checkpoint(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    main(["gen", "--samples", "20", "--length", "10", "--channels", "1", "--out", "d.csv"])
    main(["train", "--data", "d.csv", "--scheme", "conventional", "--length", "10",
          "--out-dir", "r"] + TINY)
    capsys.readouterr()
    assert main(["inspect-checkpoint", "--checkpoint", "r/model.ckpt"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["dims"]["hidden"] == 4 and info["schedule"] == [10]
    assert info["param_count"] > 0


def test_config_file_and_precedence(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "c.ini").write_text("[gen]\nsamples = 7\nlength = 9\nchannels = 1\nout = x.csv\n")
    assert main(["gen", "--config", "c.ini", "--length", "11"]) == 0
    data, _ = load_batch_csv("x.csv")
    assert data.shape == (7, 11, 1)
    resolved = configparser.ConfigParser()
    resolved.read("x.csv.config.ini")
    assert resolved["gen"]["length"] == "11" and resolved["gen"]["samples"] == "7"


@pytest.mark.parametrize("text", ["[gen]\nsampels = 7\n", "[bogus]\na = 1\n", "[gen]\nsamples = x\n"])
def test_config_rejects_unknown_or_bad(tmp_path, monkeypatch, capsys, text):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "c.ini").write_text(text)
    assert main(["gen", "--config", "c.ini"]) == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "data.csv").exists()


def test_cli_errors(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["gen", "--kind", "noise"]) == 1
    assert main(["train", "--out-dir", "r"]) == 1
    assert main(["eval", "--metric", "avg_elbo", "--synth", "s.csv"]) == 1
    assert "--scorer" in capsys.readouterr().err
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    assert main(["inspect-checkpoint", "--checkpoint", "bad.ckpt"]) == 1
    assert main(["sample"]) == 1
    with pytest.raises(SystemExit):
        main(["frobnicate"])
    assert main(["train", "--gen-kind", "sine", "--scheme", "conventional"]) == 1


def test_parse_schedule(caplog):
    assert parse_schedule("100:100:300") == (100, 200, 300)
    assert parse_schedule("50") == (50,)
    with caplog.at_level("WARNING"):
        parse_schedule("100:400:900")
    assert "300" in caplog.text
    with pytest.raises(ValueError):
        parse_schedule("1:2")


def test_eval_disc_split_real_and_avg_elbo(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    main(["gen", "--samples", "40", "--length", "12", "--channels", "1", "--out", "d.csv"])
    main(["train", "--data", "d.csv", "--scheme", "conventional", "--length", "10",
          "--out-dir", "s"] + TINY)
    assert main(["eval", "--metric", "avg_elbo", "--synth", "d.csv", "--scorer", "s/model.ckpt",
                 "--window", "10", "--results", "r.csv"]) == 0
    rows = list(csv.DictReader(open("r.csv")))
    assert rows[0]["metric"] == "avg_elbo" and np.isfinite(float(rows[0]["value"]))
    # too few samples for the default discriminator split sizes
    assert main(["eval", "--metric", "disc", "--real", "d.csv", "--split-real", "true",
                 "--results", "r.csv"]) == 1


def test_console_script_module():
    out = subprocess.run([sys.executable, "-m", "rvae_st.cli", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.strip()
