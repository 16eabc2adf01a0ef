import json

import numpy as np
import pandas as pd
import pytest

from tsmqual.audio_io import AudioSignal, write_audio
from tsmqual.cli import main, parse_seeds, UsageError
from tsmqual.pipeline import FEATURE_NAMES, load_table, save_table

from conftest import FS, music_like, ola_stretch
from test_net import synthetic

HEADER = "subset,ref_path,test_path,method,beta,smos,raw_smos,median_os,raw_median_os,class\n"


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    x = music_like(1.5, seed=11)
    write_audio(d / "ref.wav", AudioSignal(0.9 * x / np.max(np.abs(x)), FS))
    for beta in (0.8, 1.25):
        y = ola_stretch(x, beta)
        write_audio(d / f"t{beta}.wav", AudioSignal(0.9 * y / np.max(np.abs(y)), FS))
    (d / "m.csv").write_text(HEADER +
                             "train,ref.wav,t0.8.wav,OLA,0.8,3,,3,,music\n"
                             "train,ref.wav,t1.25.wav,OLA,1.25,2.5,,2,,music\n"
                             "test,ref.wav,ref.wav,Copy,1.0,5,,5,,music\n")
    (d / "broken.csv").write_text(HEADER +
                                  "train,ref.wav,t0.8.wav,OLA,0.8,3,,3,,music\n"
                                  "train,ref.wav,missing.wav,OLA,0.5,2,,2,,music\n"
                                  "train,ref.wav,t1.25.wav,OLA,1.25,2.5,,2,,music\n")
    return d


@pytest.fixture(scope="module")
def table_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("tables") / "synthetic.csv"
    save_table(synthetic(60, n_test=10), p)
    return p


class TestFeatures:
    def test_three_rows(self, files, tmp_path, capsys):
        out = tmp_path / "f.csv"
        assert main(["features", str(files / "m.csv"), "-o", str(out), "--no-include-refs"]) == 0
        table = load_table(out)
        assert len(table) == 3
        assert (table.frame["alignment"] == "interp_to_test").all()
        assert "ok" in capsys.readouterr().err

    def test_references_and_alignment(self, files, tmp_path):
        out = tmp_path / "f.csv"
        assert main(["features", str(files / "m.csv"), "-o", str(out),
                     "--alignment", "anchor_ref", "--jobs", "2"]) == 0
        table = load_table(out)
        assert len(table) == 4 and table.frame["augmented"].sum() == 1
        assert (table.frame["alignment"] == "anchor_ref").all()
        assert table.config.alignment == "anchor_ref"

    def test_skip_errors(self, files, tmp_path, capsys):
        out = tmp_path / "f.csv"
        args = ["features", str(files / "broken.csv"), "-o", str(out), "--no-include-refs"]
        assert main(args) == 2
        assert not out.exists()
        assert main(args + ["--skip-errors"]) == 0
        assert len(load_table(out)) == 2
        assert "FAILED" in capsys.readouterr().err

    def test_config_file(self, files, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"alignment": "interp_shortest", "include_refs": False}))
        out = tmp_path / "f.csv"
        assert main(["features", str(files / "m.csv"), "-o", str(out), "--config", str(cfg)]) == 0
        table = load_table(out)
        assert len(table) == 3 and (table.frame["alignment"] == "interp_to_shortest").all()

    def test_beta_override(self, files, tmp_path):
        out = tmp_path / "f.csv"
        assert main(["features", str(files / "m.csv"), "-o", str(out), "--no-include-refs",
                     "--beta", "0.9"]) == 0
        assert (load_table(out).frame["beta"] == 0.9).all()


class TestTrain:
    def test_three_seeds(self, table_path, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", str(table_path), "-o", str(out), "--seeds", "0..2",
                     "--epochs", "5", "--no-figures"]) == 0
        assert sorted(p.name for p in out.glob("model_seed*.json")) == [
            "model_seed0.json", "model_seed1.json", "model_seed2.json"]
        summary = pd.read_csv(out / "summary.csv")
        assert summary["best"].sum() == 1
        assert summary.loc[summary["best"], "D"].iloc[0] == summary["D"].min()
        assert "best seed" in capsys.readouterr().out

    def test_rerun_identical(self, table_path, tmp_path):
        for name in ("a", "b"):
            assert main(["train", str(table_path), "-o", str(tmp_path / name), "--seeds", "1",
                         "--epochs", "4", "--no-figures"]) == 0
        assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()

    def test_history_figure(self, table_path, tmp_path):
        assert main(["train", str(table_path), "-o", str(tmp_path), "--epochs", "3"]) == 0
        assert (tmp_path / "history_seed0.png").exists()
        assert len(pd.read_csv(tmp_path / "history_seed0.csv")) == 6  # extended once

    def test_missing_target(self, table_path, tmp_path, capsys):
        assert main(["train", str(table_path), "-o", str(tmp_path), "--target", "raw_smos"]) == 2
        assert "raw_smos" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(files, tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    assert main(["features", str(files / "m.csv"), "-o", str(d / "f.csv")]) == 0
    table = load_table(d / "f.csv")
    # four rows leave some features constant, which the scaler rejects
    for name in FEATURE_NAMES:
        col = table.frame[name]
        if col.max() == col.min():
            table.frame[name] = col + np.arange(len(col))
    save_table(table, d / "f.csv")
    assert main(["train", str(d / "f.csv"), "-o", str(d), "--epochs", "3", "--no-figures"]) == 0
    return d / "model_seed0.json"


class TestPredict:
    def test_pair(self, files, trained, capsys):
        assert main(["predict", str(trained), "--pair", str(files / "ref.wav"),
                     str(files / "ref.wav")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1 and 1 < float(lines[0]) < 5
        assert len(lines[0].split(".")[1]) == 3

    def test_manifest(self, files, trained, tmp_path, capsys):
        out = tmp_path / "res.csv"
        assert main(["predict", str(trained), "--manifest", str(files / "m.csv"), "-o", str(out)]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 3
        res = pd.read_csv(out)
        assert len(res) == 3 and res["omos"].between(1, 5).all()

    def test_schema_mismatch(self, files, trained, tmp_path, capsys):
        d = json.loads(trained.read_text())
        d["schema"] = "tsmqual-features/0"
        (tmp_path / "old.json").write_text(json.dumps(d))
        code = main(["predict", str(tmp_path / "old.json"), "--pair", str(files / "ref.wav"),
                     str(files / "ref.wav")])
        assert code == 2 and "schema" in capsys.readouterr().err

    def test_config_mismatch(self, files, trained, capsys):
        code = main(["predict", str(trained), "--pair", str(files / "ref.wav"),
                     str(files / "ref.wav"), "--alignment", "anchor_ref"])
        assert code == 2 and "schema" in capsys.readouterr().err


class TestEvaluate:
    def test_results_file(self, tmp_path, capsys):
        res = pd.DataFrame({"method": ["A", "A", "B", "B"], "beta": [0.5, 1.0, 0.5, 0.2],
                            "class": ["music"] * 4, "omos": [2.0, 5.0, 3.0, 1.0]})
        res.to_csv(tmp_path / "r.csv", index=False)
        assert main(["evaluate", str(tmp_path / "r.csv"), "-o", str(tmp_path / "rep")]) == 0
        out = capsys.readouterr().out
        assert "2 excluded" in out and "2.000" in out
        assert (tmp_path / "rep" / "series.png").exists()
        assert len(pd.read_csv(tmp_path / "rep" / "exclusions.csv")) == 2

    def test_manifest_with_model(self, files, trained, tmp_path):
        assert main(["evaluate", str(files / "m.csv"), "--model", str(trained),
                     "-o", str(tmp_path), "--no-figures"]) == 0
        overall = pd.read_csv(tmp_path / "overall.csv", index_col=0)
        assert overall.index.tolist() == ["OLA"]

    def test_needs_model(self, files, tmp_path):
        assert main(["evaluate", str(files / "m.csv"), "-o", str(tmp_path)]) == 1

    def test_missing_metadata(self, tmp_path):
        pd.DataFrame({"method": ["A"], "omos": [3.0]}).to_csv(tmp_path / "r.csv", index=False)
        assert main(["evaluate", str(tmp_path / "r.csv"), "-o", str(tmp_path / "o")]) == 2


class TestUsage:
    def test_no_command(self):
        assert main([]) == 1

    def test_bad_flag(self):
        assert main(["train", "x.csv", "-o", "d", "--bogus"]) == 1

    def test_bad_choice(self):
        assert main(["features", "m.csv", "-o", "x", "--alignment", "diagonal"]) == 1

    def test_bad_seeds(self, table_path, tmp_path):
        assert main(["train", str(table_path), "-o", str(tmp_path), "--seeds", "3..1"]) == 1

    def test_unknown_config_key(self, table_path, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"colour": "blue"}')
        assert main(["train", str(table_path), "-o", str(tmp_path), "--config", str(cfg)]) == 1

    def test_missing_input(self, tmp_path):
        assert main(["train", str(tmp_path / "nope.csv"), "-o", str(tmp_path)]) == 2

    def test_parse_seeds(self):
        assert parse_seeds("0..3") == [0, 1, 2, 3]
        assert parse_seeds("7") == [7]
        with pytest.raises(UsageError):
            parse_seeds("a..b")
