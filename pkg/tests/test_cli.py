import csv
import json

import numpy as np
import pytest

from eskin.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from eskin.config import Config, ConfigError, load_config
from eskin.sensing import same_face_mask


@pytest.fixture(scope="module")
def small_ini(tmp_path_factory):
    cfg = Config().replace("scenarios", duration=1.0, fps=10.0, ramp_s=0.5, onset_s=0.3)
    path = tmp_path_factory.mktemp("cfg") / "small.ini"
    path.write_text(cfg.to_ini())
    return path


@pytest.fixture(scope="module")
def touch_dir(small_ini, tmp_path_factory):
    out = tmp_path_factory.mktemp("touch")
    assert main(["gen-data", "--kind", "touch", "--config", str(small_ini), "--seed", "7",
                 "--workers", "1", "--out-dir", str(out)]) == EXIT_OK
    return out


def test_help_lists_defaults(capsys):
    assert main(["train", "--help"]) == EXIT_OK
    text = capsys.readouterr().out
    for flag in ("--epochs", "--batch-size", "--fast", "--seed", "--out-dir", "--config"):
        assert flag in text
    assert "touch 100, track 150" in text and "touch 256, track 255" in text
    assert main(["simulate", "--help"]) == EXIT_OK
    assert "20,20,20" in capsys.readouterr().out


def test_unknown_flag_is_config_error():
    assert main(["simulate", "--bogus"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_simulate_inflation_sign_pattern(small_ini, tmp_path):
    assert main(["simulate", "--inflation", "20,20,20", "--config", str(small_ini),
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "simulate.csv")))
    assert len(rows[0]) == 29 and len(rows) == 11
    final = np.array([float(v) for v in rows[-1][1:]])
    same = same_face_mask()
    assert np.all(final[same] > 0) and np.all(final[~same] < 0)
    assert (tmp_path / "simulate.png").stat().st_size > 0


def test_simulate_rejects_bad_inflation(tmp_path):
    assert main(["simulate", "--inflation", "20,20", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["simulate", "--inflation", "30,0,0", "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_gen_data_is_byte_identical(touch_dir, small_ini, tmp_path):
    again = tmp_path / "again"
    assert main(["gen-data", "--kind", "touch", "--config", str(small_ini), "--seed", "7",
                 "--workers", "2", "--out-dir", str(again)]) == EXIT_OK
    files = sorted(p.relative_to(touch_dir) for p in touch_dir.rglob("*") if p.is_file())
    assert len(files) == 190
    for f in files:
        assert (touch_dir / f).read_bytes() == (again / f).read_bytes()
    manifest = json.loads((touch_dir / "manifest.json").read_text())
    assert manifest["seed"] == 7 and Config.from_ini(manifest["config"]) == load_config(small_ini)


def test_untrained_touch_checkpoint_scores_chance(touch_dir, tmp_path):
    # an untrained net predicts one dominant class, so single runs scatter;
    # averaged over initialisations the test accuracy is the chance level
    accs = []
    for seed in range(20):
        run = tmp_path / f"s{seed}"
        assert main(["train", "--task", "touch", "--data", str(touch_dir), "--epochs", "0",
                     "--seed", str(seed), "--out-dir", str(run)]) == EXIT_OK
        assert main(["eval", "--task", "touch", "--data", str(touch_dir), "--checkpoint",
                     str(run / "touch_best.npz"), "--out-dir", str(run / "eval")]) == EXIT_OK
        metrics = dict(csv.reader(open(run / "eval" / "touch_metrics.csv")))
        accs.append(float(metrics["accuracy"]))
    assert np.mean(accs) == pytest.approx(1 / 19, abs=0.02)
    rows = list(csv.reader(open(tmp_path / "s0" / "eval" / "confusion.csv")))
    assert len(rows) == 20


def test_train_wrong_dataset_kind(touch_dir, tmp_path):
    assert main(["train", "--task", "track", "--data", str(touch_dir), "--epochs", "1",
                 "--out-dir", str(tmp_path)]) == EXIT_DATA


def test_missing_dataset_and_checkpoint(tmp_path, touch_dir):
    assert main(["train", "--task", "touch", "--data", str(tmp_path / "nope")]) == EXIT_DATA
    assert main(["eval", "--task", "touch", "--data", str(touch_dir),
                 "--checkpoint", str(tmp_path / "none.npz"), "--out-dir", str(tmp_path)]) == EXIT_DATA


def test_schema_mismatch_is_data_error(touch_dir, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(touch_dir, copy)
    m = json.loads((copy / "manifest.json").read_text())
    m["schema_version"] += 1
    (copy / "manifest.json").write_text(json.dumps(m))
    assert main(["train", "--task", "touch", "--data", str(copy), "--out-dir", str(tmp_path)]) == EXIT_DATA


def test_validate_solver(tmp_path, capsys):
    assert main(["validate-solver", "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "solver_validation.csv")))
    assert {"check", "value", "reference", "rel_error"} <= set(rows[0])
    assert "passed" in capsys.readouterr().out


# ----- config file ----------------------------------------------------------
def test_config_round_trip_and_env(tmp_path, monkeypatch):
    cfg = Config().replace("touch_model", epochs=7).replace("fields", backend="fd")
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    assert load_config(path) == cfg
    monkeypatch.setenv("ESKIN_CONFIG", str(path))
    assert load_config() == cfg
    monkeypatch.delenv("ESKIN_CONFIG")
    assert load_config() == Config()


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[touch_model]\nepochs = many\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    assert main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
