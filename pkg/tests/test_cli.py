import json

import numpy as np
import pytest

from kfno import cli
from kfno import data as D
from kfno import koopman as km
from kfno import pipeline as P

TINY_CONFIG = {
    "train": {
        "koopman": {"encoder_hidden": [8], "latent_dim": 6, "decoder_hidden": [8]},
        "fno": {"lift_width": 8, "hidden": 6, "project_width": 6, "n_layers": 2, "modes": 4},
        "n_c": 15, "max_epochs": 2, "adapt_epochs": 1,
    },
    "synth": {"n_cycles": 24, "n_samples": 40},
}


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY_CONFIG))
    return p


@pytest.fixture()
def synth_dir(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert cli.main(["synth", "--config", str(cfg_file), "--out-dir", str(out)]) == 0
    return out


def test_synth_files_roundtrip(synth_dir):
    csv = synth_dir / "B-1.csv"
    assert csv.exists() and (synth_dir / "B-1.json").exists() and (synth_dir / "B-1.truth.csv").exists()
    assert len(D.parse_cycles(csv)) == 24
    assert D.read_meta(synth_dir / "B-1.json").nominal_capacity_ah == 2.0


def test_synth_same_seed_byte_identical(tmp_path, cfg_file):
    for name in ("a", "b"):
        cli.main(["synth", "--config", str(cfg_file), "--out-dir", str(tmp_path / name), "--seed", "4"])
    assert (tmp_path / "a" / "B-1.csv").read_bytes() == (tmp_path / "b" / "B-1.csv").read_bytes()


def test_synth_fleet_preset(tmp_path, cfg_file):
    out = tmp_path / "fleet"
    cli.main(["synth", "--config", str(cfg_file), "--out-dir", str(out), "--fleet", "temperature-ood"])
    assert sorted(p.name for p in out.glob("*.csv") if not p.name.endswith(".truth.csv")) == \
        ["B-1.csv", "B-2.csv", "B-3.csv"]
    assert len(cli.discover([out])) == 3


def test_train_eval_spectrum_predict(tmp_path, cfg_file, synth_dir):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_file), "--data", str(synth_dir), "--out-dir", str(run)]) == 0
    hist = (run / "history.csv").read_text().splitlines()
    assert len(hist) == 3  # header + 2 epochs
    rho_col = hist[0].split(",").index("rho")
    assert all(float(r.split(",")[rho_col]) <= 1.0 for r in hist[1:])

    # eval: metrics equal pipeline.evaluate
    assert cli.main(["eval", "--config", str(cfg_file), "--checkpoint", str(run / "checkpoint.kfno"),
                     "--data", str(synth_dir), "--out-dir", str(run)]) == 0
    (rec,) = json.loads((run / "metrics.json").read_text())
    est, _ = P.load_checkpoint(run / "checkpoint.kfno")
    ds = cli.discover([synth_dir])[0]
    cycles = [D.build_cycle(c, est.scaler) for c in D.prepare(ds.cycles, 15)]
    tr, te = D.contiguous_split(cycles, 0.25)
    m, _ = P.evaluate(est, te, prev_cycle=tr[-1])
    assert rec["soc_rmse_pct"] == m.soc_rmse_pct and rec["qmax_rmse_ah"] == m.qmax_rmse_ah
    pred_lines = (run / "predictions.csv").read_text().splitlines()
    assert pred_lines[0] == ",".join(P.PREDICTION_COLUMNS) and len(pred_lines) == 1 + 6 * 15

    assert cli.main(["spectrum", "--checkpoint", str(run / "checkpoint.kfno"), "--out-dir", str(run),
                     "--svg"]) == 0
    lam, rho = km.read_spectrum_csv(run / "spectrum.csv")
    ref, ref_rho = km.spectrum(est.koopman.K)
    assert np.array_equal(lam, ref) and rho == ref_rho <= 1.0
    assert (run / "spectrum_plot.csv").read_text().count("circle,") == 361
    assert (run / "spectrum.svg").read_text().startswith("<svg")

    assert cli.main(["predict", "--checkpoint", str(run / "checkpoint.kfno"), "--data",
                     str(synth_dir / "B-1.csv"), "--out-dir", str(tmp_path / "pred"), "--cycle", "5"]) == 0
    assert len((tmp_path / "pred" / "predictions.csv").read_text().splitlines()) == 16


def test_train_rerun_same_checkpoint_bytes(tmp_path, cfg_file, synth_dir):
    for name in ("r1", "r2"):
        cli.main(["train", "--config", str(cfg_file), "--data", str(synth_dir), "--out-dir", str(tmp_path / name),
                  "--epochs", "1"])
    assert (tmp_path / "r1" / "checkpoint.kfno").read_bytes() == (tmp_path / "r2" / "checkpoint.kfno").read_bytes()


def test_ood_eval_k_sweep(tmp_path, cfg_file):
    data = tmp_path / "fleet"
    cli.main(["synth", "--config", str(cfg_file), "--out-dir", str(data), "--fleet", "temperature-ood"])
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_file), "--data", str(data), "--out-dir", str(run),
                     "--scenario", "temp-ood"]) == 0
    assert cli.main(["eval", "--config", str(cfg_file), "--checkpoint", str(run / "checkpoint.kfno"),
                     "--data", str(data), "--out-dir", str(run), "--scenario", "temp-ood",
                     "--k-shot", "0,1,5,10", "--no-time"]) == 0
    recs = json.loads((run / "metrics.json").read_text())
    assert [r["k_shot"] for r in recs] == [0, 1, 5, 10]
    assert all(r["scenario"] == "temp-ood" and "time_s" not in r for r in recs)
    assert (run / "spectrum_k10.csv").exists() and (run / "predictions_k5.csv").exists()


def test_print_config_precedence(capsys, cfg_file):
    assert cli.main(["train", "--data", "x", "--config", str(cfg_file), "--print-config", "--seed", "9",
                     "--nc", "45", "--decoupled", "--rho-max", "0.9"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["train"]["seed"] == 9 and out["synth"]["seed"] == 9
    assert out["train"]["n_c"] == 45 and out["train"]["coupled"] is False
    assert out["train"]["koopman"]["rho_max"] == 0.9
    assert out["train"]["max_epochs"] == 2  # from file, not overridden


def test_unknown_config_key_rejected(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"lr": 1}}))
    assert cli.main(["train", "--data", "x", "--config", str(p)]) == 2
    assert "unknown" in capsys.readouterr().err
    p.write_text(json.dumps({"extra": {}}))
    assert cli.main(["train", "--data", "x", "--config", str(p)]) == 2


def test_missing_data_and_bad_checkpoint(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope")]) == 2
    bad = tmp_path / "x.kfno"
    bad.write_bytes(b"nonsense")
    assert cli.main(["spectrum", "--checkpoint", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "not a kfno checkpoint" in capsys.readouterr().err


def test_eval_rejects_mismatched_architecture(tmp_path, cfg_file, synth_dir):
    run = tmp_path / "run"
    cli.main(["train", "--config", str(cfg_file), "--data", str(synth_dir), "--out-dir", str(run), "--epochs", "1"])
    other = dict(TINY_CONFIG, train=dict(TINY_CONFIG["train"], n_c=45))
    p = tmp_path / "other.json"
    p.write_text(json.dumps(other))
    assert cli.main(["eval", "--config", str(p), "--checkpoint", str(run / "checkpoint.kfno"),
                     "--data", str(synth_dir), "--out-dir", str(run)]) == 2


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("KFNO_THREADS", "1")
    limiter = cli._limit_threads()
    assert limiter is not None
    limiter.restore_original_limits()
    monkeypatch.delenv("KFNO_THREADS")
    assert cli._limit_threads() is None
