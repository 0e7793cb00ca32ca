import json

import pytest
import yaml

import pcd
import report
from chanmask import ParamsRegistry

SYNTH = "lagged_copy:C=3,T=300,tau=2,sigma=0.1,seed=1"
SMALL = ["--synth-spec", SYNTH, "--lookback", "16", "--horizon", "8", "--d-model", "8",
         "--n-heads", "2", "--n-layers", "1", "--epochs", "1", "--batch-size", "32"]


@pytest.fixture
def storage(tmp_path):
    return str(tmp_path / "store")


def run(capsys, *argv):
    code = pcd.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_train_writes_reports_checkpoint_and_history(tmp_path, storage, capsys):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", *SMALL, "--storage", storage, "--out", str(out_dir))
    assert code == 0
    assert "PCD Forecast Report" in out
    saved = json.loads((out_dir / "report.json").read_text())
    assert saved["mode"] == "pcd" and "8" in saved["per_horizon"]
    assert saved["history"]["best_epoch"] == 1
    assert (out_dir / "model.ckpt").exists()
    assert (out_dir / "report.txt").read_text() == out

    registry = ParamsRegistry(str(tmp_path / "store" / "registry.yaml"))
    assert "synth-lagged_copy-C3-T300-s1" in registry

    code, out, _ = run(capsys, "report", "--storage", storage)
    assert code == 0 and "synth-lagged_copy-C3-T300-s1" in out


def test_same_seed_gives_identical_report_files(tmp_path, storage, capsys):
    for name in ("a", "b"):
        assert run(capsys, "train", *SMALL, "--storage", storage, "--no-store",
                   "--out", str(tmp_path / name))[0] == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "report.txt").read_bytes() == (tmp_path / "b" / "report.txt").read_bytes()


def test_eval_and_analyze_from_checkpoint(tmp_path, storage, capsys):
    out_dir = tmp_path / "run"
    run(capsys, "train", *SMALL, "--storage", storage, "--out", str(out_dir))
    trained = json.loads((out_dir / "report.json").read_text())
    ckpt = str(out_dir / "model.ckpt")

    code, _, _ = run(capsys, "eval", "--synth-spec", SYNTH, "--checkpoint", ckpt,
                     "--out", str(tmp_path / "eval"))
    assert code == 0
    evaluated = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert evaluated["per_horizon"] == trained["per_horizon"]

    code, out, _ = run(capsys, "analyze", "--synth-spec", SYNTH, "--lookback", "16",
                       "--horizon", "8", "--checkpoint", ckpt, "--storage", storage)
    assert code == 0 and "r(|R|)" in out and "r(M)" in out


def test_masked_channel_prediction_from_checkpoint(tmp_path, storage, capsys):
    out_dir = tmp_path / "run"
    run(capsys, "train", *SMALL, "--no-instance-norm", "--storage", storage, "--out", str(out_dir))
    code, out, _ = run(capsys, "mcp", "--synth-spec", SYNTH,
                       "--checkpoint", str(out_dir / "model.ckpt"))
    assert code == 0 and "masked_mse" in out


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "0")
    assert code == 0
    assert "grad check model" in out and "grad check mask" in out


def test_register_then_pick_unseen_parameters(tmp_path, capsys):
    registry = str(tmp_path / "registry.yaml")
    assert run(capsys, "register", "--registry", registry, "--name", "etth1", "--alpha", "1.0",
               "--beta", "0.0", "--r-rbar", "0.2")[0] == 0
    assert run(capsys, "register", "--registry", registry, "--name", "weather", "--alpha", "3.0",
               "--beta", "-1.0", "--r-rbar", "0.6")[0] == 0
    assert set(ParamsRegistry(registry).entries) == {"etth1", "weather"}

    code, out, _ = run(capsys, "unseen-params", "--registry", registry, "--strategy", "avg_all",
                       "--out", str(tmp_path / "unseen"))
    assert code == 0
    params = json.loads((tmp_path / "unseen" / "report.json").read_text())["params"]
    assert (params["alpha"], params["beta"]) == (2.0, -0.5)

    code, _, _ = run(capsys, "unseen-params", "--registry", registry, "--strategy", "closest_rbar",
                     "--target-rbar", "0.5", "--out", str(tmp_path / "closest"))
    params = json.loads((tmp_path / "closest" / "report.json").read_text())["params"]
    assert code == 0 and params["alpha"] == 3.0


def test_register_needs_all_fields(tmp_path, capsys):
    code, _, err = run(capsys, "register", "--registry", str(tmp_path / "r.yaml"), "--name", "x")
    assert code == 1 and "--alpha" in err


def test_errors_exit_nonzero_with_message(tmp_path, storage, capsys):
    code, _, err = run(capsys, "train", "--storage", storage)
    assert code == 1 and "error:" in err

    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3,x\n")
    code, _, err = run(capsys, "train", "--data", str(bad), "--storage", storage)
    assert code == 1 and "row 2" in err

    code, _, err = run(capsys, "unseen-params", "--registry", str(tmp_path / "empty.yaml"),
                       "--strategy", "avg_all")
    assert code == 1 and "avg_all" in err


def test_config_file_supplies_command_options(tmp_path, storage, capsys):
    config = tmp_path / "pcd.yaml"
    config.write_text(yaml.safe_dump({
        "synth_spec": SYNTH, "lookback": 16, "horizon": 8,
        "train": {"d_model": 8, "n_heads": 2, "n_layers": 1, "epochs": 1, "mode": "ci"},
    }))
    code, _, _ = run(capsys, "train", "--config", str(config), "--storage", storage,
                     "--out", str(tmp_path / "run"))
    assert code == 0
    saved = json.loads((tmp_path / "run" / "report.json").read_text())
    assert saved["mode"] == "ci" and saved["mask_kind"] == "none"


def test_config_synth_spec_mapping_at_top_level(tmp_path, storage, capsys):
    config = tmp_path / "pcd.yaml"
    config.write_text(yaml.safe_dump({
        "storage": {"path": storage},
        "synth_spec": {"coupling": "lagged_copy", "channels": 3, "length": 300, "lag": 2,
                       "noise": 0.1, "seed": 1},
    }))
    code, out, err = run(capsys, "analyze", "--config", str(config), "--lookback", "16",
                         "--horizon", "8", "--out", str(tmp_path / "stats"))
    assert code == 0, err
    saved = json.loads((tmp_path / "stats" / "report.json").read_text())
    assert saved["dataset"] == "synth-lagged_copy-C3-T300-s1"
    assert saved["stats"]["channels"] == 3


def test_history_script_json(storage, capsys):
    pcd.main(["train", *SMALL, "--mode", "ci", "--storage", storage])
    pcd.main(["train", *SMALL, "--storage", storage])
    capsys.readouterr()
    assert report.main(["--storage", storage, "--json"]) == 0
    history = json.loads(capsys.readouterr().out)
    assert len(history["runs"]) == 2
    assert history["cd_gain"][0]["mode"] == "pcd"
