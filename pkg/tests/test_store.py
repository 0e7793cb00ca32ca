import pytest
import yaml

from settings import load_config, merge_options, storage_dir
from store import RunRecord, RunStore, get_store


def record(mode="pcd", mse=0.5, horizon=12, dataset="etth1", **kw):
    fields = dict(dataset=dataset, mode=mode, composition="both",
                  mask_kind="full" if mode == "pcd" else "none", mask_variant="scalar",
                  metric="pearson", horizon=horizon, lookback=96, seed=0, mse=mse, mae=mse / 2)
    fields.update(kw)
    return RunRecord(**fields)


@pytest.fixture
def store(tmp_path):
    return RunStore(str(tmp_path))


def test_add_and_read_back(store):
    store.add_run(record(cd_ratio=0.41, alpha=1.2, beta=-0.3, r_abs=0.6, channels=7))
    (row,) = store.get_runs()
    assert row["dataset"] == "etth1" and row["mse"] == 0.5 and row["mae"] == 0.25
    assert row["cd_ratio"] == 0.41 and row["channels"] == 7


def test_rerun_replaces_metrics(store):
    store.add_run(record(mse=0.5))
    store.add_run(record(mse=0.4, cd_ratio=0.3))
    (row,) = store.get_runs()
    assert row["mse"] == 0.4 and row["cd_ratio"] == 0.3


def test_filters_and_ordering(store):
    store.add_run(record("pcd", horizon=24))
    store.add_run(record("ci", horizon=12))
    store.add_run(record("pcd", horizon=12))
    store.add_run(record("pcd", dataset="weather"))
    rows = store.get_runs("etth1")
    assert [(r["mode"], r["horizon"]) for r in rows] == [("ci", 12), ("pcd", 12), ("pcd", 24)]
    assert len(store.get_runs(mode="pcd")) == 3


def test_cd_gain_against_matching_ci_run(store):
    store.add_run(record("ci", mse=0.5))
    store.add_run(record("pcd", mse=0.4, cd_ratio=0.45))
    store.add_run(record("cd", mse=0.6))
    store.add_run(record("pcd", mse=0.3, horizon=24))
    gains = {r["mode"]: r for r in store.get_cd_gain("etth1")}
    assert set(gains) == {"cd", "pcd"}
    assert gains["pcd"]["gain"] == pytest.approx(0.2)
    assert gains["cd"]["gain"] == pytest.approx(-0.2)
    assert gains["pcd"]["ci_mse"] == 0.5 and gains["pcd"]["cd_ratio"] == 0.45


def test_clear_runs(store):
    store.add_run(record(dataset="a"))
    store.add_run(record(dataset="b"))
    store.clear_runs("a")
    assert [r["dataset"] for r in store.get_runs()] == ["b"]
    store.clear_runs()
    assert store.get_runs() == []


def test_store_reopens_existing_database(tmp_path):
    RunStore(str(tmp_path)).add_run(record())
    assert len(RunStore(str(tmp_path)).get_runs()) == 1


# --- settings ---

def test_merge_precedence():
    config = {"epochs": 5, "lr": 0.01, "train": {"epochs": 7, "batch-size": 8}, "eval": {"epochs": 1}}
    out = merge_options("train", {"epochs": None, "lr": 0.002},
                        config, {"epochs": 10, "lr": 1e-3, "batch_size": 32, "seed": 0})
    assert out == {"epochs": 7, "lr": 0.002, "batch_size": 8, "seed": 0}


def test_top_level_mapping_is_an_option_but_sections_are_not():
    config = {"storage": {"path": "/tmp/x"}, "synth_spec": {"coupling": "mixture", "channels": 2},
              "unseen_params": {"strategy": "closest_rbar"}, "train": {"epochs": 3}}
    out = merge_options("unseen-params", {"strategy": None}, config,
                        {"synth_spec": None, "strategy": "avg_all", "train": None, "storage": None},
                        sections=["train", "unseen-params"])
    assert out == {"synth_spec": {"coupling": "mixture", "channels": 2},
                   "strategy": "closest_rbar", "train": None, "storage": None}


def test_explicit_config_path(tmp_path):
    path = tmp_path / "pcd.yaml"
    path.write_text(yaml.safe_dump({"metric": "cosine"}))
    assert load_config(str(path)) == {"metric": "cosine"}
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "missing.yaml"))


def test_get_store_uses_configured_path(tmp_path):
    store = get_store({"storage": {"path": str(tmp_path / "cfg")}})
    store.add_run(record())
    assert store.db_path == str(tmp_path / "cfg" / "runs.db")
    assert get_store({}, str(tmp_path / "cfg")).get_runs()[0]["dataset"] == "etth1"


def test_storage_dir_prefers_override(tmp_path):
    target = tmp_path / "runs"
    assert storage_dir({"storage": {"path": "/nonexistent"}}, str(target)) == str(target)
    assert target.is_dir()
