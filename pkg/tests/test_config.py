import json

import numpy as np
import pandas as pd
import pytest

from keceni_analysis.core.config import RunConfig, read_config_file, resolve_run_config, settings
from keceni_analysis.core.errors import ConfigError, KeceniInputError
from keceni_analysis.core.storage import StorageManager
from keceni_analysis.core.workers import parallel_map, resolve_threads, task_rng, task_seed


def test_defaults_follow_settings():
    rc = RunConfig()
    assert rc.mc_draws == settings.MC_DRAWS
    assert rc.hac_radius == settings.HAC_RADIUS
    assert rc.bandwidth == "cv"
    assert rc.propensity_eps == settings.PROPENSITY_EPS


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# 注释\n\nmc-draws = 40\nkernel=box\n lambda = 0.8 \n", encoding="utf-8")
    assert read_config_file(path) == {"mc_draws": "40", "kernel": "box", "lambda": "0.8"}
    rc = resolve_run_config(path)
    assert rc.mc_draws == 40
    assert rc.kernel == "box"
    assert rc.bandwidth == 0.8


def test_command_line_overrides_config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("mc_draws = 40\nseed = 3\n", encoding="utf-8")
    rc = resolve_run_config(path, {"mc_draws": 7, "seed": None})
    assert rc.mc_draws == 7
    assert rc.seed == 3


@pytest.mark.parametrize("values", [
    {"mc_draws": 0},
    {"bandwidth": -1.0},
    {"alpha": 1.5},
    {"hac_radius": -1},
    {"alpha_mu": 2.0},
    {"metric": "cosine"},
    {"no_such_key": 1},
])
def test_invalid_run_config(values):
    with pytest.raises(ConfigError):
        resolve_run_config(None, values)


def test_config_errors_are_input_errors(tmp_path):
    with pytest.raises(KeceniInputError):
        read_config_file(tmp_path / "missing.conf")
    bad = tmp_path / "bad.conf"
    bad.write_text("mc_draws 5\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=":1:"):
        read_config_file(bad)


def test_storage_manager(tmp_path):
    store = StorageManager(tmp_path / "run")
    assert store.load_manifest() == {}
    store.save_manifest("estimate", {"mc_draws": 5}, {"chosen_lambda": np.float64(0.5)})
    manifest = store.load_manifest()
    assert manifest["command"] == "estimate"
    assert manifest["config"] == {"mc_draws": 5}
    assert manifest["chosen_lambda"] == 0.5

    store.save_json("values.json", {"a": np.array([1.0, np.inf]), "b": np.int64(3)})
    assert json.loads(store.path("values.json").read_text(encoding="utf-8")) == {"a": [1.0, None], "b": 3}

    store.save_rows("rows.csv", [{"x": 1}], ["x", "y"])
    assert list(pd.read_csv(store.path("rows.csv")).columns) == ["x", "y"]


def test_named_streams_are_independent():
    a = task_rng(5, "covariates").random(4)
    assert np.array_equal(a, task_rng(5, "covariates").random(4))
    assert not np.array_equal(a, task_rng(5, "treatment").random(4))
    assert not np.array_equal(a, task_rng(5, "covariates", 1).random(4))
    assert task_seed(5, "rep", 0) == task_seed(5, "rep", 0)
    assert task_seed(5, "rep", 0) != task_seed(5, "rep", 1)


def test_parallel_map_keeps_order():
    def work(k):
        return k * k

    assert parallel_map(work, range(20), threads=4) == [k * k for k in range(20)]
    assert parallel_map(work, [], threads=4) == []
    assert resolve_threads(3) == 3
    assert resolve_threads(None) == max(1, settings.THREADS)
