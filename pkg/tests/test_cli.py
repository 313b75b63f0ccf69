import json

import pandas as pd
import pytest

from keceni_analysis.analysis.dissimilarity import DissimilarityMetric
from keceni_analysis.analysis.estimator import KeceniEstimator, Kernel
from keceni_analysis.analysis.nuisance import fit_bundle
from keceni_analysis.cli.main import main
from keceni_analysis.data.loader import load_dataset, load_scenario


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["--quiet", "simulate", "--n", "150", "--seed", "4", "--out", str(out)]) == 0
    return out / "rep_000"


def _run_args(sim_dir, out, *extra):
    return [
        "--quiet", *extra[:1],
        "--nodes", str(sim_dir / "nodes.csv"),
        "--edges", str(sim_dir / "edges.csv"),
        "--out", str(out),
        *extra[1:],
    ]


def test_simulate_writes_manifest_and_is_deterministic(tmp_path, sim_dir):
    out = tmp_path / "again"
    assert main(["--quiet", "simulate", "--n", "150", "--seed", "4", "--out", str(out)]) == 0
    for name in ("nodes.csv", "edges.csv", "latent.csv", "scenario_treated.json", "scenario_control.json"):
        assert (out / "rep_000" / name).read_bytes() == (sim_dir / name).read_bytes()
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "simulate"
    assert manifest["config"]["n"] == 150
    assert set(manifest["replications"][0]["truths"]) == {"treated", "control"}


def test_estimate_matches_library(tmp_path, sim_dir):
    out = tmp_path / "est"
    code = main(_run_args(sim_dir, out, "estimate",
                          "--scenario", str(sim_dir / "scenario_treated.json"),
                          "--lambda", "1.0", "--mc-draws", "20", "--variance", "simple"))
    assert code == 0
    result = json.loads((out / "estimate.json").read_text(encoding="utf-8"))

    ds = load_dataset(sim_dir / "nodes.csv", sim_dir / "edges.csv")
    bundle, ds_fit = fit_bundle(ds)
    sc = load_scenario(sim_dir / "scenario_treated.json", ds.graph, ds.ids)
    est = KeceniEstimator(ds_fit, bundle, mc_draws=20, seed=0).estimate(
        sc, DissimilarityMetric("summary-l1"), Kernel(1.0)
    )
    assert result["theta"] == pytest.approx(est.theta, rel=1e-12)
    assert result["lambda"] == 1.0
    assert result["variance"]["sigma2"] > 0
    lo, hi = result["variance"]["ci"]
    assert lo < result["theta"] < hi

    rows = pd.read_csv(out / "estimates.csv")
    assert list(rows.columns) == ["rep", "target", "scenario", "theta", "d_hat", "lambda", "sigma", "ci_lo", "ci_hi"]
    assert len(pd.read_csv(out / "per_node.csv")) == ds.n
    assert len(pd.read_csv(out / "influence.csv")) == ds.n
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["chosen_lambda"] is None
    assert manifest["config"]["mc_draws"] == 20


def test_estimate_with_cv_bandwidth(tmp_path, sim_dir):
    out = tmp_path / "est_cv"
    code = main(_run_args(sim_dir, out, "estimate",
                          "--scenario", str(sim_dir / "scenario_control.json"),
                          "--lambda", "cv", "--mc-draws", "10", "--save-models"))
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    result = json.loads((out / "estimate.json").read_text(encoding="utf-8"))
    assert manifest["chosen_lambda"] == pytest.approx(result["lambda"])
    assert (out / "cv.csv").exists()
    assert (out / "outcome_model.json").exists()
    assert (out / "propensity_model.json").exists()


def test_cv_command(tmp_path, sim_dir):
    out = tmp_path / "cv"
    code = main(_run_args(sim_dir, out, "cv", "--grid", "0.5,1.0,2.0", "--mc-draws", "10"))
    assert code == 0
    table = pd.read_csv(out / "cv.csv")
    assert table["lambda"].tolist() == [0.5, 1.0, 2.0]
    summary = json.loads((out / "cv.json").read_text(encoding="utf-8"))
    assert summary["chosen"] in (0.5, 1.0, 2.0)


def test_invalid_scenario_exits_with_input_error(tmp_path, sim_dir):
    scenario = tmp_path / "bad.json"
    scenario.write_text(json.dumps({"target": "no-such-node", "assignment": {"no-such-node": 1}}),
                        encoding="utf-8")
    code = main(_run_args(sim_dir, tmp_path / "out", "estimate",
                          "--scenario", str(scenario), "--lambda", "1.0", "--mc-draws", "5"))
    assert code == 2


def test_malformed_scenario_json_exits_with_input_error(tmp_path, sim_dir):
    scenario = tmp_path / "broken.json"
    scenario.write_text("{not json", encoding="utf-8")
    code = main(_run_args(sim_dir, tmp_path / "out", "estimate",
                          "--scenario", str(scenario), "--lambda", "1.0", "--mc-draws", "5"))
    assert code == 2

    scenario.write_text(json.dumps({"target": "0", "assignment": ["0"]}), encoding="utf-8")
    code = main(_run_args(sim_dir, tmp_path / "out", "estimate",
                          "--scenario", str(scenario), "--lambda", "1.0", "--mc-draws", "5"))
    assert code == 2


def test_repeated_estimate_is_byte_identical(tmp_path, sim_dir):
    out = tmp_path / "est"
    args = _run_args(sim_dir, out, "estimate", "--scenario", str(sim_dir / "scenario_treated.json"),
                     "--lambda", "1.0", "--mc-draws", "10")
    assert main(args) == 0
    first = {name: (out / name).read_bytes() for name in ("manifest.json", "estimate.json", "per_node.csv")}
    assert main(args) == 0
    for name, content in first.items():
        assert (out / name).read_bytes() == content, name


def test_estimate_cv_honours_grid_size(tmp_path, sim_dir):
    est_out, cv_out = tmp_path / "est", tmp_path / "cv"
    code = main(_run_args(sim_dir, est_out, "estimate", "--scenario", str(sim_dir / "scenario_treated.json"),
                          "--lambda", "cv", "--cv-grid-size", "4", "--mc-draws", "10"))
    assert code == 0
    assert main(_run_args(sim_dir, cv_out, "cv", "--cv-grid-size", "4", "--mc-draws", "10")) == 0
    est_grid = pd.read_csv(est_out / "cv.csv")["lambda"].tolist()
    assert est_grid == pd.read_csv(cv_out / "cv.csv")["lambda"].tolist()
    assert 1 <= len(est_grid) <= 4


def test_save_models_rejects_wasserstein_nuisance(tmp_path, sim_dir):
    out = tmp_path / "est"
    code = main(_run_args(sim_dir, out, "estimate", "--scenario", str(sim_dir / "scenario_treated.json"),
                          "--lambda", "1.0", "--outcome-model", "kernel-wasserstein", "--save-models"))
    assert code == 2
    assert not (out / "estimate.json").exists()


def test_missing_inputs_exit_with_input_error(tmp_path, sim_dir):
    assert main(["--quiet", "estimate", "--out", str(tmp_path)]) == 2
    assert main(_run_args(sim_dir, tmp_path, "estimate")) == 2
    assert main(["--quiet", "cv", "--nodes", str(tmp_path / "x.csv"), "--edges", str(tmp_path / "y.csv"),
                 "--out", str(tmp_path)]) == 2


def test_invalid_config_file(tmp_path, sim_dir):
    config = tmp_path / "run.conf"
    config.write_text("# 运行配置\nmc-draws = 0\n", encoding="utf-8")
    code = main(_run_args(sim_dir, tmp_path / "out", "estimate", "--config", str(config),
                          "--scenario", str(sim_dir / "scenario_treated.json"), "--lambda", "1.0"))
    assert code == 2

    config.write_text("mc-draws 5\n", encoding="utf-8")
    assert main(_run_args(sim_dir, tmp_path / "out", "cv", "--config", str(config))) == 2


def test_invalid_simulation_config(tmp_path):
    assert main(["--quiet", "simulate", "--n", "0", "--out", str(tmp_path)]) == 2


def test_argument_errors_exit_two():
    with pytest.raises(SystemExit) as err:
        main(["reproduce", "A9"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["estimate", "--kernel", "gaussian"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2
