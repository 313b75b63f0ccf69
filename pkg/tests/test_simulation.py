import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

from keceni_analysis.analysis.scenarios import all_treated, balanced_de_pair, none_treated
from keceni_analysis.core.errors import KeceniInputError
from keceni_analysis.core.graph import build_graph
from keceni_analysis.core.models import SimConfig
from keceni_analysis.data.providers.ate_world import AteWorld
from keceni_analysis.data.providers.nodewise_world import NodewiseWorld
from keceni_analysis.data.simulation import (
    edge_probability,
    gen_ate_data,
    gen_latent_network,
    gen_nodewise_data,
    nested_subgraphs,
    select_target,
    simulate_replication,
    true_theta,
    write_simulation,
)


def test_edge_probability():
    assert edge_probability(0.0, 2.0, 10.0) == pytest.approx(2 * np.exp(-1))
    assert edge_probability(1.0, 2.0, 10.0) < 1e-100
    assert edge_probability(0.0, 4.0, 10.0) == 1.0
    d = np.linspace(0, 0.5, 11)
    assert np.all(np.diff(edge_probability(d, 2.0, 10.0)) <= 0)


def test_latent_network():
    g, z = gen_latent_network(300, seed=4)
    assert g.n == 300
    assert z.shape == (300, 2)
    assert np.abs(z).max() <= 1.0
    g2, z2 = gen_latent_network(300, seed=4)
    assert g == g2
    assert_array_equal(z, z2)
    with pytest.raises(KeceniInputError):
        gen_latent_network(0)


def test_select_target():
    assert select_target(np.array([[0.9, 0.9], [0.1, 0.2], [0.5, -0.8]])) == 1
    assert select_target(np.array([[0.3, -0.4]])) == 0
    assert select_target(np.array([[0.5, 0.1], [-0.2, 0.2], [0.2, -0.2]])) == 1
    with pytest.raises(KeceniInputError):
        select_target(np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# 数据生成的矩条件 (无边网络上 Avg 项为 0)
# ---------------------------------------------------------------------------

N_MOMENT = 4000


def test_nodewise_world_moments():
    cfg = SimConfig()
    ds = NodewiseWorld(cfg).generate(build_graph(N_MOMENT, []), seed=1)
    assert ds.x.shape == (N_MOMENT, 3)
    assert_allclose(ds.x.mean(axis=0), 0.0, atol=4 / np.sqrt(N_MOMENT))
    assert_allclose(ds.x.var(axis=0), 1.0, atol=0.1)
    # 系数关于 0 对称，处理比例为 0.5
    assert abs(ds.t.mean() - 0.5) < 4 * np.sqrt(0.25 / N_MOMENT)
    noise = ds.y - (cfg.beta_mu1 * (ds.t - 0.5) + ds.x @ np.asarray(cfg.beta_mu3))
    assert abs(noise.mean()) < 4 / np.sqrt(N_MOMENT)
    assert noise.var() == pytest.approx(1.0, abs=0.1)


def test_nodewise_world_zero_propensity_coefficients():
    cfg = SimConfig(beta_pi1=[0.0, 0.0, 0.0], beta_mu3=[0.0, 0.0, 0.0], beta_mu4=[0.0, 0.0, 0.0])
    ds = NodewiseWorld(cfg).generate(build_graph(N_MOMENT, []), seed=2)
    assert abs(ds.t.mean() - 0.5) < 4 * np.sqrt(0.25 / N_MOMENT)
    for arm in (0, 1):
        assert ds.y[ds.t == arm].var() == pytest.approx(1.0, abs=0.12)


def test_ate_world_moments():
    ds = AteWorld(SimConfig(experiment="ate")).generate(build_graph(N_MOMENT, []), seed=3)
    assert set(np.unique(ds.x)) <= {0.0, 1.0}
    assert set(np.unique(ds.y)) <= {0.0, 1.0}
    assert abs(ds.t.mean() - 0.5) < 4 * np.sqrt(0.25 / N_MOMENT)
    for arm, sign in ((1, 1.0), (0, -1.0)):
        p = expit(sign * 0.5)
        y = ds.y[ds.t == arm]
        assert abs(y.mean() - p) < 4 * np.sqrt(p * (1 - p) / len(y))


def test_generation_is_deterministic():
    cfg = SimConfig(n=200, seed=8)
    a = simulate_replication(cfg, 0)
    b = simulate_replication(cfg, 0)
    assert a["seed"] == b["seed"]
    assert a["dataset"].graph == b["dataset"].graph
    for field in ("y", "t", "x"):
        assert_array_equal(getattr(a["dataset"], field), getattr(b["dataset"], field))
    other = simulate_replication(cfg, 1)
    assert other["seed"] != a["seed"]
    assert not np.array_equal(other["dataset"].y, a["dataset"].y)


def test_generators_match_worlds():
    g, _ = gen_latent_network(120, seed=2)
    cfg = SimConfig(n=120)
    for gen, world in ((gen_nodewise_data, NodewiseWorld), (gen_ate_data, AteWorld)):
        a = gen(g, cfg, 9)
        b = world(cfg).generate(g, 9)
        for field in ("y", "t", "x"):
            assert_array_equal(getattr(a, field), getattr(b, field))


# ---------------------------------------------------------------------------
# 真值
# ---------------------------------------------------------------------------

def test_nodewise_truths():
    cfg = SimConfig()
    g = build_graph(4, [(0, 1), (1, 2)])
    assert true_theta(g, cfg, all_treated(g, 1)) == pytest.approx(2.0)
    assert true_theta(g, cfg, none_treated(g, 1)) == pytest.approx(-2.0)
    # 孤立节点只有直接效应
    assert true_theta(g, cfg, all_treated(g, 3)) == pytest.approx(1.0)
    assert true_theta(g, cfg, none_treated(g, 3)) == pytest.approx(-1.0)


def test_balanced_truths():
    cfg = SimConfig(experiment="dr")
    g = build_graph(5, [(0, k) for k in range(1, 5)])
    treated, control = balanced_de_pair(g, 0)
    assert true_theta(g, cfg, treated) == pytest.approx(1.0)
    assert true_theta(g, cfg, control) == pytest.approx(-1.0)


def test_ate_truths():
    cfg = SimConfig(experiment="ate")
    world = AteWorld(cfg)
    g = build_graph(4, [(0, 1), (1, 2)])
    assert world.true_theta(g, all_treated(g, 3)) == pytest.approx(expit(0.5))
    expected = 0.5 * (expit(0.5 - 1.75) + expit(0.5 + 1.75))
    assert world.true_theta(g, all_treated(g, 0)) == pytest.approx(expected)
    # Avg(w) 分布关于 0 对称，两个场景的真值之和为 1
    for target in range(4):
        total = world.true_theta(g, all_treated(g, target)) + world.true_theta(g, none_treated(g, target))
        assert total == pytest.approx(1.0)
    treated, control, ate = world.population_means(g)
    assert treated + control == pytest.approx(1.0)
    assert ate == pytest.approx(treated - control)


def test_replication_records():
    rec = simulate_replication(SimConfig(n=150, seed=5), 0)
    assert set(rec) == {"rep", "seed", "dataset", "z", "target", "scenarios", "truths"}
    assert rec["target"] == select_target(rec["z"])
    deg = rec["dataset"].graph.degree[rec["target"]]
    expected = 1.0 if deg == 0 else 2.0
    assert rec["truths"]["treated"] == pytest.approx(expected)
    assert rec["truths"]["control"] == pytest.approx(-expected)

    dr = simulate_replication(SimConfig(experiment="dr", n=150, seed=5), 0)
    assert dr["truths"]["treated"] - dr["truths"]["control"] == pytest.approx(2.0)

    ate = simulate_replication(SimConfig(experiment="ate", n=150, seed=5), 0)
    assert {"population_treated", "population_control", "population_ate"} <= set(ate["truths"])


def test_nested_subgraphs():
    nested = nested_subgraphs([50, 100, 200], seed=3, pre_n=200)
    assert sorted(nested) == [50, 100, 200]
    g200, z200 = nested[200]
    norms = np.abs(z200).max(axis=1)
    assert np.all(np.diff(norms) >= 0)
    for n in (50, 100):
        g, z = nested[n]
        assert g == g200.subgraph(range(n))[0]
        assert_array_equal(z, z200[:n])
        assert select_target(z) == 0
    with pytest.raises(KeceniInputError):
        nested_subgraphs([300], pre_n=200)


def test_write_simulation_is_byte_stable(tmp_path):
    cfg = SimConfig(n=80, seed=2, reps=2)
    outs = []
    for name in ("a", "b"):
        reps = [simulate_replication(cfg, r) for r in range(cfg.reps)]
        outs.append(write_simulation(tmp_path / name, cfg, reps))
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert "manifest.json" in {str(p) for p in files}
    assert any(p.name == "latent.csv" for p in files)
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()
