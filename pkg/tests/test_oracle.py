import numpy as np
import pytest
from scipy import optimize

from eemax import chanmodel as cm
from eemax import objective as obj
from eemax import oracle

from conftest import random_gains


def test_config_validation():
    with pytest.raises(ValueError):
        oracle.OracleConfig(grid_points=1)
    with pytest.raises(ValueError):
        oracle.OracleConfig(starts=0)
    with pytest.raises(ValueError):
        oracle.OracleConfig(local="newton")
    assert oracle.default_grid_points(3) == 41 and oracle.default_grid_points(4) == 21


def test_single_user_matches_scalar_search():
    for g in (0.5, 3.0, 40.0, 1e3):
        G = np.array([[g]])
        p_max = 2.0
        k = 41
        res = oracle.grid_search(G, p_max, k)
        gs = optimize.minimize_scalar(lambda p: -np.log1p(g * p) / (4 * p + 1), bounds=(0.0, p_max),
                                      method="bounded", options={"xatol": 1e-12})
        p_star = float(np.clip(gs.x, 0.0, p_max))
        assert abs(res.p[0] - p_star) <= p_max / (k - 1)


def test_two_point_grid_enumerates_corners(rng):
    G = random_gains(rng, 2)
    cfg = oracle.OracleConfig(refine_top=0)
    res = oracle.grid_search(G, 1.0, k=2, cfg=cfg)
    assert res.evaluations == 4
    corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    best = corners[np.argmax(obj.sum_ee(G, corners))]
    assert np.array_equal(res.p, best)


def test_grid_refuses_large_instances(rng):
    with pytest.raises(oracle.OracleError, match="multistart"):
        oracle.grid_search(random_gains(rng, 5), 1.0)
    with pytest.raises(oracle.OracleError):
        oracle.solve_all(random_gains(rng, 7, 2), 1.0, mode="grid")


def test_low_power_maximizer_is_full_power():
    c = cm.ScenarioConfig(num_users=3, p_max=1e-5)
    ds = cm.generate_dataset(c, 20, seed=4)
    for G in ds.gains():
        assert np.array_equal(oracle.grid_search(G, 1e-5).p, np.full(3, 1e-5))
        r = oracle.multistart(G, 1e-5, starts=1, cfg=oracle.OracleConfig(), corners=False,
                              rng=np.random.default_rng(0))
        np.testing.assert_allclose(r.p, 1e-5, rtol=0, atol=1e-15)


def test_single_start_from_full_power_stays_there():
    G = cm.generate_dataset(cm.ScenarioConfig(num_users=4, p_max=1e-5), 1, seed=0).gains()[0]
    p, _ = oracle.projected_ascent(G, np.full((1, 4), 1e-5), 1e-5)
    assert np.array_equal(p[0], np.full(4, 1e-5))


def test_multistart_agrees_with_grid():
    c = cm.ScenarioConfig(num_users=2, p_max=1.0)
    ds = cm.generate_dataset(c, 500, seed=11)
    ok = 0
    for n, G in enumerate(ds.gains()):
        g = oracle.grid_search(G, 1.0)
        m = oracle.multistart(G, 1.0, starts=16, rng=np.random.default_rng(n))
        ok += obj.sum_ee(G, m.p) >= obj.sum_ee(G, g.p) - 1e-6
    assert ok / 500 >= 0.99


def test_pga_local_search_also_agrees(rng):
    cfg = oracle.OracleConfig(local="pga")
    for _ in range(5):
        G = random_gains(rng, 2)
        a = oracle.grid_search(G, 1.0, cfg=cfg)
        b = oracle.grid_search(G, 1.0)
        assert obj.sum_ee(G, a.p) == pytest.approx(obj.sum_ee(G, b.p), abs=1e-6)


def test_multistart_deterministic(rng):
    G = random_gains(rng, 5)
    a = oracle.multistart(G, 1.0, rng=np.random.default_rng(3))
    b = oracle.multistart(G, 1.0, rng=np.random.default_rng(3))
    assert np.array_equal(a.p, b.p) and a.ee == b.ee


def test_result_invariants(rng):
    for I in (1, 2, 3, 5):
        G = random_gains(rng, I)
        r = oracle.solve(G, 0.7)
        assert np.all((r.p >= 0) & (r.p <= 0.7))
        assert r.ee >= obj.report_ee(G, np.zeros(I)) - 1e-12
        assert r.ee >= obj.report_ee(G, np.full(I, 0.7)) - 1e-12
        assert r.mode == ("grid" if I <= 4 else "multistart")


def test_refinement_is_monotone_in_grid_points(rng):
    for _ in range(5):
        G = random_gains(rng, 2)
        prev = -np.inf
        for k in (3, 5, 9, 17, 33):
            v = oracle.grid_search(G, 1.0, k).ee
            assert v >= prev - 1e-12
            prev = max(prev, v)


def test_projected_ascent_never_decreases(rng):
    G = random_gains(rng, 3)
    x0 = rng.uniform(0, 1, (8, 3))
    p, v = oracle.projected_ascent(G, x0, 1.0)
    assert np.all(v >= obj.sum_ee(G, x0) - 1e-15)
    assert np.all((p >= 0) & (p <= 1))


def test_tie_break_prefers_lexicographically_smallest():
    p = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    assert oracle._pick(p, np.array([2.0, 2.0, 1.0])) == 1


def test_solve_all_deterministic(rng):
    gains = random_gains(rng, 5, 4)
    first = oracle.solve_all(gains, 1.0, seed=1)
    again = oracle.solve_all(gains, 1.0, seed=1)
    assert len(first) == 4 and all(r.mode == "multistart" for r in first)
    assert all(np.array_equal(a.p, b.p) for a, b in zip(first, again))


def test_results_csv_roundtrip(tmp_path, rng):
    ee = rng.uniform(1, 2, 4)
    p = rng.uniform(0, 1, (4, 3))
    path = tmp_path / "r.csv"
    oracle.write_results_csv(path, ee, p)
    header = path.read_text().splitlines()[0]
    assert header == "sample_index,ee_oracle,p_oracle_0,p_oracle_1,p_oracle_2"
    e2, p2 = oracle.read_results_csv(path)
    assert np.array_equal(e2, ee) and np.array_equal(p2, p)
    oracle.write_results_csv(path, ee, p, ee * 0.9, p * 0.5)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:4] == ["sample_index", "ee_oracle", "ee_net", "ratio"]
    assert header[-1] == "p_net_2"
