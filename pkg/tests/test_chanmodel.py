import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eemax import chanmodel as cm


def test_unit_conversions():
    assert cm.dbm_to_watt(30.0) == pytest.approx(1.0)
    assert cm.dbm_to_watt(0.0) == pytest.approx(1e-3)
    assert cm.dbw_to_watt(-30.0) == pytest.approx(cm.dbm_to_watt(0.0))
    assert cm.db_to_linear(3.0) == pytest.approx(1.9952623, rel=1e-7)


def test_noise_power_formula():
    c = cm.ScenarioConfig()
    expected = 10 ** 0.3 * 10 ** (-174 / 10) * 1e-3 * 180e3
    assert c.noise_power == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("kw", [dict(num_users=0), dict(num_bs=0), dict(bs_antennas=0), dict(p_max=0.0),
                                dict(bandwidth=-1.0), dict(static_power=0.0), dict(amp_inefficiency=0.0)])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        cm.ScenarioConfig(**kw)


def test_config_rejects_bs_outside_area():
    pos = ((0.5, 0.5), (0.5, 1.5), (1.5, 1.5), (2.5, 0.5))
    with pytest.raises(ValueError):
        cm.ScenarioConfig(bs_positions=pos)
    with pytest.raises(ValueError):
        cm.ScenarioConfig(num_bs=3)


def test_default_layout_has_four_distinct_bs():
    assert len(set(cm.DEFAULT_BS_POSITIONS)) == 4


def test_config_dict_roundtrip():
    c = cm.ScenarioConfig(num_users=3, p_max=0.5)
    assert cm.ScenarioConfig.from_dict(c.to_dict()) == c


def test_channel_matrix_validation():
    with pytest.raises(ValueError):
        cm.ChannelMatrix(np.ones((2, 3)))
    with pytest.raises(ValueError):
        cm.ChannelMatrix(np.array([[1.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        cm.ChannelMatrix(np.array([[1.0, np.inf], [1.0, 1.0]]))


def test_draw_scenario_seven_users():
    c = cm.ScenarioConfig(num_users=7, num_bs=4, bs_antennas=2)
    g = cm.draw_scenario(c, np.random.default_rng(0))
    assert g.gains.shape == (7, 7)
    assert np.all(g.gains > 0) and np.all(np.isfinite(g.gains))


def test_draw_scenario_single_user_single_bs():
    c = cm.ScenarioConfig(num_users=1, num_bs=1, bs_positions=((1.0, 1.0),))
    g = cm.draw_scenario(c, np.random.default_rng(0))
    assert g.gains.shape == (1, 1) and g.gains[0, 0] > 0


def test_draw_scenario_deterministic():
    c = cm.ScenarioConfig(num_users=4)
    a = cm.draw_scenario(c, np.random.default_rng(42)).gains
    b = cm.draw_scenario(c, np.random.default_rng(42)).gains
    assert a.tobytes() == b.tobytes()


def test_matched_filter_examples():
    assert cm.matched_filter_gain([1, 0], [1, 0]) == 1.0
    assert cm.matched_filter_gain([1, 0], [0, 1]) == 0.0
    assert cm.matched_filter_gain([1, 1], [1, 0]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        cm.matched_filter_gain([0, 0], [1, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matched_filter_bounded_by_cauchy_schwarz(seed):
    r = np.random.default_rng(seed)
    hs = r.normal(size=3) + 1j * r.normal(size=3)
    hx = r.normal(size=3) + 1j * r.normal(size=3)
    g = cm.matched_filter_gain(hs, hx)
    assert 0 <= g <= np.linalg.norm(hx) ** 2 * (1 + 1e-12)
    assert cm.matched_filter_gain(hs, hs) == pytest.approx(np.linalg.norm(hs) ** 2, rel=1e-12)


def test_path_loss_monotone_and_clamped():
    c = cm.ScenarioConfig()
    d = np.array([0.001, c.min_distance_km, 0.1, 1.0])
    pl = cm.path_loss_db(d, c)
    assert pl[0] == pl[1]
    assert np.all(np.diff(pl[1:]) > 0)
    # one decade of distance costs 10 * decay factor dB
    assert cm.path_loss_db(1.0, c) - cm.path_loss_db(0.1, c) == pytest.approx(45.0)


def test_noise_normalization():
    c = cm.ScenarioConfig(num_users=3)
    norm = cm.generate_dataset(c, 5, seed=3).gains()
    raw = cm.generate_dataset(c, 5, seed=3, normalize=False).gains()
    np.testing.assert_allclose(norm, raw / c.noise_power, rtol=1e-12)


def test_dataset_determinism_and_seed_sensitivity():
    c = cm.ScenarioConfig(num_users=3)
    assert cm.generate_dataset(c, 4, seed=1) == cm.generate_dataset(c, 4, seed=1)
    assert cm.generate_dataset(c, 4, seed=1) != cm.generate_dataset(c, 4, seed=2)


def test_assignment_is_strongest_bs():
    c = cm.ScenarioConfig(num_users=5)
    rng = np.random.default_rng(7)
    state = rng.bit_generator.state
    g = cm.draw_scenario(c, rng)
    # replay the same draws to recover the raw channel vectors
    rng2 = np.random.default_rng()
    rng2.bit_generator.state = state
    (x0, y0), (x1, y1) = c.area
    users = rng2.uniform([x0, y0], [x1, y1], size=(5, 2))
    bs = np.asarray(c.bs_positions)
    dist = np.linalg.norm(bs[:, None] - users[None], axis=-1)
    amp = np.sqrt(10 ** (-cm.path_loss_db(dist, c) / 10))
    fad = rng2.standard_normal((4, 5, 2)) * np.exp(1j * rng2.uniform(0, 2 * np.pi, (4, 5, 2)))
    h = amp[:, :, None] * fad
    power = np.sum(np.abs(h) ** 2, axis=-1)
    for i, m in enumerate(g.assignment):
        assert power[m, i] == power[:, i].max()
        assert g.gains[i, i] == pytest.approx(power[m, i] / c.noise_power, rel=1e-12)


def test_save_load_roundtrip(tmp_path):
    ds = cm.generate_dataset(cm.ScenarioConfig(num_users=4), 10, split="test", seed=5)
    p = tmp_path / "d.bin"
    cm.save_dataset(ds, p)
    back = cm.load_dataset(p)
    assert back == ds
    assert back.gains().tobytes() == ds.gains().tobytes()
    assert [s.assignment for s in back.samples] == [s.assignment for s in ds.samples]


def test_load_without_sidecar(tmp_path):
    ds = cm.generate_dataset(cm.ScenarioConfig(num_users=2), 3, seed=5)
    p = tmp_path / "d.bin"
    cm.save_dataset(ds, p)
    cm.sidecar(p).unlink()
    back = cm.load_dataset(p)
    assert np.array_equal(back.gains(), ds.gains())


def test_load_truncated_file(tmp_path):
    ds = cm.generate_dataset(cm.ScenarioConfig(num_users=3), 4, seed=0)
    p = tmp_path / "d.bin"
    cm.save_dataset(ds, p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(cm.DatasetFormatError, match="dimension mismatch"):
        cm.load_dataset(p)


def test_load_bad_header(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"garbage\n1234")
    with pytest.raises(cm.DatasetFormatError):
        cm.load_dataset(p)
    p.write_bytes(b"no newline at all")
    with pytest.raises(cm.DatasetFormatError):
        cm.load_dataset(p)


def test_same_seed_same_file_hash(tmp_path):
    c = cm.ScenarioConfig(num_users=3)
    for name in ("a", "b"):
        cm.save_dataset(cm.generate_dataset(c, 6, seed=9), tmp_path / name)
    h = [hashlib.sha256((tmp_path / n).read_bytes()).hexdigest() for n in ("a", "b")]
    assert h[0] == h[1]


def test_dataset_rejects_mixed_sizes():
    c = cm.ScenarioConfig(num_users=3)
    with pytest.raises(ValueError):
        cm.Dataset(c, (cm.ChannelMatrix(np.ones((2, 2))),))


def test_empty_dataset_gains_shape():
    ds = cm.generate_dataset(cm.ScenarioConfig(num_users=3), 0)
    assert ds.gains().shape == (0, 3, 3)


@pytest.mark.slow
def test_full_scale_generation():
    c = cm.ScenarioConfig(num_users=7)
    tr = cm.generate_dataset(c, 6000, seed=0)
    te = cm.generate_dataset(c, 1000, split="test", seed=1)
    assert len(tr) == 6000 and len(te) == 1000
