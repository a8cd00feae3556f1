import numpy as np
import pytest

from pilot import terrain as tr


def test_flat_is_zero_everywhere():
    t = tr.generate("flat", 0.5, 123)
    xs = np.linspace(tr.ARENA_X_MIN, tr.ARENA_X_MAX, 257)
    assert np.all(t.height_at(xs) == 0.0)
    assert t.height_at(3.2) == 0.0


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        tr.generate("lava", 0.5, 1)
    with pytest.raises(ValueError):
        tr.Terrain(kind="lava")


def test_difficulty_out_of_range_rejected():
    with pytest.raises(ValueError):
        tr.generate("rough", 1.5, 1)


def test_stairs_step_height_endpoints():
    t = tr.generate("stairs_up", 1.0, 42)
    assert t.step_height_m == pytest.approx(0.17)
    t0 = tr.generate("stairs_up", 0.0, 42)
    assert t0.step_height_m == pytest.approx(0.05)
    assert tr.STEP_RUN_RANGE[0] <= t.step_run_m <= tr.STEP_RUN_RANGE[1]


def test_stairs_monotone_in_difficulty():
    heights = [tr.generate("stairs_up", d, 7).step_height_m for d in np.linspace(0, 1, 11)]
    assert np.all(np.diff(heights) >= 0)


def test_generate_deterministic():
    a = tr.generate("rough", 0.5, 7)
    b = tr.generate("rough", 0.5, 7)
    xs = np.linspace(-2, 12, 1001)
    np.testing.assert_array_equal(a.height_at(xs), b.height_at(xs))
    assert a == b


def test_stairs_up_tread_heights():
    t = tr.Terrain(kind="stairs_up", step_height_m=0.1, step_run_m=0.3)
    assert t.height_at(0.35) == pytest.approx(0.1)
    assert t.height_at(0.05) == pytest.approx(0.0)
    assert t.height_at(0.65) == pytest.approx(0.2)


def test_slope_linear_ramp():
    t = tr.Terrain(kind="slope", slope_grade=0.2)
    assert t.height_at(1.0) == pytest.approx(0.2)


def test_heights_finite_over_arena():
    for kind in tr.KINDS:
        for d in (0.0, 0.5, 1.0):
            t = tr.generate(kind, d, 3)
            xs = np.linspace(tr.ARENA_X_MIN, tr.ARENA_X_MAX, 2048)
            assert np.all(np.isfinite(t.height_at(xs))), (kind, d)


def test_platform_invariants():
    for d in (0.0, 0.5, 1.0):
        t = tr.generate("platform", d, 11)
        assert t.platform_height_m <= 0.3
        assert t.platform_width_m >= 0.4


def test_generated_lead_in_flat():
    for kind in tr.KINDS:
        t = tr.generate(kind, 1.0, 5)
        xs = np.linspace(tr.ARENA_X_MIN, tr.FEATURE_START_X - 1e-6, 101)
        h = t.height_at(xs)
        # stairs_down leads in on its top plateau; everything else at 0
        assert np.ptp(h) == pytest.approx(0.0), kind


def test_scan_flat_constant():
    t = tr.generate("flat", 0.0, 0)
    s = tr.scan(t, base_x=4.0, base_z=0.76)
    assert s.values.shape == (11,)
    np.testing.assert_allclose(s.values, 0.76)
    assert s.origin == pytest.approx(3.5)


def test_scan_step_riser():
    # base 0.05 m before a 0.1 m riser: samples past the riser read 0.66
    t = tr.Terrain(kind="stairs_up", step_height_m=0.1, step_run_m=10.0, x_start=-9.95)
    s = tr.scan(t, base_x=0.0, base_z=0.76)
    np.testing.assert_allclose(s.values[:6], 0.76)
    np.testing.assert_allclose(s.values[6:], 0.66)


def test_scan_clipping():
    t = tr.generate("flat", 0.0, 0)
    s = tr.scan(t, base_x=0.0, base_z=2.0)
    np.testing.assert_allclose(s.values, 1.0)


def test_scan_locality():
    # changing terrain outside +-0.5 m of the base never changes the scan
    near = tr.Terrain(kind="stairs_up", step_height_m=0.1, step_run_m=0.3, x_start=5.0)
    far = tr.Terrain(kind="stairs_up", step_height_m=0.17, step_run_m=0.3, x_start=5.0)
    s_near = tr.scan(near, base_x=3.0, base_z=0.7)
    s_far = tr.scan(far, base_x=3.0, base_z=0.7)
    np.testing.assert_array_equal(s_near.values, s_far.values)


def test_batch_matches_single():
    ts = [tr.generate(k, d, s) for k, d, s in
          (("flat", 0.0, 1), ("rough", 0.7, 2), ("slope", 0.4, 3),
           ("stairs_up", 0.9, 4), ("stairs_down", 0.6, 5), ("platform", 1.0, 6))]
    batch = tr.TerrainBatch(ts)
    xs = np.linspace(-2, 12, 41)
    q = np.tile(xs, (len(ts), 1))
    got = batch.height(q)
    for i, t in enumerate(ts):
        np.testing.assert_array_equal(got[i], t.height_at(xs))


def test_batch_scans_match_single():
    ts = [tr.generate("stairs_up", 0.8, 9), tr.generate("rough", 0.5, 10)]
    batch = tr.TerrainBatch(ts)
    bx = np.array([2.0, 3.5])
    bz = np.array([0.9, 0.7])
    got = batch.scans(bx, bz)
    for i, t in enumerate(ts):
        np.testing.assert_array_equal(got[i], tr.scan(t, bx[i], bz[i]).values)


def test_from_config_roundtrip():
    t = tr.from_config({"kind": "stairs_up", "difficulty": 0.5, "seed": 3,
                        "step_height_m": 0.12})
    assert t.step_height_m == 0.12
    assert t.x_start == tr.FEATURE_START_X
