import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from camodepth.evalmetrics import (
    Baseline,
    MetricsRecord,
    MetricsReport,
    UndefinedMetricError,
    affected_ratio,
    breakdown,
    depth_error,
    evaluate,
)
from camodepth.gradcheck import brute_force_metrics
from camodepth.physaug import PAConfig
from camodepth.texconv import TCConfig


def test_constant_delta():
    m = np.ones((3, 3))
    assert depth_error(np.full((3, 3), 9.0), np.full((3, 3), 4.0), m) == 5.0


def test_identity_zero():
    d = np.random.default_rng(0).uniform(1, 40, (4, 4))
    assert depth_error(d, d, np.ones((4, 4))) == 0.0
    assert affected_ratio(d, d, np.ones((4, 4))) == 0.0


def test_two_pixel_example():
    d_ben = np.array([[10.0, 10.0]])
    d_adv = np.array([[22.0, 18.0]])
    m = np.ones((1, 2))
    assert depth_error(d_adv, d_ben, m) == 10.0
    assert affected_ratio(d_adv, d_ben, m, 10.0) == 0.5


def test_inclusive_threshold():
    d_ben = np.full((2, 3), 5.0)
    assert affected_ratio(d_ben + 10.0, d_ben, np.ones((2, 3)), 10.0) == 1.0


def test_empty_mask_undefined():
    with pytest.raises(UndefinedMetricError):
        depth_error(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(UndefinedMetricError):
        affected_ratio(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))


def test_fuzz_against_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        d_ben = rng.uniform(1, 40, (16, 16))
        d_adv = d_ben + rng.choice([-10.0, 10.0, 0.0], (16, 16)) * (rng.random((16, 16)) < 0.3) + rng.normal(0, 6, (16, 16))
        mask = rng.random((16, 16)) < rng.uniform(0.05, 1)
        if not mask.any():
            continue
        e, r = brute_force_metrics(d_adv, d_ben, mask)
        assert depth_error(d_adv, d_ben, mask) == e
        assert affected_ratio(d_adv, d_ben, mask) == r


@given(st.integers(0, 10_000), st.floats(0, 30), st.floats(0, 30))
def test_ratio_monotone_in_threshold(k, t1, t2):
    rng = np.random.default_rng(k)
    d_ben = rng.uniform(1, 40, (6, 6))
    d_adv = rng.uniform(1, 40, (6, 6))
    m = np.ones((6, 6))
    lo, hi = sorted((t1, t2))
    assert affected_ratio(d_adv, d_ben, m, hi) <= affected_ratio(d_adv, d_ben, m, lo)


def _report(rng, n=40, single_sector=False):
    recs = []
    weathers = ("cloudy", "sunny", "rainy", "foggy")
    for i in range(n):
        az = 40.0 if single_sector else float(rng.uniform(0, 360))
        recs.append(MetricsRecord(i, float(rng.uniform(0, 20)), float(rng.random()), weathers[rng.integers(4)], az,
                                  float(rng.uniform(3, 15))))
    return MetricsReport("x", recs)


@pytest.mark.parametrize("axis", ["weather", "azimuth", "distance"])
def test_breakdown_partitions_and_matches_filter(axis):
    rng = np.random.default_rng(1)
    rep = _report(rng)
    rows = breakdown(rep, axis)
    assert sum(r.count for r in rows) == len(rep.records)
    key = {"weather": lambda r: r.weather, "azimuth": lambda r: r.azimuth_sector,
           "distance": lambda r: r.distance_band}[axis]
    keys = sorted({key(r) for r in rep.records}, key=str)
    for k in keys:
        members = [r for r in rep.records if key(r) == k]
        mean = sum(r.e_d for r in members) / len(members)
        assert any(row.count == len(members) and row.mean_e_d == pytest.approx(mean, abs=0) or
                   row.count == len(members) and abs(row.mean_e_d - mean) < 1e-12 for row in rows)
    for row in rows:
        if row.count == 0:
            assert row.mean_e_d is None and row.mean_r_a is None


def test_single_sector_equals_overall():
    rep = _report(np.random.default_rng(3), single_sector=True)
    rows = [r for r in breakdown(rep, "azimuth") if r.count]
    assert len(rows) == 1
    assert rows[0].mean_e_d == pytest.approx(rep.mean_e_d, abs=1e-12)
    assert rows[0].mean_r_a == pytest.approx(rep.mean_r_a, abs=1e-12)


def test_sector_and_band_edges():
    from camodepth.evalmetrics import azimuth_sector, distance_band

    assert azimuth_sector(0.0) == 0 and azimuth_sector(29.999) == 0 and azimuth_sector(30.0) == 1
    assert azimuth_sector(359.9) == 11
    assert distance_band(3.0) == 0 and distance_band(6.0) == 1 and distance_band(15.0) == 3


class ToyDepth(torch.nn.Module):
    """Depth that responds to image brightness; enough to exercise paired evaluation."""

    differentiable = True

    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(30.0))

    def forward(self, x):
        return 2.0 + self.w * x.mean(-1)


def test_normal_baseline_is_exactly_zero(small_scenes):
    rep = evaluate(ToyDepth(), small_scenes, Baseline("normal"), TCConfig(tau=3, size=12), PAConfig(), seed=1,
                   seed_size=4)
    assert rep.records and all(r.e_d == 0.0 and r.r_a == 0.0 for r in rep.records)


def test_random_beats_normal_on_toy_model(small_scenes):
    tc = TCConfig(tau=3, size=12)
    rnd = evaluate(ToyDepth(), small_scenes, Baseline("random"), tc, PAConfig(), seed=1, seed_size=4)
    nor = evaluate(ToyDepth(), small_scenes, Baseline("normal"), tc, PAConfig(), seed=1, seed_size=4)
    assert rnd.mean_e_d > nor.mean_e_d


def test_report_aggregates_match_records():
    rep = _report(np.random.default_rng(9))
    assert rep.mean_e_d == pytest.approx(np.mean([r.e_d for r in rep.records]), abs=1e-12)
    lines = rep.to_csv().strip().splitlines()
    assert len(lines) == len(rep.records) + 1
