import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from camodepth.physaug import (
    AugmentedObject,
    EoTConfig,
    EoTDraw,
    PAConfig,
    apply_eot,
    apply_pa,
    composite,
    draw_pa,
    exposure_mask,
    fog_noise,
    physical_augment,
    rain_noise,
    warp,
)
from camodepth.renderproj import SceneBatch, project
from camodepth.scenegen import CameraPose, SceneGenConfig, generate_scene


def identity_draw(shape, **kw):
    base = dict(brightness=0.0, contrast=1.0, saturation=1.0, noise=np.zeros(shape + (3,)), angle_deg=0.0,
                scale=1.0, geometric=False)
    base.update(kw)
    return EoTDraw(**base)


# ---- exposure


def test_unit_strength_is_noop(rng):
    m = exposure_mask((32, 32), rng, PAConfig(), strength=1.0)
    assert np.array_equal(m, np.ones((32, 32)))


def test_exposure_range_containment():
    for k in range(20):
        m = exposure_mask((32, 40), np.random.default_rng(k), PAConfig(), strength=1.4)
        assert m.max() <= 1.4 + 1e-12 and m.min() >= 1.0 - 1e-12
        s = exposure_mask((32, 40), np.random.default_rng(k), PAConfig(), strength=0.6)
        assert s.min() >= 0.6 - 1e-12 and s.max() <= 1.0 + 1e-12


def test_exposure_border_slope_bounded_by_blurred_step():
    cfg = PAConfig(blur_sigma=3.0)
    m = exposure_mask((48, 48), np.random.default_rng(3), cfg, strength=1.4)
    # oracle: a hard step of the full strength smoothed by the same kernel
    step = np.zeros((48, 48))
    step[:, 24:] = 0.4
    bound = np.abs(np.diff(gaussian_filter(step, 3.0, mode="nearest"), axis=1)).max()
    slope = max(np.abs(np.diff(m, axis=0)).max(), np.abs(np.diff(m, axis=1)).max())
    assert slope <= bound + 1e-12


def test_exposure_positive():
    for k in range(10):
        assert exposure_mask((16, 16), np.random.default_rng(k), PAConfig()).min() > 0


# ---- rain


def test_zero_density_rain(rng):
    assert np.array_equal(rain_noise((20, 20), rng, PAConfig(rain_density=0)), np.zeros((20, 20, 3)))


def test_rain_streak_count_and_range():
    cfg = PAConfig(rain_density=2.0)
    H, W = 50, 40  # 2 * 2000 / 1000 = 4 streaks
    rng = np.random.default_rng(0)
    r = rain_noise((H, W), rng, cfg)
    assert r.min() >= 0 and r.max() <= 0.5
    # the generator consumed exactly 4 draws per parameter group
    probe = np.random.default_rng(0)
    for lo_hi in [(0, H), (0, W), cfg.rain_length, cfg.rain_angle, cfg.rain_intensity]:
        probe.uniform(*lo_hi, 4)
    assert rng.random() == probe.random()


def test_rain_composite_clamped(rng):
    b = _batch(weather="rainy")
    cfg = dataclasses.replace(PAConfig(), rain_intensity=(0.5, 0.5), rain_density=50.0)
    obj = torch.ones_like(b.background) * b.mask[..., None]
    out = physical_augment(obj, b, [rng], cfg)
    assert out.pixels.max() <= 1.0


# ---- fog


def test_fog_limits():
    cfg = PAConfig()
    img = torch.tensor([[[0.2, 0.4, 0.9]]], dtype=torch.float64)
    near = fog_noise(img, torch.tensor([[1e-12]], dtype=torch.float64), cfg)
    assert torch.allclose(near, img, atol=1e-12)
    far = fog_noise(img, torch.tensor([[1e6]], dtype=torch.float64), cfg)
    assert torch.allclose(far, torch.tensor([0.8, 0.8, 0.8], dtype=torch.float64), atol=1e-12)


def test_fog_closed_form():
    cfg = PAConfig(fog_beta=0.08)
    img = torch.tensor([[[0.1, 0.5, 1.0]]], dtype=torch.float64)
    out = fog_noise(img, torch.tensor([[12.5]], dtype=torch.float64), cfg)
    e = math.exp(-1.0)
    for c, i in enumerate((0.1, 0.5, 1.0)):
        assert float(out[0, 0, c]) == pytest.approx(i * e + 0.8 * (1 - e), abs=1e-15)


def test_fog_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        fog_noise(torch.zeros(1, 1, 3), torch.zeros(1, 1), PAConfig())


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 50), st.floats(0.01, 20))
def test_fog_monotone_in_depth(i, a, d, dd):
    if abs(i - a) < 1e-6:
        return
    cfg = PAConfig(fog_airlight=(a, a, a))
    img = torch.full((1, 1, 3), i, dtype=torch.float64)
    near = fog_noise(img, torch.tensor([[d]], dtype=torch.float64), cfg)
    far = fog_noise(img, torch.tensor([[d + dd]], dtype=torch.float64), cfg)
    assert float((far - a).abs()[0, 0, 0]) < float((near - a).abs()[0, 0, 0])


# ---- EoT


def test_identity_eot(rng):
    img = torch.as_tensor(rng.random((8, 8, 3)))
    mask = torch.ones(8, 8, dtype=torch.float64)
    out, m = apply_eot(img, mask, identity_draw((8, 8)))
    assert torch.equal(out, img) and torch.equal(m, mask)


def test_brightness_on_mid_gray():
    img = torch.full((4, 4, 3), 0.5, dtype=torch.float64)
    out, _ = apply_eot(img, torch.ones(4, 4, dtype=torch.float64), identity_draw((4, 4), brightness=0.2))
    assert torch.allclose(out, torch.full_like(img, 0.7), atol=1e-15)


def test_rotation_round_trip_iou():
    H = W = 64
    yy, xx = np.mgrid[0:H, 0:W]
    mask = torch.as_tensor(((yy - 30) ** 2 / 15**2 + (xx - 34) ** 2 / 20**2 <= 1).astype(np.float64))
    img = torch.zeros(H, W, 3, dtype=torch.float64)
    for angle in (5.0, 12.0, 20.0):
        _, m1 = warp(img, mask, angle, 1.0)
        _, m2 = warp(img, m1, -angle, 1.0)
        inter = float((m2 * mask).sum())
        union = float(((m2 + mask) > 0).sum())
        assert inter / union >= 0.98


def test_eot_draw_ranges():
    cfg = EoTConfig()
    from camodepth.physaug import draw_eot

    for k in range(50):
        d = draw_eot((4, 4), np.random.default_rng(k), cfg)
        assert -0.2 <= d.brightness <= 0.2 and 0.9 <= d.contrast <= 1.1
        assert 0.25 <= d.scale <= 1.25 and abs(d.angle_deg) <= 20
        assert np.abs(d.noise).max() <= 0.1


# ---- full augmentation and compositing


def _batch(weather="cloudy", H=24, W=24):
    s = generate_scene(SceneGenConfig(height=H, width=W), np.random.default_rng(5), pose=CameraPose(30.0, 4.0, 1.0))
    s = dataclasses.replace(s, weather=weather)
    return SceneBatch.from_samples([s], torch.float64)


def test_all_disabled_is_identity(rng):
    b = _batch()
    obj = torch.as_tensor(rng.random((1, 24, 24, 3))) * b.mask[..., None]
    out = physical_augment(obj, b, [rng], PAConfig.disabled())
    assert torch.equal(out.pixels, obj)


def test_constant_exposure_scales_then_clamps():
    b = _batch()
    obj = torch.full((1, 24, 24, 3), 0.7, dtype=torch.float64)
    cfg = PAConfig.disabled()
    draw = draw_pa(b, [np.random.default_rng(0)], cfg)
    draw.exposure = np.full((1, 24, 24), 1.2)
    out = apply_pa(obj, b, draw, cfg)
    assert torch.allclose(out.pixels, torch.full_like(obj, 0.84), atol=1e-15)
    obj2 = torch.full_like(obj, 0.9)
    assert torch.equal(apply_pa(obj2, b, draw, cfg).pixels, torch.ones_like(obj))


def test_weather_gating():
    cfg = PAConfig()
    for weather in ("cloudy", "sunny", "rainy", "foggy"):
        b = _batch(weather)
        d = draw_pa(b, [np.random.default_rng(1)], cfg)
        assert (d.rain.any()) == (weather == "rainy")
        assert bool(d.fog[0]) == (weather == "foggy")


def fuzz_config(rng):
    return PAConfig(
        exposure_strength=tuple(sorted(rng.uniform(0.2, 2.5, 2))),
        blur_sigma=float(rng.uniform(0, 4)),
        rain_density=float(rng.uniform(0, 20)),
        fog_beta=float(rng.uniform(0, 0.5)),
        fog_airlight=tuple(rng.uniform(0, 1, 3)),
        eot=EoTConfig(brightness=float(rng.uniform(0, 0.5)), noise=float(rng.uniform(0, 0.3)),
                      geometric=bool(rng.random() < 0.5)),
        weather_gating=bool(rng.random() < 0.5),
    )


def test_output_in_unit_cube_fuzz():
    rng = np.random.default_rng(77)
    b = _batch(H=16, W=16)
    for k in range(1000):
        cfg = fuzz_config(rng)
        obj = torch.as_tensor(rng.uniform(-0.2, 1.2, (1, 16, 16, 3)))
        out = physical_augment(obj, b, [np.random.default_rng(k)], cfg)
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1


def test_composite_examples(rng):
    bg = torch.as_tensor(rng.random((2, 5, 6, 3)))
    obj = torch.as_tensor(rng.random((2, 5, 6, 3)))
    zero = AugmentedObject(obj, torch.zeros(2, 5, 6, dtype=torch.float64))
    one = AugmentedObject(obj, torch.ones(2, 5, 6, dtype=torch.float64))
    assert torch.equal(composite(bg, zero), bg)
    assert torch.equal(composite(bg, one), obj)
    m = torch.as_tensor(rng.random((2, 5, 6)) < 0.5).to(torch.float64)
    out = composite(bg, AugmentedObject(obj, m))
    for b in range(2):
        for i in range(5):
            for j in range(6):
                ref = obj[b, i, j] if m[b, i, j] else bg[b, i, j]
                assert torch.equal(out[b, i, j], ref)
    with pytest.raises(ValueError):
        composite(bg[:, :4], one)


def test_gradient_flow_only_under_mask():
    b = _batch(H=16, W=16)
    seed = torch.rand(12, 12, 3, dtype=torch.float64, requires_grad=True)
    cfg = dataclasses.replace(PAConfig(), eot=EoTConfig(noise=0.0))
    aug = physical_augment(project(seed, b), b, [np.random.default_rng(2)], cfg)
    x = composite(b.background, aug)
    outside = ~(aug.mask[0].bool())
    g_out = torch.autograd.grad(x[0][outside].sum(), seed, retain_graph=True, allow_unused=True)[0]
    assert g_out is None or torch.all(g_out == 0)
    g_in = torch.autograd.grad(x[0][~outside].sum(), seed)[0]
    assert g_in.abs().sum() > 0
