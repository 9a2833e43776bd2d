import warnings
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from camodepth.gradcheck import check_gradient
from camodepth.losses import (
    DegenerateSampleWarning,
    LossWeights,
    NonFiniteLossError,
    make_palette,
    nps_loss,
    smooth_loss,
    total_loss,
    vanish_loss,
)

f64 = torch.float64


def gray(values):
    a = torch.tensor(values, dtype=f64)
    return a[..., None].expand(*a.shape, 3).contiguous()


def test_vanish_worked_example():
    depth = torch.full((2, 2), 2.0, dtype=f64)
    mask = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=f64)
    assert float(vanish_loss(depth, mask)) == 0.125


def test_vanish_limit_and_monotone():
    mask = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=f64)
    vals = [float(vanish_loss(torch.full((2, 2), d, dtype=f64), mask)) for d in (1.0, 2.0, 10.0, 1e3, 1e9)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-18


def test_vanish_empty_mask_warns():
    with pytest.warns(DegenerateSampleWarning):
        out = vanish_loss(torch.full((3, 3), 2.0, dtype=f64), torch.zeros(3, 3, dtype=f64))
    assert float(out) == 0.0


def test_vanish_mask_normalization():
    depth = torch.full((2, 2), 2.0, dtype=f64)
    mask = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=f64)
    assert float(vanish_loss(depth, mask, "mask")) == 0.25


def test_smooth_worked_example():
    assert float(smooth_loss(gray([[0.0, 1.0], [0.0, 1.0]]))) == 6.0  # 2 per channel
    assert float(smooth_loss(torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=f64)[..., None])) == 2.0


def test_smooth_constant_is_zero():
    assert float(smooth_loss(torch.full((5, 5, 3), 0.3, dtype=f64))) == 0.0


def test_smooth_contrast_doubling_increases():
    rng = np.random.default_rng(0)
    s = torch.as_tensor(rng.uniform(0.3, 0.7, (6, 6, 3)))
    assert float(smooth_loss((2 * s - 0.5).clamp(0, 1))) > float(smooth_loss(s))


def test_nps_worked_example():
    seed = gray([[0.5, 0.5], [0.5, 0.7]])
    palette = torch.tensor([[0.5, 0.5, 0.5]], dtype=f64)
    # one gray channel: the single off-palette texel sits 0.2 away, over 4 texels
    got = float(nps_loss(seed[..., :1], palette[:, :1]))
    assert got == float((Fraction(0.7) - Fraction(0.5)) / 4)  # exact for the stored float inputs
    assert got == pytest.approx(0.05, abs=1e-16)
    # three channels scale the distance by sqrt(3)
    assert float(nps_loss(seed, palette)) == pytest.approx(0.05 * 3**0.5, abs=1e-15)


def test_nps_in_palette_is_zero(rng):
    palette = make_palette(rng)
    idx = rng.integers(0, len(palette), (4, 4))
    seed = torch.as_tensor(palette[idx])
    assert float(nps_loss(seed, torch.as_tensor(palette))) == 0.0


@given(st.integers(0, 10_000))
def test_nps_superset_never_increases(k):
    rng = np.random.default_rng(k)
    seed = torch.as_tensor(rng.random((4, 4, 3)))
    pal = torch.as_tensor(rng.random((3, 3)))
    bigger = torch.cat([pal, torch.as_tensor(rng.random((1, 3)))])
    assert float(nps_loss(seed, bigger)) <= float(nps_loss(seed, pal))


def test_total_examples():
    w = LossWeights()
    assert (w.alpha, w.beta) == (0.1, 5.0)
    assert float(total_loss(torch.tensor(0.125), torch.tensor(2.0), torch.tensor(0.05), LossWeights(0, 0))) == 0.125
    out = total_loss(torch.tensor(0.125, dtype=f64), torch.tensor(2.0, dtype=f64), torch.tensor(0.05, dtype=f64), w)
    assert float(out) == pytest.approx(0.575, abs=1e-15)


def test_total_rejects_non_finite():
    with pytest.raises(NonFiniteLossError):
        total_loss(torch.tensor(float("nan")), torch.tensor(0.0), torch.tensor(0.0), LossWeights())
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)


@given(st.integers(0, 10_000))
def test_losses_nonnegative(k):
    rng = np.random.default_rng(k)
    seed = torch.as_tensor(rng.random((4, 4, 3)))
    depth = torch.as_tensor(rng.uniform(1, 40, (8, 8)))
    mask = torch.as_tensor(rng.random((8, 8)) < 0.4).to(f64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSampleWarning)
        assert float(vanish_loss(depth, mask)) >= 0
    assert float(smooth_loss(seed)) > 0
    assert float(nps_loss(seed, torch.as_tensor(make_palette(rng)))) > 0


def test_palette_properties(rng):
    p = make_palette(rng)
    assert p.shape == (10, 3)
    assert len({tuple(c) for c in p}) == 10
    assert p.min() >= 0.1 and p.max() <= 0.9


# ---- gradients (float64, away from ties and zero differences)


def _fd(fn, x0, tol=1e-3):
    t = torch.as_tensor(x0).requires_grad_(True)
    fn(t).backward()
    return check_gradient(lambda a: float(fn(torch.as_tensor(a))), x0, t.grad.numpy(), tolerance=tol, h=1e-6)


def test_vanish_gradient_fd():
    rng = np.random.default_rng(0)
    mask = torch.as_tensor(rng.random((8, 8)) < 0.5).to(f64)
    rep = _fd(lambda d: vanish_loss(d, mask), rng.uniform(1, 20, (8, 8)))
    assert rep.passed, rep


def test_smooth_gradient_fd():
    rep = _fd(smooth_loss, np.random.default_rng(1).random((4, 4, 3)))
    assert rep.passed, rep


def test_nps_gradient_fd():
    rng = np.random.default_rng(2)
    pal = torch.as_tensor(make_palette(rng))
    rep = _fd(lambda s: nps_loss(s, pal), rng.random((4, 4, 3)))
    assert rep.passed, rep


def test_smooth_gradient_finite_on_constant():
    s = torch.full((4, 4, 3), 0.5, dtype=f64, requires_grad=True)
    smooth_loss(s).backward()
    assert torch.isfinite(s.grad).all()
