"""Attack objective: vanishing loss, smoothness, non-printability, weighted total."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

EPS_DEPTH = 1e-6
DELTA_SQRT = 1e-8


class DegenerateSampleWarning(UserWarning):
    pass


class NonFiniteLossError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 5.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # exact sqrt for x > 0, exactly 0 with zero gradient at x == 0
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.full_like(x, DELTA_SQRT))), torch.zeros_like(x))


def vanish_loss(depth: torch.Tensor, mask: torch.Tensor, normalize: str = "pixels") -> torch.Tensor:
    """Mean squared masked disparity, with disparity taken as ``1 / depth``.

    ``normalize="pixels"`` averages over all H*W pixels (and the batch);
    ``"mask"`` divides by the mask area instead.
    """
    if mask.shape != depth.shape:
        raise ValueError(f"depth {tuple(depth.shape)} and mask {tuple(mask.shape)} differ")
    return disparity_vanish_loss(1.0 / depth.clamp(min=EPS_DEPTH), mask, normalize)


def disparity_vanish_loss(disparity: torch.Tensor, mask: torch.Tensor, normalize: str = "pixels") -> torch.Tensor:
    """Same objective on a disparity map supplied directly, e.g. a network's disparity head."""
    mask = mask.to(disparity.dtype)
    if mask.shape != disparity.shape:
        raise ValueError(f"disparity {tuple(disparity.shape)} and mask {tuple(mask.shape)} differ")
    if not mask.any():
        warnings.warn("vanish loss on an empty mask", DegenerateSampleWarning, stacklevel=3)
        return disparity.sum() * 0.0
    sq = (disparity * mask) ** 2
    if normalize == "pixels":
        return sq.mean()
    if normalize == "mask":
        return sq.sum() / mask.sum()
    raise ValueError(f"unknown normalization {normalize!r}")


def smooth_loss(seed: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Isotropic total variation of an (n, n, C) seed, summed over pixels and channels.

    Differences that would reach past the last row/column count as zero.
    ``reduction="mean"`` divides the sum by the number of seed elements.
    """
    dv = torch.zeros_like(seed)
    dh = torch.zeros_like(seed)
    dv[:-1] = seed[:-1] - seed[1:]
    dh[:, :-1] = seed[:, :-1] - seed[:, 1:]
    total = _safe_sqrt(dv**2 + dh**2).sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / seed.numel()
    raise ValueError(f"unknown reduction {reduction!r}")


def nps_loss(seed: torch.Tensor, palette: torch.Tensor) -> torch.Tensor:
    """Mean over the n*n pixels of the Euclidean distance to the nearest palette color.

    On ties the first nearest color supplies the subgradient.
    """
    palette = torch.as_tensor(palette, dtype=seed.dtype)
    if palette.numel() == 0:
        raise ValueError("palette must be non-empty")
    n_pix = seed.shape[0] * seed.shape[1]
    flat = seed.reshape(n_pix, -1)
    diff = flat[:, None, :] - palette[None, :, :]
    dist = _safe_sqrt((diff**2).sum(-1))
    idx = dist.detach().argmin(dim=1, keepdim=True)
    return dist.gather(1, idx).sum() / n_pix


def total_loss(l_a, l_st, l_nps, w: LossWeights):
    for name, val in (("L_a", l_a), ("L_st", l_st), ("L_nps", l_nps)):
        if not math.isfinite(float(torch.as_tensor(val).detach())):
            raise NonFiniteLossError(f"{name} is not finite: {float(torch.as_tensor(val).detach())}")
    return l_a + w.alpha * l_st + w.beta * l_nps


def make_palette(rng: np.random.Generator, size: int = 10, levels: int = 5) -> np.ndarray:
    """``size`` distinct colors drawn from a ``levels``^3 grid over [0.1, 0.9]^3."""
    grid = np.linspace(0.1, 0.9, levels)
    cube = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    if size > len(cube):
        raise ValueError(f"palette size {size} exceeds the {len(cube)}-color grid")
    return cube[rng.choice(len(cube), size=size, replace=False)]
