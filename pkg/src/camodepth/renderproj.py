"""Differentiable texture projection through precomputed UV and visibility maps.

This replaces a mesh renderer: scene generation freezes all geometry into
per-pixel UV coordinates, so rendering reduces to a bilinear texture lookup
blended with the untextured object color.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from camodepth.scenegen import SceneSample


def bilinear_sample(texture: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample ``texture`` (rows, cols, C) at coordinates ``u`` (across cols) and ``v`` (down rows).

    Texel ``k`` is centered at ``(k + 0.5) / N``; addressing is edge-clamped.
    ``texture`` may carry a leading batch dimension matching ``u`` and ``v``.
    Returns an array of shape ``u.shape + (C,)``.
    """
    u = torch.as_tensor(u, dtype=texture.dtype)
    v = torch.as_tensor(v, dtype=texture.dtype)
    if (u < 0).any() or (u > 1).any() or (v < 0).any() or (v > 1).any():
        raise ValueError("texture coordinates must lie in [0, 1]")
    batched = texture.dim() == 4
    if not batched:
        texture, u, v = texture[None], u[None], v[None]
    B, rows, cols, C = texture.shape
    x = (u * cols - 0.5).clamp(0, cols - 1)
    y = (v * rows - 0.5).clamp(0, rows - 1)
    x0 = x.floor().long()
    y0 = y.floor().long()
    x1 = (x0 + 1).clamp(max=cols - 1)
    y1 = (y0 + 1).clamp(max=rows - 1)
    wx = (x - x0).unsqueeze(-1)
    wy = (y - y0).unsqueeze(-1)

    flat = texture.reshape(B, rows * cols, C)

    def gather(yy, xx):
        idx = (yy * cols + xx).reshape(B, -1, 1).expand(-1, -1, C)
        return torch.gather(flat, 1, idx).reshape(*yy.shape, C)

    out = (
        gather(y0, x0) * (1 - wx) * (1 - wy)
        + gather(y0, x1) * wx * (1 - wy)
        + gather(y1, x0) * (1 - wx) * wy
        + gather(y1, x1) * wx * wy
    )
    return out if batched else out[0]


@dataclass
class SceneBatch:
    """Stacked torch views of scene samples, shape (B, H, W, ...)."""

    background: torch.Tensor
    mask: torch.Tensor  # float 0/1
    uv: torch.Tensor
    visibility: torch.Tensor
    gt_depth: torch.Tensor
    base_color: torch.Tensor
    weathers: list[str]

    @classmethod
    def from_samples(cls, samples: Sequence[SceneSample], dtype: torch.dtype = torch.float32) -> SceneBatch:
        def stack(name):
            return torch.as_tensor(np.stack([getattr(s, name) for s in samples]), dtype=dtype)

        return cls(
            background=stack("background"),
            mask=stack("mask"),
            uv=stack("uv_map"),
            visibility=stack("visibility"),
            gt_depth=stack("gt_depth"),
            base_color=stack("base_color"),
            weathers=[s.weather for s in samples],
        )

    def __len__(self) -> int:
        return self.mask.shape[0]

    def __getitem__(self, i: int) -> SceneBatch:
        sl = slice(i, i + 1)
        return SceneBatch(
            self.background[sl], self.mask[sl], self.uv[sl], self.visibility[sl],
            self.gt_depth[sl], self.base_color[sl], self.weathers[sl],
        )


def default_paint_region(scenes: SceneBatch) -> torch.Tensor:
    return (scenes.visibility > 0).to(scenes.mask.dtype)


def project(
    textures: torch.Tensor, scenes: SceneBatch, paint_region: torch.Tensor | None = None
) -> torch.Tensor:
    """Render textured objects, (B, H, W, 3); zero outside the object mask.

    ``textures`` is (B, N, N, 3) or a single (N, N, 3) texture shared by the batch.
    ``paint_region`` defaults to every pixel with positive visibility.
    """
    if textures.dim() == 3:
        textures = textures.expand(len(scenes), *textures.shape)
    if paint_region is None:
        paint_region = default_paint_region(scenes)
    paint_region = paint_region.to(scenes.mask.dtype)
    if (paint_region > scenes.mask).any():
        raise ValueError("paint_region extends outside the object mask")
    sampled = bilinear_sample(textures, scenes.uv[..., 0], scenes.uv[..., 1])
    vis = scenes.visibility.unsqueeze(-1)
    paint = paint_region.unsqueeze(-1)
    painted = vis * sampled + (1 - vis) * scenes.base_color
    out = paint * painted + (1 - paint) * scenes.base_color
    return out * scenes.mask.unsqueeze(-1)


def render_benign(scenes: SceneBatch) -> torch.Tensor:
    return scenes.base_color * scenes.mask.unsqueeze(-1)
