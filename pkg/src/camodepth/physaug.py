"""Physical augmentation of rendered objects and compositing into the scene.

All random quantities are drawn up front into a :class:`PADraw` with numpy,
then applied with differentiable torch ops. Reusing a draw reproduces the
exact same augmentation, which is what paired benign/adversarial evaluation
relies on.

Order of effects: exposure/shadow multiply, rain add, fog blend, then the
EoT photometric (and optional geometric) jitter, then clamp to [0, 1].
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from camodepth.renderproj import SceneBatch


@dataclass
class EoTConfig:
    brightness: float = 0.2  # additive, uniform in [-b, b]
    contrast: tuple[float, float] = (0.9, 1.1)
    noise: float = 0.1  # per-pixel additive, uniform in [-n, n]
    saturation: tuple[float, float] = (0.8, 1.2)
    rotation_deg: float = 20.0
    scale: tuple[float, float] = (0.25, 1.25)
    geometric: bool = False

    @classmethod
    def identity(cls) -> EoTConfig:
        return cls(brightness=0.0, contrast=(1.0, 1.0), noise=0.0, saturation=(1.0, 1.0),
                   rotation_deg=0.0, scale=(1.0, 1.0), geometric=False)


@dataclass
class PAConfig:
    exposure: bool = True
    exposure_strength: tuple[float, float] = (0.6, 1.4)
    # strength range for non-sunny samples when weather gating is on
    mild_exposure_strength: tuple[float, float] = (0.85, 1.15)
    exposure_radius: tuple[float, float] = (0.2, 0.6)  # fraction of min(H, W)
    blur_sigma: float = 3.0
    rain: bool = True
    rain_density: float = 2.0  # streaks per 1000 pixels
    rain_length: tuple[float, float] = (3.0, 8.0)  # pixels
    rain_angle: tuple[float, float] = (-20.0, 20.0)  # degrees from vertical
    rain_intensity: tuple[float, float] = (0.2, 0.5)
    fog: bool = True
    fog_beta: float = 0.08  # extinction per meter
    fog_airlight: tuple[float, float, float] = (0.8, 0.8, 0.8)
    eot: EoTConfig = field(default_factory=EoTConfig)
    weather_gating: bool = True

    def validate(self) -> None:
        lo, hi = self.exposure_strength
        if lo <= 0 or hi < lo:
            raise ValueError("exposure_strength must be a positive, ordered range")
        if self.fog_beta < 0:
            raise ValueError("fog_beta must be >= 0")
        if any(not 0 <= a <= 1 for a in self.fog_airlight):
            raise ValueError("fog_airlight must lie in [0, 1]^3")
        if self.rain_density < 0:
            raise ValueError("rain_density must be >= 0")

    @classmethod
    def disabled(cls) -> PAConfig:
        return cls(exposure=False, rain=False, fog=False, eot=EoTConfig.identity())

    @classmethod
    def from_dict(cls, d: dict) -> PAConfig:
        d = dict(d)
        eot = EoTConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("eot", {}).items()})
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(eot=eot, **d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------- individual effects


def exposure_mask(
    shape: tuple[int, int], rng: np.random.Generator, cfg: PAConfig, strength: float | None = None
) -> np.ndarray:
    """Blurred radial exposure (>1) or shadow (<1) map.

    Inside a random disc the gain follows ``1 + (s - 1) * (1 - (r / R)**2)``;
    the map is then smoothed with a Gaussian of ``blur_sigma`` pixels.
    """
    H, W = shape
    cy, cx = rng.uniform(0, H), rng.uniform(0, W)
    radius = rng.uniform(*cfg.exposure_radius) * min(H, W)
    s = rng.uniform(*cfg.exposure_strength)
    if strength is not None:
        s = strength
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    rho2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2
    gain = 1.0 + (s - 1.0) * np.clip(1.0 - rho2, 0.0, None)
    if cfg.blur_sigma > 0:
        gain = gaussian_filter(gain, cfg.blur_sigma, mode="nearest")
    return gain


def rain_noise(shape: tuple[int, int], rng: np.random.Generator, cfg: PAConfig) -> np.ndarray:
    """Additive rain layer, H x W x 3 with values in [0, 0.5].

    ``round(rain_density * H * W / 1000)`` anti-aliased streaks; overlapping
    streaks take the max so intensities never accumulate past a single streak.
    """
    H, W = shape
    count = int(round(cfg.rain_density * H * W / 1000))
    out = np.zeros((H, W))
    if count == 0:
        return np.zeros((H, W, 3))
    y0 = rng.uniform(0, H, count)
    x0 = rng.uniform(0, W, count)
    length = rng.uniform(*cfg.rain_length, count)
    ang = np.radians(rng.uniform(*cfg.rain_angle, count))
    inten = np.minimum(rng.uniform(*cfg.rain_intensity, count), 0.5)
    dy, dx = np.cos(ang) * length, np.sin(ang) * length
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for k in range(count):
        # distance from each pixel center to the segment
        py, px = yy - y0[k], xx - x0[k]
        t = np.clip((py * dy[k] + px * dx[k]) / (length[k] ** 2), 0.0, 1.0)
        dist = np.hypot(py - t * dy[k], px - t * dx[k])
        out = np.maximum(out, inten[k] * np.clip(1.0 - dist, 0.0, 1.0))
    return np.repeat(out[..., None], 3, axis=-1)


def fog_noise(image: torch.Tensor, depth: torch.Tensor, cfg: PAConfig) -> torch.Tensor:
    """Atmospheric scattering: ``I * exp(-beta d) + A * (1 - exp(-beta d))``."""
    depth = torch.as_tensor(depth, dtype=image.dtype)
    if (depth <= 0).any():
        raise ValueError("fog requires strictly positive depth")
    trans = torch.exp(-cfg.fog_beta * depth).unsqueeze(-1)
    air = torch.as_tensor(cfg.fog_airlight, dtype=image.dtype)
    return image * trans + air * (1 - trans)


@dataclass
class EoTDraw:
    brightness: float
    contrast: float
    saturation: float
    noise: np.ndarray  # H x W x 3
    angle_deg: float
    scale: float
    geometric: bool


def draw_eot(shape: tuple[int, int], rng: np.random.Generator, eot: EoTConfig) -> EoTDraw:
    H, W = shape
    return EoTDraw(
        brightness=float(rng.uniform(-eot.brightness, eot.brightness)),
        contrast=float(rng.uniform(*eot.contrast)),
        saturation=float(rng.uniform(*eot.saturation)),
        noise=rng.uniform(-eot.noise, eot.noise, size=(H, W, 3)),
        angle_deg=float(rng.uniform(-eot.rotation_deg, eot.rotation_deg)),
        scale=float(rng.uniform(*eot.scale)),
        geometric=eot.geometric,
    )


def warp(image: torch.Tensor, mask: torch.Tensor, angle_deg: float, scale: float):
    """Rotate/scale an (H, W, C) layer and its (H, W) mask about the mask centroid.

    The mask is resampled bilinearly and re-binarized at 0.5.
    """
    H, W = mask.shape
    m = mask.to(image.dtype)
    total = m.sum()
    if total > 0:
        ys = torch.arange(H, dtype=image.dtype) + 0.5
        xs = torch.arange(W, dtype=image.dtype) + 0.5
        cy = float((m.sum(1) * ys).sum() / total)
        cx = float((m.sum(0) * xs).sum() / total)
    else:
        cy, cx = H / 2, W / 2
    # normalized coordinates (align_corners=False): x_n = 2 x / W - 1
    cxn, cyn = 2 * cx / W - 1, 2 * cy / H - 1
    th = math.radians(angle_deg)
    c, s = math.cos(th) / scale, math.sin(th) / scale
    # output -> input sampling map, rotation handled in pixel units
    ax, ay = W / 2, H / 2
    theta = torch.tensor(
        [
            [c, s * ay / ax, cxn - c * cxn - s * ay / ax * cyn],
            [-s * ax / ay, c, cyn + s * ax / ay * cxn - c * cyn],
        ],
        dtype=image.dtype,
    )
    stacked = torch.cat([image.permute(2, 0, 1), m[None]], dim=0)[None]
    grid = F.affine_grid(theta[None], list(stacked.shape), align_corners=False)
    out = F.grid_sample(stacked, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    new_mask = (out[-1] > 0.5).to(image.dtype)
    return out[:-1].permute(1, 2, 0), new_mask


def apply_eot(image: torch.Tensor, mask: torch.Tensor, draw: EoTDraw):
    """Photometric jitter (saturation, contrast, brightness, noise), optional warp, clamp."""
    gray = image.mean(dim=-1, keepdim=True)
    # same blend as gray + s * (image - gray), but exact at s = 1
    out = image + (draw.saturation - 1.0) * (image - gray)
    out = out * draw.contrast + draw.brightness
    out = out + torch.as_tensor(draw.noise, dtype=image.dtype)
    if draw.geometric:
        out, mask = warp(out, mask, draw.angle_deg, draw.scale)
    return out.clamp(0.0, 1.0), mask


# --------------------------------------------------------------------------- composition


@dataclass
class PADraw:
    """Every random quantity of one augmentation, per sample of a batch."""

    exposure: np.ndarray | None  # B x H x W
    rain: np.ndarray | None  # B x H x W x 3
    fog: np.ndarray  # B bool
    eot: list[EoTDraw]


def draw_pa(scenes: SceneBatch, rngs: list[np.random.Generator], cfg: PAConfig) -> PADraw:
    cfg.validate()
    H, W = scenes.mask.shape[1:]
    exposure, rain, fog, eot = [], [], [], []
    for weather, rng in zip(scenes.weathers, rngs):
        gated = cfg.weather_gating
        if cfg.exposure:
            sub = cfg if not gated or weather == "sunny" else dataclasses.replace(
                cfg, exposure_strength=cfg.mild_exposure_strength)
            exposure.append(exposure_mask((H, W), rng, sub))
        if cfg.rain:
            r = rain_noise((H, W), rng, cfg)
            rain.append(r if not gated or weather == "rainy" else np.zeros_like(r))
        fog.append(cfg.fog and (not gated or weather == "foggy"))
        eot.append(draw_eot((H, W), rng, cfg.eot))
    return PADraw(
        exposure=np.stack(exposure) if exposure else None,
        rain=np.stack(rain) if rain else None,
        fog=np.array(fog, dtype=bool),
        eot=eot,
    )


@dataclass
class AugmentedObject:
    pixels: torch.Tensor  # B x H x W x 3
    mask: torch.Tensor  # B x H x W, possibly warped by geometric EoT


def apply_pa(obj: torch.Tensor, scenes: SceneBatch, draw: PADraw, cfg: PAConfig) -> AugmentedObject:
    out = obj
    if draw.exposure is not None:
        out = out * torch.as_tensor(draw.exposure, dtype=obj.dtype).unsqueeze(-1)
    if draw.rain is not None:
        out = out + torch.as_tensor(draw.rain, dtype=obj.dtype)
    out = out.clamp(0.0, 1.0)
    if draw.fog.any():
        fogged = fog_noise(out, scenes.gt_depth, cfg)
        sel = torch.as_tensor(draw.fog)[:, None, None, None]
        out = torch.where(sel, fogged, out)
    pixels, masks = [], []
    for b, ed in enumerate(draw.eot):
        p, m = apply_eot(out[b], scenes.mask[b], ed)
        pixels.append(p)
        masks.append(m)
    return AugmentedObject(torch.stack(pixels), torch.stack(masks))


def physical_augment(
    obj: torch.Tensor, scenes: SceneBatch, rngs: list[np.random.Generator], cfg: PAConfig
) -> AugmentedObject:
    return apply_pa(obj, scenes, draw_pa(scenes, rngs, cfg), cfg)


def no_augment(obj: torch.Tensor, scenes: SceneBatch) -> AugmentedObject:
    return AugmentedObject(obj, scenes.mask)


def composite(background: torch.Tensor, obj: AugmentedObject) -> torch.Tensor:
    """``b * (1 - m) + O * m``; background pixels outside the mask pass through untouched."""
    if background.shape != obj.pixels.shape:
        raise ValueError(f"shape mismatch {tuple(background.shape)} vs {tuple(obj.pixels.shape)}")
    m = obj.mask.unsqueeze(-1)
    return background * (1 - m) + obj.pixels * m
