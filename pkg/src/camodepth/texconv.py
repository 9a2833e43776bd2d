"""Texture conversion: flip/rotate, tile, and random crop of the texture seed.

Every step is a pure pixel selection, so each output texel copies exactly one
seed texel and gradients w.r.t. the seed are 0/1 indicators.

Textures are torch tensors laid out ``(rows, cols, channels)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image


@dataclass
class TCConfig:
    tau: int = 6
    size: int = 512  # side N of the cropped texture
    flip_prob: float = 0.5
    rot_prob: float = 0.5
    deterministic: bool = False

    def validate(self, n: int | None = None) -> None:
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        for p in (self.flip_prob, self.rot_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if n is not None and self.tau * n < self.size:
            raise ValueError(f"tau*n = {self.tau * n} smaller than crop size {self.size}")


def robust_transform(seed: torch.Tensor, cfg: TCConfig, rng: np.random.Generator) -> torch.Tensor:
    """Random axis flip and quarter-turn rotation, drawn independently.

    The four draws (flip?, flip axis, rotate?, direction) are always consumed
    so the RNG stream does not depend on the outcome.
    """
    u = rng.random(4)
    if cfg.deterministic:
        return seed
    out = seed
    if u[0] < cfg.flip_prob:
        out = torch.flip(out, dims=(1,) if u[1] < 0.5 else (0,))
    if u[2] < cfg.rot_prob:
        out = torch.rot90(out, k=1 if u[3] < 0.5 else -1, dims=(0, 1))
    return out


def tile(seed: torch.Tensor, tau: int) -> torch.Tensor:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return seed.repeat(tau, tau, 1)


def random_clip(
    big: torch.Tensor, size: int, rng: np.random.Generator, deterministic: bool = False
) -> torch.Tensor:
    side = big.shape[0]
    if size > side or size > big.shape[1]:
        raise ValueError(f"crop size {size} exceeds texture side {side}")
    r, c = (int(x) for x in rng.integers(0, side - size + 1, size=2))
    if deterministic:
        r = c = 0
    return big[r : r + size, c : c + size]


def texture_convert(seed: torch.Tensor, cfg: TCConfig, rng: np.random.Generator) -> torch.Tensor:
    """Seed (n, n, C) -> adversarial texture (N, N, C)."""
    cfg.validate(seed.shape[0])
    out = robust_transform(seed, cfg, rng)
    out = tile(out, cfg.tau)
    return random_clip(out, cfg.size, rng, cfg.deterministic)


def center_convert(seed: torch.Tensor, cfg: TCConfig) -> torch.Tensor:
    """Conversion with all randomness removed: tile and take the central crop."""
    cfg.validate(seed.shape[0])
    big = tile(seed, cfg.tau)
    off = (big.shape[0] - cfg.size) // 2
    return big[off : off + cfg.size, off : off + cfg.size]


# --------------------------------------------------------------------------- I/O


def save_seed(seed: torch.Tensor | np.ndarray, path: str | Path) -> tuple[Path, Path]:
    """Write ``path`` as an 8-bit PNG (gamma 1.0, value*255 rounded) and a float64 ``.npy`` sidecar."""
    path = Path(path)
    arr = seed.detach().cpu().numpy() if isinstance(seed, torch.Tensor) else np.asarray(seed)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"seed must be n x n x 3, got {arr.shape}")
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)
    sidecar = path.with_suffix(".npy")
    np.save(sidecar, arr)
    return path, sidecar


def load_seed(path: str | Path, prefer_sidecar: bool = True) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_suffix(".npy")
    if prefer_sidecar and sidecar.is_file():
        return np.load(sidecar)
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0
