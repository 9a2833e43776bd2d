"""Small encoder-decoder depth network and its supervised training loop."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from camodepth.physaug import PAConfig, apply_pa, composite, draw_pa, no_augment
from camodepth.renderproj import SceneBatch, render_benign
from camodepth.scenegen import SceneSet, sample_rng

CHECKPOINT_FORMAT = "camodepth.victim"
CHECKPOINT_VERSION = 1


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, error: float):
        super().__init__(message)
        self.error = error


@dataclass
class VictimConfig:
    channels: tuple[int, ...] = (8, 16, 24, 32, 40)
    min_depth: float = 1.0
    max_depth: float = 40.0

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.channels) - 1)


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ELU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ELU(),
    )


class DepthNet(nn.Module):
    """U-Net style depth regressor.

    Input is an image batch (B, H, W, 3) in [0, 1]; two normalized coordinate
    planes are appended internally. The sigmoid head gives a disparity in
    (0, 1) mapped to depth ``d_min + (d_max - d_min) * (1 - disparity)``.
    """

    def __init__(self, config: VictimConfig | None = None):
        super().__init__()
        self.config = config or VictimConfig()
        ch = self.config.channels
        self.enc = nn.ModuleList([_block(5, ch[0])] + [_block(ch[i - 1], ch[i], 2) for i in range(1, len(ch))])
        self.dec = nn.ModuleList([_block(ch[i] + ch[i - 1], ch[i - 1]) for i in range(len(ch) - 1, 0, -1)])
        self.head = nn.Conv2d(ch[0], 1, 3, padding=1)

    def disparity(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image[None]
        B, H, W, _ = image.shape
        k = self.config.downsample
        if H % k or W % k:
            raise ValueError(f"image size {H}x{W} not divisible by {k}")
        x = image.permute(0, 3, 1, 2) - 0.5
        ys = torch.linspace(-1, 1, H, dtype=x.dtype).view(1, 1, H, 1).expand(B, 1, H, W)
        xs = torch.linspace(-1, 1, W, dtype=x.dtype).view(1, 1, 1, W).expand(B, 1, H, W)
        x = torch.cat([x, ys, xs], dim=1)
        skips = []
        for blk in self.enc:
            x = blk(x)
            skips.append(x)
        skips.pop()
        for blk in self.dec:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = blk(torch.cat([x, skips.pop()], dim=1))
        return torch.sigmoid(self.head(x))[:, 0]

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Depth in meters, (B, H, W)."""
        c = self.config
        return c.min_depth + (c.max_depth - c.min_depth) * (1 - self.disparity(image))


class DepthPredictor(Protocol):
    """Anything mapping images (B, H, W, 3) in [0, 1] to depth (B, H, W) in meters."""

    differentiable: bool

    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


class ExternalModelAdapter:
    """Wrap a third-party depth model so it can be evaluated (or attacked, if differentiable).

    ``fn`` receives and returns tensors in the layouts of :class:`DepthPredictor`.
    """

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor], differentiable: bool = False):
        self.fn = fn
        self.differentiable = differentiable

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        if self.differentiable:
            depth = self.fn(image)
        else:
            with torch.no_grad():
                depth = self.fn(image.detach())
        if depth.shape != image.shape[:-1]:
            raise ValueError(f"adapter returned {tuple(depth.shape)}, expected {tuple(image.shape[:-1])}")
        if not torch.isfinite(depth).all() or (depth <= 0).any():
            raise ValueError("adapter returned non-positive or non-finite depth")
        return depth


DepthNet.differentiable = True


def build_victim(config: VictimConfig | None = None, seed: int = 0, dtype: torch.dtype = torch.float32) -> DepthNet:
    """Freshly initialized network; initialization depends only on ``seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = DepthNet(config).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def predict(model, image: torch.Tensor) -> torch.Tensor:
    single = image.dim() == 3
    depth = model(image[None] if single else image)
    return depth[0] if single else depth


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 4e-3
    seed: int = 0
    target: float = 0.08
    val_fraction: float = 0.2
    # photometric augmentation of benign renders; geometry untouched
    augment: bool = True
    pa: PAConfig = field(default_factory=PAConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    model: DepthNet
    losses: list[float]  # mean training loss per epoch
    val_error: float
    converged: bool


def log_depth_error(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return (pred.log() - gt.log()).abs().mean()


def _benign_inputs(batch: SceneBatch, rngs, cfg: TrainConfig) -> torch.Tensor:
    obj = render_benign(batch)
    if cfg.augment:
        aug = apply_pa(obj, batch, draw_pa(batch, rngs, cfg.pa), cfg.pa)
        # geometric EoT would break the depth labels
        aug.mask = batch.mask
    else:
        aug = no_augment(obj, batch)
    return composite(batch.background, aug)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate_victim(model: DepthNet, scenes: SceneSet, indices=None, batch_size: int = 32) -> float:
    idx = np.arange(len(scenes)) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        return float("nan")
    dtype = next(model.parameters()).dtype
    errs = []
    with torch.no_grad():
        for k in range(0, len(idx), batch_size):
            batch = SceneBatch.from_samples([scenes[i] for i in idx[k : k + batch_size]], dtype)
            x = composite(batch.background, _plain(batch))
            errs.append(float(log_depth_error(model(x), batch.gt_depth)) * len(batch))
    return sum(errs) / len(idx)


def _plain(batch: SceneBatch):
    return no_augment(render_benign(batch), batch)


def train_victim(model: DepthNet, scenes: SceneSet, cfg: TrainConfig, raise_on_failure: bool = False) -> TrainResult:
    """Supervised training on benign renders, minimizing mean |log d_hat - log d|.

    A held-out ``val_fraction`` of the scenes is used for the convergence check.
    """
    torch.manual_seed(cfg.seed)
    train_idx, val_idx = split_indices(len(scenes), cfg.val_fraction, cfg.seed)
    if len(train_idx) == 0:
        train_idx = val_idx
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.epochs * steps_per_epoch))
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(train_idx)
        total = 0.0
        for k in range(0, len(order), cfg.batch_size):
            ids = order[k : k + cfg.batch_size]
            batch = SceneBatch.from_samples([scenes[i] for i in ids], dtype)
            rngs = [sample_rng(cfg.seed + 7919 * (epoch + 1), int(i)) for i in ids]
            x = _benign_inputs(batch, rngs, cfg)
            gt = batch.gt_depth
            flip = torch.as_tensor(rng.random(len(ids)) < 0.5)
            x = torch.where(flip[:, None, None, None], x.flip(2), x)
            gt = torch.where(flip[:, None, None], gt.flip(2), gt)
            loss = log_depth_error(model(x), gt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(ids)
        losses.append(total / len(order))
    model.eval()
    val_error = evaluate_victim(model, scenes, val_idx if len(val_idx) else train_idx)
    converged = bool(val_error < cfg.target)
    if raise_on_failure and not converged:
        raise NonConvergenceError(f"validation log-depth error {val_error:.4f} >= target {cfg.target}", val_error)
    return TrainResult(model, losses, val_error, converged)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: DepthNet, path: str | Path, extra: dict | None = None) -> Path:
    """Container: format tag, version, config, parameter names/shapes, state dict."""
    path = Path(path)
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": dataclasses.asdict(model.config),
            "shapes": {k: list(v.shape) for k, v in state.items()},
            "state_dict": state,
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> DepthNet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a v{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint")
    cfg = blob["config"]
    model = DepthNet(VictimConfig(channels=tuple(cfg["channels"]), min_depth=cfg["min_depth"], max_depth=cfg["max_depth"]))
    shapes = {k: list(v.shape) for k, v in blob["state_dict"].items()}
    if shapes != blob["shapes"]:
        raise ValueError(f"{path}: parameter shapes disagree with the recorded manifest")
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
