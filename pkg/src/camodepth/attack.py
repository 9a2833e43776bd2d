"""Texture-seed optimization loop.

Each iteration converts the seed into per-sample textures, projects them on
a minibatch of scenes, augments and composites, runs the depth model, and
takes one Adam step on the weighted loss. The seed is clamped to [0, 1]
after every step (or kept in range by a sigmoid reparameterization).
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np
import torch

from camodepth.losses import LossWeights, NonFiniteLossError, disparity_vanish_loss, make_palette, nps_loss, smooth_loss, total_loss, vanish_loss
from camodepth.physaug import PAConfig, composite, no_augment, physical_augment
from camodepth.renderproj import SceneBatch, project
from camodepth.scenegen import SceneSet
from camodepth.texconv import TCConfig, center_convert, save_seed, texture_convert

LOSS_TERMS = ("a", "st", "nps")


class AttackDivergedError(RuntimeError):
    def __init__(self, iteration: int, last_seed: np.ndarray):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.last_seed = last_seed


@dataclass
class AdamHyper:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, params: torch.Tensor) -> AdamState:
        return cls(torch.zeros_like(params), torch.zeros_like(params), 0)


def adam_step(params: torch.Tensor, grads: torch.Tensor, state: AdamState, hyper: AdamHyper):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {tuple(params.shape)}, grads {tuple(grads.shape)}")
    t = state.step + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grads * grads
    m_hat = m / (1 - hyper.beta1**t)
    v_hat = v / (1 - hyper.beta2**t)
    new = params - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps)
    return new, AdamState(m, v, t)


@dataclass
class AttackConfig:
    epochs: int = 10
    batch_size: int = 8
    adam: AdamHyper = field(default_factory=AdamHyper)
    seed_size: int = 128
    tc: TCConfig = field(default_factory=TCConfig)
    pa: PAConfig = field(default_factory=PAConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    use_tc: bool = True
    use_pa: bool = True
    loss_terms: tuple[str, ...] = LOSS_TERMS
    palette_size: int = 10
    vanish_normalize: str = "pixels"
    # "reciprocal": 1/depth; "head": the model's own disparity output when it has one
    disparity: str = "reciprocal"
    smooth_reduction: str = "sum"
    parameterization: str = "clamp"  # or "sigmoid"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.adam.lr < 0:
            raise ValueError("lr must be >= 0")
        if "a" not in self.loss_terms or any(t not in LOSS_TERMS for t in self.loss_terms):
            raise ValueError(f"loss_terms must include 'a' and be drawn from {LOSS_TERMS}")
        if self.disparity not in ("reciprocal", "head"):
            raise ValueError(f"unknown disparity source {self.disparity!r}")
        if self.parameterization not in ("clamp", "sigmoid"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        self.tc.validate(self.seed_size)
        self.pa.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_terms"] = list(self.loss_terms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AttackConfig:
        d = dict(d)
        out = cls()
        if "adam" in d:
            out.adam = AdamHyper(**d.pop("adam"))
        if "tc" in d:
            out.tc = TCConfig(**d.pop("tc"))
        if "pa" in d:
            out.pa = PAConfig.from_dict(d.pop("pa"))
        if "weights" in d:
            out.weights = LossWeights(**d.pop("weights"))
        if "loss_terms" in d:
            out.loss_terms = tuple(d.pop("loss_terms"))
        for k, v in d.items():
            if not hasattr(out, k):
                raise KeyError(f"unknown attack config key {k!r}")
            setattr(out, k, v)
        return out


def desk_rig(**overrides) -> AttackConfig:
    """Defaults rescaled for 64x64 scenes: seed 16, tiled x6, cropped to 64."""
    cfg = AttackConfig(seed_size=16, tc=TCConfig(tau=6, size=64))
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@dataclass
class AttackRun:
    seed: np.ndarray  # final texture seed, n x n x 3 in [0, 1]
    initial_seed: np.ndarray
    trace: list[dict]  # per iteration: epoch, L_a, L_st, L_nps, L_total
    palette: np.ndarray
    manifest: dict

    def trace_csv(self) -> str:
        lines = ["iteration,epoch,L_a,L_st,L_nps,L_total"]
        for i, row in enumerate(self.trace):
            lines.append(
                f"{i},{row['epoch']},{row['L_a']:.9g},{row['L_st']:.9g},{row['L_nps']:.9g},{row['L_total']:.9g}"
            )
        return "\n".join(lines) + "\n"


def iteration_rngs(master: int, iteration: int, ids) -> list[np.random.Generator]:
    """Per-sample substreams for one optimizer iteration."""
    return [np.random.default_rng(np.random.SeedSequence(master, spawn_key=(1, iteration, int(i)))) for i in ids]


def attack_objective(
    seed: torch.Tensor,
    model,
    batch: SceneBatch,
    rngs: list[np.random.Generator],
    palette: torch.Tensor,
    cfg: AttackConfig,
) -> dict[str, torch.Tensor]:
    """Forward pass of one minibatch; returns the component losses and the weighted total."""
    if cfg.use_tc:
        textures = torch.stack([texture_convert(seed, cfg.tc, r) for r in rngs])
    else:
        textures = center_convert(seed, cfg.tc).expand(len(batch), -1, -1, -1)
    obj = project(textures, batch)
    aug = physical_augment(obj, batch, rngs, cfg.pa) if cfg.use_pa else no_augment(obj, batch)
    x_adv = composite(batch.background, aug)
    if cfg.disparity == "head":
        if not hasattr(model, "disparity"):
            raise ValueError("model has no disparity head")
        l_a = disparity_vanish_loss(model.disparity(x_adv), aug.mask, cfg.vanish_normalize)
    else:
        l_a = vanish_loss(model(x_adv), aug.mask, cfg.vanish_normalize)
    zero = seed.sum() * 0.0
    l_st = smooth_loss(seed, cfg.smooth_reduction) if "st" in cfg.loss_terms else zero
    l_nps = nps_loss(seed, palette) if "nps" in cfg.loss_terms else zero
    return {"L_a": l_a, "L_st": l_st, "L_nps": l_nps, "L_total": total_loss(l_a, l_st, l_nps, cfg.weights)}


def _to_seed(param: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    return torch.sigmoid(param) if cfg.parameterization == "sigmoid" else param


def optimize_texture(model, scenes: SceneSet, cfg: AttackConfig, palette: np.ndarray | None = None) -> AttackRun:
    cfg.validate()
    if not getattr(model, "differentiable", True):
        raise ValueError("the attack needs a differentiable depth model")
    if len(scenes) == 0:
        raise ValueError("no scenes")
    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.float32
    if hasattr(model, "eval"):
        model.eval()
    grad_flags = [p.requires_grad for p in model.parameters()] if hasattr(model, "parameters") else []
    for p in getattr(model, "parameters", lambda: [])():
        p.requires_grad_(False)
    try:
        return _optimize(model, scenes, cfg, palette, dtype)
    finally:
        for p, flag in zip(getattr(model, "parameters", lambda: [])(), grad_flags):
            p.requires_grad_(flag)


def _optimize(model, scenes, cfg, palette, dtype) -> AttackRun:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    n = cfg.seed_size
    initial = rng.random((n, n, 3))
    if palette is None:
        palette = make_palette(rng, cfg.palette_size)
    palette_t = torch.as_tensor(palette, dtype=dtype)
    if cfg.parameterization == "sigmoid":
        clipped = np.clip(initial, 1e-4, 1 - 1e-4)
        param = torch.as_tensor(np.log(clipped / (1 - clipped)), dtype=dtype)
    else:
        param = torch.as_tensor(initial, dtype=dtype)
    state = AdamState.zeros_like(param)
    trace = []
    iteration = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        for start in range(0, len(order), cfg.batch_size):
            ids = order[start : start + cfg.batch_size]
            batch = SceneBatch.from_samples([scenes[int(i)] for i in ids], dtype)
            p = param.detach().requires_grad_(True)
            try:
                losses = attack_objective(_to_seed(p, cfg), model, batch, iteration_rngs(cfg.seed, iteration, ids),
                                          palette_t, cfg)
            except NonFiniteLossError:
                raise AttackDivergedError(iteration, _to_seed(param, cfg).detach().numpy().astype(np.float64)) from None
            total = losses["L_total"]
            (grad,) = torch.autograd.grad(total, p)
            if not torch.isfinite(grad).all():
                raise AttackDivergedError(iteration, _to_seed(param, cfg).detach().numpy().astype(np.float64))
            param, state = adam_step(param, grad, state, cfg.adam)
            if cfg.parameterization == "clamp":
                param = param.clamp(0.0, 1.0)
            trace.append({"epoch": epoch, **{k: float(v.detach()) for k, v in losses.items()}})
            iteration += 1
    final = _to_seed(param, cfg).detach().numpy().astype(np.float64)
    manifest = {"attack": cfg.to_dict(), "palette": palette.tolist(), "iterations": iteration}
    return AttackRun(final, initial, trace, np.asarray(palette), manifest)


def save_run(run: AttackRun, out_dir: str | Path) -> list[Path]:
    """Write seed.png + seed.npy, initial_seed.npy, trace.csv and palette.csv; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png, npy = save_seed(run.seed, out / "seed.png")
    init = out / "initial_seed.npy"
    np.save(init, run.initial_seed)
    trace = out / "trace.csv"
    trace.write_text(run.trace_csv())
    palette = out / "palette.csv"
    palette.write_text("r,g,b\n" + "".join(f"{r:.6f},{g:.6f},{b:.6f}\n" for r, g, b in run.palette))
    return [png, npy, init, trace, palette]


def load_palette(path: str | Path) -> np.ndarray:
    rows = Path(path).read_text().strip().splitlines()[1:]
    return np.array([[float(x) for x in r.split(",")] for r in rows])
