"""One config tree for the whole pipeline, loaded from and dumped to TOML."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from camodepth.attack import AdamHyper, AttackConfig, desk_rig
from camodepth.losses import LossWeights
from camodepth.physaug import PAConfig
from camodepth.scenegen import SceneGenConfig
from camodepth.texconv import TCConfig
from camodepth.victim import TrainConfig, VictimConfig


class ConfigError(ValueError):
    pass


# Substream ids for seeds derived from the master seed.
STREAMS = {"train_scenes": 1, "attack_scenes": 2, "eval_scenes": 3, "victim": 4, "attack": 5, "eval": 6}


def derive_seed(master: int, stream: str) -> int:
    return int(np.random.SeedSequence([int(master), STREAMS[stream]]).generate_state(1)[0])


@dataclass
class DataConfig:
    train_count: int = 200
    attack_count: int = 100
    eval_count: int = 100


@dataclass
class EvalConfig:
    v_thre: float = 10.0
    batch_size: int = 16
    baselines: tuple[str, ...] = ("normal", "random", "uniform")
    uniform_color: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    scenes: SceneGenConfig = field(default_factory=SceneGenConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=desk_rig)
    pa: PAConfig = field(default_factory=PAConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # a single augmentation block drives attack, training and evaluation
        self.attack.pa = self.pa
        self.train.pa = self.pa

    def validate(self) -> None:
        try:
            self.scenes.validate()
            self.attack.validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if min(self.data.train_count, self.data.attack_count, self.data.eval_count) < 1:
            raise ConfigError("scene counts must be >= 1")
        bad = [b for b in self.eval.baselines if b not in ("normal", "random", "uniform")]
        if bad:
            raise ConfigError(f"unknown baselines {bad}")
        k = 2 ** (len(self.victim.channels) - 1)
        if self.scenes.height % k or self.scenes.width % k:
            raise ConfigError(f"image size must be divisible by {k} for the victim network")

    def to_dict(self) -> dict:
        attack = self.attack.to_dict()
        attack.pop("pa")
        train = self.train.to_dict()
        train.pop("pa")
        scenes = self.scenes.to_dict()
        return {
            "seed": self.seed,
            "data": dataclasses.asdict(self.data),
            "scenes": scenes,
            "victim": dataclasses.asdict(self.victim),
            "train": train,
            "attack": attack,
            "pa": self.pa.to_dict(),
            "eval": dataclasses.asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        known = {"seed", "data", "scenes", "victim", "train", "attack", "pa", "eval"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        try:
            base = cls()
            pa = PAConfig.from_dict({**base.pa.to_dict(), **d.get("pa", {})})
            attack_d = _merge(base.attack.to_dict(), d.get("attack", {}))
            attack_d.pop("pa", None)
            attack = AttackConfig.from_dict(attack_d)
            train_d = _merge(base.train.to_dict(), d.get("train", {}))
            train_d.pop("pa", None)
            scenes = SceneGenConfig.from_dict(_merge(base.scenes.to_dict(), d.get("scenes", {})))
            victim_d = _merge(dataclasses.asdict(base.victim), d.get("victim", {}))
            victim_d["channels"] = tuple(victim_d["channels"])
            eval_d = _merge(dataclasses.asdict(base.eval), d.get("eval", {}))
            eval_d["baselines"] = tuple(eval_d["baselines"])
            eval_d["uniform_color"] = tuple(eval_d["uniform_color"])
            return cls(
                seed=int(d.get("seed", base.seed)),
                data=DataConfig(**_merge(dataclasses.asdict(base.data), d.get("data", {}))),
                scenes=scenes,
                victim=VictimConfig(**victim_d),
                train=TrainConfig(**train_d),
                attack=attack,
                pa=pa,
                eval=EvalConfig(**eval_d),
            )
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise KeyError(f"unknown key {k!r}")
        out[k] = _merge(base[k], v) if isinstance(base[k], dict) and isinstance(v, dict) else v
    return out


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        data = tomli.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = PipelineConfig.from_dict(data)
    cfg.validate()
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


__all__ = [
    "AdamHyper", "ConfigError", "DataConfig", "EvalConfig", "LossWeights", "PipelineConfig", "TCConfig",
    "derive_seed", "dump_config", "load_config",
]
