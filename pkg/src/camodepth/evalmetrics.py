"""Mean depth error, affected-region ratio, paired evaluation and binned reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from camodepth.physaug import PAConfig, apply_pa, composite, draw_pa
from camodepth.renderproj import SceneBatch, project, render_benign
from camodepth.scenegen import WEATHERS, SceneSet, sample_rng
from camodepth.texconv import TCConfig, texture_convert

V_THRE = 10.0
AZIMUTH_SECTOR_DEG = 30.0
DISTANCE_EDGES = (3.0, 6.0, 9.0, 12.0, 15.0)


class UndefinedMetricError(ValueError):
    """Raised for samples whose object mask is empty."""


def _masked(delta, mask):
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise UndefinedMetricError("empty object mask")
    return delta[mask], mask.sum()


def depth_error(d_adv, d_benign, mask) -> float:
    """Mean of ``|d_adv - d_benign|`` over the object mask."""
    delta = np.abs(np.asarray(d_adv, dtype=np.float64) - np.asarray(d_benign, dtype=np.float64))
    vals, area = _masked(delta, mask)
    # left-to-right accumulation in row-major order; reproducible independent of array layout
    return float(np.cumsum(vals)[-1] / area)


def affected_ratio(d_adv, d_benign, mask, v_thre: float = V_THRE) -> float:
    """Fraction of object pixels whose depth changed by at least ``v_thre`` meters."""
    delta = np.abs(np.asarray(d_adv, dtype=np.float64) - np.asarray(d_benign, dtype=np.float64))
    vals, area = _masked(delta, mask)
    return float((vals >= v_thre).sum() / area)


def azimuth_sector(azimuth_deg: float) -> int:
    return int(azimuth_deg // AZIMUTH_SECTOR_DEG) % int(360 / AZIMUTH_SECTOR_DEG)


def distance_band(distance_m: float) -> int:
    for k in range(len(DISTANCE_EDGES) - 1):
        if distance_m < DISTANCE_EDGES[k + 1]:
            return k
    return len(DISTANCE_EDGES) - 2


@dataclass
class MetricsRecord:
    sample_id: int
    e_d: float
    r_a: float
    weather: str
    azimuth_deg: float
    distance_m: float

    @property
    def azimuth_sector(self) -> int:
        return azimuth_sector(self.azimuth_deg)

    @property
    def distance_band(self) -> int:
        return distance_band(self.distance_m)


@dataclass
class MetricsReport:
    method: str
    records: list[MetricsRecord]
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def mean_e_d(self) -> float:
        return float(np.mean([r.e_d for r in self.records])) if self.records else math.nan

    @property
    def mean_r_a(self) -> float:
        return float(np.mean([r.r_a for r in self.records])) if self.records else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "sample_id", "E_d", "R_a", "weather", "azimuth_deg", "distance_m",
                    "azimuth_sector", "distance_band"])
        for r in self.records:
            w.writerow([self.method, r.sample_id, f"{r.e_d:.6f}", f"{r.r_a:.6f}", r.weather,
                        f"{r.azimuth_deg:.4f}", f"{r.distance_m:.4f}", r.azimuth_sector, r.distance_band])
        return buf.getvalue()


# --------------------------------------------------------------------------- paired evaluation


@dataclass
class Baseline:
    """Reference textures: ``normal`` (no texture), ``random`` (noise seed), ``uniform`` (one color)."""

    kind: str
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ("normal", "random", "uniform"):
            raise ValueError(f"unknown baseline {self.kind!r}")


def _texture_for(source, n: int, tc: TCConfig, rng: np.random.Generator, dtype) -> torch.Tensor | None:
    if isinstance(source, Baseline):
        if source.kind == "normal":
            return None
        if source.kind == "uniform":
            return torch.tensor(source.color, dtype=dtype).expand(tc.size, tc.size, 3)
        seed = torch.as_tensor(rng.random((n, n, 3)), dtype=dtype)
    else:
        seed = torch.as_tensor(source, dtype=dtype)
    return texture_convert(seed, tc, rng)


def evaluate(
    model,
    scenes: SceneSet,
    texture,
    tc: TCConfig,
    pa: PAConfig,
    seed: int = 0,
    seed_size: int | None = None,
    method: str | None = None,
    v_thre: float = V_THRE,
    batch_size: int = 16,
) -> MetricsReport:
    """Paired evaluation of a texture seed (n, n, 3) or a :class:`Baseline`.

    Per sample, the texture placement (conversion draws) and the physical
    augmentation draw come from substream ``(seed, index)``; the benign and
    textured renders share that augmentation so the difference isolates the
    texture.
    """
    if method is None:
        method = texture.kind if isinstance(texture, Baseline) else "optimized"
    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.float32
    if seed_size is None:
        seed_size = texture.shape[0] if not isinstance(texture, Baseline) else tc.size // tc.tau + 1
    records, errors = [], []
    for start in range(0, len(scenes), batch_size):
        ids = list(range(start, min(start + batch_size, len(scenes))))
        batch = SceneBatch.from_samples([scenes[i] for i in ids], dtype)
        rngs = [sample_rng(seed, i) for i in ids]
        textures = [_texture_for(texture, seed_size, tc, r, dtype) for r in rngs]
        benign_obj = render_benign(batch)
        if textures[0] is None:
            adv_obj = benign_obj
        else:
            adv_obj = project(torch.stack(textures), batch)
        draw = draw_pa(batch, rngs, pa)
        with torch.no_grad():
            benign = apply_pa(benign_obj, batch, draw, pa)
            adv = apply_pa(adv_obj, batch, draw, pa)
            x = torch.cat([composite(batch.background, benign), composite(batch.background, adv)])
            depth = model(x).double().numpy()
        d_benign, d_adv = depth[: len(ids)], depth[len(ids) :]
        masks = adv.mask.numpy()
        for k, i in enumerate(ids):
            s = scenes[i]
            try:
                e_d = depth_error(d_adv[k], d_benign[k], masks[k])
                r_a = affected_ratio(d_adv[k], d_benign[k], masks[k], v_thre)
            except UndefinedMetricError as exc:
                errors.append((i, str(exc)))
                continue
            records.append(MetricsRecord(i, e_d, r_a, s.weather, s.pose.azimuth_deg, s.pose.distance_m))
    return MetricsReport(method, records, errors)


# --------------------------------------------------------------------------- breakdowns


@dataclass
class BinRow:
    label: str
    count: int
    mean_e_d: float | None
    mean_r_a: float | None


def _bins(axis: str) -> list[tuple[str, object]]:
    if axis == "weather":
        return [(w, w) for w in WEATHERS]
    if axis == "azimuth":
        n = int(360 / AZIMUTH_SECTOR_DEG)
        return [(f"{k * AZIMUTH_SECTOR_DEG:.0f}-{(k + 1) * AZIMUTH_SECTOR_DEG:.0f}", k) for k in range(n)]
    if axis == "distance":
        e = DISTANCE_EDGES
        return [(f"{e[k]:g}-{e[k + 1]:g}", k) for k in range(len(e) - 1)]
    raise ValueError(f"unknown axis {axis!r}")


def _key(record: MetricsRecord, axis: str):
    return {"weather": record.weather, "azimuth": record.azimuth_sector, "distance": record.distance_band}[axis]


def breakdown(report: MetricsReport, axis: str) -> list[BinRow]:
    if not report.records:
        raise ValueError("empty report")
    rows = []
    for label, key in _bins(axis):
        members = [r for r in report.records if _key(r, axis) == key]
        if members:
            n = len(members)
            rows.append(BinRow(label, n, sum(r.e_d for r in members) / n, sum(r.r_a for r in members) / n))
        else:
            rows.append(BinRow(label, 0, None, None))
    return rows


def breakdown_csv(report: MetricsReport, axis: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "axis", "bin", "count", "E_d", "R_a"])
    for row in breakdown(report, axis):
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        w.writerow([report.method, axis, row.label, row.count, fmt(row.mean_e_d), fmt(row.mean_r_a)])
    return buf.getvalue()


def summary_table(reports: Sequence[MetricsReport]) -> str:
    """Plain-text table: one row per method with aggregate E_d and R_a."""
    lines = [f"{'Method':<12} {'E_d':>8} {'R_a':>7} {'n':>5}", "-" * 35]
    for r in reports:
        lines.append(f"{r.method:<12} {r.mean_e_d:>8.3f} {r.mean_r_a:>7.3f} {len(r.records):>5}")
    return "\n".join(lines) + "\n"


def summary_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "E_d", "R_a", "count", "excluded"])
    for r in reports:
        w.writerow([r.method, f"{r.mean_e_d:.6f}", f"{r.mean_r_a:.6f}", len(r.records), len(r.errors)])
    return buf.getvalue()
