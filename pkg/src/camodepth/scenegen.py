"""Procedural scene generation with analytic depth, UV and visibility maps.

A scene is a pinhole camera looking at a box-like object made of planar
faces standing on a textured ground plane. Every pixel ray is intersected
with the ground and all faces analytically, so ground-truth depth is exact
(z-depth along the optical axis, capped at ``max_depth`` for sky pixels).
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

WEATHERS = ("cloudy", "sunny", "rainy", "foggy")

AZIMUTH_RANGE = (0.0, 360.0)
DISTANCE_RANGE = (3.0, 15.0)
HEIGHT_RANGE = (0.5, 2.0)

FORMAT_MAGIC = "camodepth.sceneset"
FORMAT_VERSION = 1
_SAMPLE_MAGIC = b"CDSCENE\x00"


class SceneSetError(Exception):
    """Base class for dataset I/O failures."""


class SceneSetNotFoundError(SceneSetError, FileNotFoundError):
    pass


class SceneSetVersionError(SceneSetError):
    pass


class SceneSetCorruptError(SceneSetError):
    pass


@dataclass(frozen=True)
class CameraPose:
    azimuth_deg: float
    distance_m: float
    height_m: float

    def __post_init__(self):
        if not AZIMUTH_RANGE[0] <= self.azimuth_deg < AZIMUTH_RANGE[1]:
            raise ValueError(f"azimuth_deg {self.azimuth_deg} outside [0, 360)")
        if not DISTANCE_RANGE[0] <= self.distance_m <= DISTANCE_RANGE[1]:
            raise ValueError(f"distance_m {self.distance_m} outside {DISTANCE_RANGE}")
        if not HEIGHT_RANGE[0] <= self.height_m <= HEIGHT_RANGE[1]:
            raise ValueError(f"height_m {self.height_m} outside {HEIGHT_RANGE}")


@dataclass(frozen=True)
class Face:
    """Planar rectangle ``origin + s*axis_u + q*axis_v`` for s in [0, size_u], q in [0, size_v].

    ``axis_u`` and ``axis_v`` must be orthonormal; the face normal is their cross product.
    """

    origin: tuple[float, float, float]
    axis_u: tuple[float, float, float]
    axis_v: tuple[float, float, float]
    size_u: float
    size_v: float

    def corners(self) -> np.ndarray:
        o, u, v = (np.asarray(a, dtype=np.float64) for a in (self.origin, self.axis_u, self.axis_v))
        return np.stack([o, o + self.size_u * u, o + self.size_v * v, o + self.size_u * u + self.size_v * v])

    @property
    def normal(self) -> np.ndarray:
        return np.cross(np.asarray(self.axis_u, dtype=np.float64), np.asarray(self.axis_v, dtype=np.float64))


def box_template(length: float = 4.2, width: float = 1.8, height: float = 1.5) -> tuple[Face, ...]:
    """Five faces (four sides and the roof) of an axis-aligned box centered on the origin."""
    lx, ly = length / 2, width / 2
    return (
        Face((lx, -ly, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), width, height),  # front (+x)
        Face((-lx, ly, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, 1.0), width, height),  # back (-x)
        Face((-lx, -ly, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), length, height),  # right (-y)
        Face((lx, ly, 0.0), (-1.0, 0.0, 0.0), (0.0, 0.0, 1.0), length, height),  # left (+y)
        Face((-lx, -ly, height), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), length, width),  # roof
    )


PAINT_COLORS = (
    (0.75, 0.1, 0.1),
    (0.1, 0.2, 0.6),
    (0.85, 0.85, 0.85),
    (0.15, 0.15, 0.15),
    (0.55, 0.55, 0.6),
    (0.1, 0.45, 0.2),
    (0.9, 0.75, 0.2),
)


@dataclass
class SceneGenConfig:
    height: int = 64
    width: int = 64
    fov_deg: float = 70.0
    template: tuple[Face, ...] = field(default_factory=box_template)
    look_at_height: float = 0.75
    # physical side length covered by the unit UV square
    texture_extent_m: float = 5.0
    max_depth: float = 40.0
    weather_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    paint_colors: tuple[tuple[float, float, float], ...] = PAINT_COLORS
    # |cos| between view ray and face normal below which visibility ramps to 0
    grazing_cos: float = 0.25
    max_distractors: int = 2
    sun_direction: tuple[float, float, float] = (0.3, 0.5, 0.8)

    def __post_init__(self):
        self.template = tuple(f if isinstance(f, Face) else Face(**f) for f in self.template)
        self.weather_weights = tuple(float(w) for w in self.weather_weights)
        self.paint_colors = tuple(tuple(float(c) for c in col) for col in self.paint_colors)

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"image size {self.height}x{self.width} below the 16x16 minimum")
        if not self.template:
            raise ValueError("empty geometry template")
        if len(self.weather_weights) != len(WEATHERS) or min(self.weather_weights) < 0 or sum(self.weather_weights) <= 0:
            raise ValueError(f"weather_weights must be {len(WEATHERS)} nonnegative numbers with positive sum")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov_deg must lie in (0, 180)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneGenConfig:
        d = dict(d)
        for key in ("weather_weights", "sun_direction"):
            if key in d:
                d[key] = tuple(d[key])
        if "template" in d:
            d["template"] = tuple(
                Face(**{k: tuple(v) if isinstance(v, list) else v for k, v in f.items()}) for f in d["template"]
            )
        return cls(**d)


@dataclass(eq=False)
class SceneSample:
    background: np.ndarray  # H x W x 3
    mask: np.ndarray  # H x W bool
    uv_map: np.ndarray  # H x W x 2
    visibility: np.ndarray  # H x W
    gt_depth: np.ndarray  # H x W
    base_color: np.ndarray  # H x W x 3
    pose: CameraPose
    weather: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def benign_image(self) -> np.ndarray:
        m = self.mask[..., None]
        return np.where(m, self.base_color, self.background)

    def equals(self, other: SceneSample) -> bool:
        return (
            self.pose == other.pose
            and self.weather == other.weather
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in _ARRAY_FIELDS)
        )


_ARRAY_FIELDS = ("background", "mask", "uv_map", "visibility", "gt_depth", "base_color")


@dataclass(eq=False)
class SceneSet:
    samples: list[SceneSample]
    meta: dict

    def __post_init__(self):
        if not self.samples:
            raise ValueError("SceneSet must be non-empty")
        shapes = {s.shape for s in self.samples}
        if len(shapes) != 1:
            raise ValueError(f"samples disagree on image size: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def equals(self, other: SceneSet) -> bool:
        return (
            len(self) == len(other)
            and self.meta == other.meta
            and all(a.equals(b) for a, b in zip(self.samples, other.samples))
        )


# --------------------------------------------------------------------------- camera


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray
    focal_px: float
    height: int
    width: int

    def ray_directions(self) -> np.ndarray:
        """H x W x 3 ray directions scaled so that their component along ``forward`` is 1.

        With this scaling the ray parameter at a hit point equals its z-depth.
        """
        j = (np.arange(self.width) + 0.5 - self.width / 2) / self.focal_px
        i = (np.arange(self.height) + 0.5 - self.height / 2) / self.focal_px
        x, y = np.meshgrid(j, i)
        return self.forward + x[..., None] * self.right - y[..., None] * self.up


def footprint(template: Sequence[Face]) -> tuple[float, float, float, float]:
    pts = np.concatenate([f.corners() for f in template])
    return pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max()


def _distance_to_rect(p: np.ndarray, rect) -> float:
    x0, x1, y0, y1 = rect
    dx = max(x0 - p[0], 0.0, p[0] - x1)
    dy = max(y0 - p[1], 0.0, p[1] - y1)
    return math.hypot(dx, dy)


def camera_from_pose(pose: CameraPose, config: SceneGenConfig) -> Camera:
    """Place the camera ``pose.distance_m`` (horizontally) from the object's footprint.

    The camera sits on the ray from the footprint center at the pose azimuth and
    looks at the footprint center at ``look_at_height``.
    """
    rect = footprint(config.template)
    center = np.array([(rect[0] + rect[1]) / 2, (rect[2] + rect[3]) / 2])
    phi = math.radians(pose.azimuth_deg)
    direction = np.array([math.cos(phi), math.sin(phi)])
    lo, hi = 0.0, pose.distance_m + math.hypot(rect[1] - rect[0], rect[3] - rect[2])
    for _ in range(200):
        mid = (lo + hi) / 2
        if _distance_to_rect(center + mid * direction, rect) < pose.distance_m:
            lo = mid
        else:
            hi = mid
    xy = center + hi * direction
    position = np.array([xy[0], xy[1], pose.height_m])
    target = np.array([center[0], center[1], config.look_at_height])
    forward = target - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    focal = (config.width / 2) / math.tan(math.radians(config.fov_deg) / 2)
    return Camera(position, forward, right, up, focal, config.height, config.width)


# --------------------------------------------------------------------------- ray casting


def intersect_face(origin: np.ndarray, rays: np.ndarray, face: Face):
    """Vectorized ray/rectangle intersection.

    Returns ``(t, s, q, hit)`` with ``t`` the ray parameter and ``(s, q)`` the
    face-local coordinates of the hit point.
    """
    n = face.normal
    o = np.asarray(face.origin, dtype=np.float64)
    denom = rays @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, ((o - origin) @ n) / denom, np.inf)
    p = origin + t[..., None] * rays
    rel = p - o
    s = rel @ np.asarray(face.axis_u, dtype=np.float64)
    q = rel @ np.asarray(face.axis_v, dtype=np.float64)
    hit = np.isfinite(t) & (t > 1e-9) & (s >= 0) & (s <= face.size_u) & (q >= 0) & (q <= face.size_v)
    return t, s, q, hit


def _ground_hit(origin: np.ndarray, rays: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        t = np.where(rays[..., 2] < 0, -origin[2] / rays[..., 2], np.inf)
    return t


def _distractor_faces(rng: np.random.Generator, config: SceneGenConfig, camera: Camera) -> list[Face]:
    faces: list[Face] = []
    count = int(rng.integers(0, config.max_distractors + 1))
    rect = footprint(config.template)
    for _ in range(count):
        # Boxes placed beyond the object, away from the camera's side.
        ang = math.atan2(-camera.forward[1], -camera.forward[0]) + math.pi + rng.uniform(-0.6, 0.6)
        dist = rng.uniform(8.0, 25.0)
        cx = (rect[0] + rect[1]) / 2 + dist * math.cos(ang)
        cy = (rect[2] + rect[3]) / 2 + dist * math.sin(ang)
        size = rng.uniform(1.0, 3.0, size=3)
        for f in box_template(*size):
            o = np.asarray(f.origin) + [cx, cy, 0.0]
            faces.append(dataclasses.replace(f, origin=tuple(o)))
    return faces


def _soft_band(dist_m: np.ndarray, half_width: float, footprint_m: np.ndarray) -> np.ndarray:
    """Pixel coverage of a band |dist| <= half_width under a box filter one footprint wide."""
    fp = np.maximum(footprint_m, 1e-6)
    lo = np.clip(dist_m - fp / 2, -half_width, half_width)
    hi = np.clip(dist_m + fp / 2, -half_width, half_width)
    return (hi - lo) / fp


def _ground_texture(rng: np.random.Generator, road_y: float):
    """Ground albedo as a function of world (x, y) and per-pixel ground footprint.

    A two-lane road runs along the x axis with fixed-width lanes and
    markings; lane widths and sinusoid periods fixed in meters give the
    projected ground a scale cue. Components finer than a pixel fade out.
    """
    periods = np.array([0.5, 1.0, 2.0, 4.0])  # m
    amps = np.array([0.05, 0.05, 0.05, 0.04])
    angles = rng.uniform(0, 2 * math.pi, size=len(periods))
    phases = rng.uniform(0, 2 * math.pi, size=len(periods))
    verge = np.array([0.36, 0.40, 0.28]) + rng.uniform(-0.06, 0.06, size=3)
    asphalt = np.array([0.26, 0.26, 0.27]) + rng.uniform(-0.04, 0.04, size=3)
    dash_phase = rng.uniform(0, 6.0)

    def texture(x: np.ndarray, y: np.ndarray, footprint_m: np.ndarray) -> np.ndarray:
        val = np.zeros_like(x)
        for per, a, p, amp in zip(periods, angles, phases, amps):
            fade = np.exp(-((footprint_m / per / 0.35) ** 2))
            val += amp * fade * np.sin(2 * math.pi / per * (x * math.cos(a) + y * math.sin(a)) + p)
        rel = y - road_y
        on_road = _soft_band(rel, ROAD_HALF_WIDTH, footprint_m)[..., None]
        rgb = on_road * asphalt + (1 - on_road) * verge + val[..., None]
        paint = _soft_band(np.abs(rel) - (ROAD_HALF_WIDTH - 0.25), 0.075, footprint_m)
        dashes = ((x + dash_phase) % 6.0) < 3.0
        paint = np.maximum(paint, _soft_band(rel, 0.075, footprint_m) * dashes)
        rgb = rgb * (1 - paint[..., None]) + 0.9 * paint[..., None]
        return np.clip(rgb, 0.0, 1.0)

    return texture


ROAD_HALF_WIDTH = 3.5  # m; two 3.5 m lanes


def generate_scene(config: SceneGenConfig, rng: np.random.Generator, pose: CameraPose | None = None) -> SceneSample:
    """Render one scene; the pose is drawn uniformly from the pose ranges unless given."""
    config.validate()
    if pose is None:
        pose = CameraPose(
            azimuth_deg=float(rng.uniform(*AZIMUTH_RANGE)) % 360.0,
            distance_m=float(rng.uniform(*DISTANCE_RANGE)),
            height_m=float(rng.uniform(*HEIGHT_RANGE)),
        )
    weights = np.asarray(config.weather_weights, dtype=np.float64)
    weather = WEATHERS[int(rng.choice(len(WEATHERS), p=weights / weights.sum()))]
    paint = np.asarray(config.paint_colors[int(rng.integers(len(config.paint_colors)))])
    # object drives in one lane of a road along +x
    ground_tex = _ground_texture(rng, road_y=-ROAD_HALF_WIDTH / 2 + float(rng.uniform(-0.3, 0.3)))
    sky_zenith = np.array([0.35, 0.55, 0.85]) + rng.uniform(-0.05, 0.05, size=3)
    sky_horizon = np.array([0.75, 0.82, 0.9]) + rng.uniform(-0.05, 0.05, size=3)

    camera = camera_from_pose(pose, config)
    rays = camera.ray_directions()
    origin = camera.position
    H, W = config.height, config.width
    sun = np.asarray(config.sun_direction, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)

    # Background layer: ground, distractors, sky.
    t_ground = _ground_hit(origin, rays)
    depth_bg = t_ground.copy()
    p = origin + np.where(np.isfinite(t_ground), t_ground, 0.0)[..., None] * rays
    elev = rays[..., 2] / np.linalg.norm(rays, axis=-1)
    # meters of ground covered by one pixel, along the foreshortened direction
    ground_fp = np.where(np.isfinite(t_ground), t_ground, 0.0) / camera.focal_px / np.clip(-elev, 0.02, 1.0)
    ground_rgb = ground_tex(p[..., 0], p[..., 1], ground_fp)
    sky_w = np.clip(elev, 0.0, 1.0)[..., None] ** 0.6
    sky_rgb = (1 - sky_w) * sky_horizon + sky_w * sky_zenith
    background = np.where(np.isfinite(t_ground)[..., None], ground_rgb, sky_rgb)
    for f in _distractor_faces(rng, config, camera):
        t, _, _, hit = intersect_face(origin, rays, f)
        closer = hit & (t < depth_bg)
        shade = 0.35 + 0.3 * max(0.0, float(f.normal @ sun))
        background[closer] = np.array([0.5, 0.45, 0.4]) * shade / 0.5
        depth_bg = np.where(closer, t, depth_bg)
    background = np.clip(background, 0.0, 1.0)

    # Object layer.
    depth = depth_bg.copy()
    mask = np.zeros((H, W), dtype=bool)
    uv = np.zeros((H, W, 2))
    visibility = np.zeros((H, W))
    base = np.zeros((H, W, 3))
    ray_norm = np.linalg.norm(rays, axis=-1)
    for f in config.template:
        t, s, q, hit = intersect_face(origin, rays, f)
        closer = hit & (t < depth)
        if not closer.any():
            continue
        depth = np.where(closer, t, depth)
        mask |= closer
        uv[closer] = np.stack([s[closer], q[closer]], axis=-1) / config.texture_extent_m
        cos = np.abs(rays[closer] @ f.normal) / ray_norm[closer]
        visibility[closer] = np.clip(cos / config.grazing_cos, 0.0, 1.0)
        shade = 0.55 + 0.45 * max(0.0, float(f.normal @ sun))
        base[closer] = paint * shade
    uv = np.clip(uv, 0.0, 1.0) * mask[..., None]
    visibility = visibility * mask
    base = np.clip(base, 0.0, 1.0) * mask[..., None]
    gt_depth = np.minimum(depth, config.max_depth)

    return SceneSample(
        background=background,
        mask=mask,
        uv_map=uv,
        visibility=visibility,
        gt_depth=gt_depth,
        base_color=base,
        pose=pose,
        weather=weather,
    )


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for sample ``index`` of a dataset with master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_dataset(config: SceneGenConfig, count: int, seed: int) -> SceneSet:
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = [generate_scene(config, sample_rng(seed, i)) for i in range(count)]
    meta = {"config": config.to_dict(), "seed": int(seed), "count": int(count)}
    # JSON-normalized so a saved and reloaded set compares equal
    return SceneSet(samples, json.loads(json.dumps(meta)))


# --------------------------------------------------------------------------- persistence


def _sample_to_bytes(sample: SceneSample) -> bytes:
    buf = io.BytesIO()
    np.savez(
        buf,
        **{k: getattr(sample, k) for k in _ARRAY_FIELDS},
        pose=np.array([sample.pose.azimuth_deg, sample.pose.distance_m, sample.pose.height_m]),
        weather=np.array(sample.weather),
    )
    return _SAMPLE_MAGIC + struct.pack("<I", FORMAT_VERSION) + buf.getvalue()


def _sample_from_bytes(data: bytes, name: str) -> SceneSample:
    header = len(_SAMPLE_MAGIC) + 4
    if len(data) < header:
        raise SceneSetCorruptError(f"{name}: truncated header")
    magic, (version,) = data[: len(_SAMPLE_MAGIC)], struct.unpack("<I", data[len(_SAMPLE_MAGIC) : header])
    if magic != _SAMPLE_MAGIC or version != FORMAT_VERSION:
        raise SceneSetVersionError(f"{name}: unsupported sample format (magic={magic!r}, version={version})")
    try:
        with np.load(io.BytesIO(data[header:]), allow_pickle=False) as z:
            arrays = {k: z[k] for k in _ARRAY_FIELDS}
            pose = z["pose"]
            weather = str(z["weather"])
    except Exception as exc:  # zip/npy decoding failures
        raise SceneSetCorruptError(f"{name}: {exc}") from exc
    return SceneSample(
        **arrays, pose=CameraPose(float(pose[0]), float(pose[1]), float(pose[2])), weather=weather
    )


def save_dataset(scenes: SceneSet, path: str | Path) -> Path:
    """Write ``scenes`` as a directory of per-sample containers plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    H, W = scenes.samples[0].shape
    files = []
    for i, sample in enumerate(scenes.samples):
        name = f"sample_{i:05d}.bin"
        data = _sample_to_bytes(sample)
        (path / name).write_bytes(data)
        files.append({"name": name, "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {
        "magic": FORMAT_MAGIC,
        "version": FORMAT_VERSION,
        "seed": scenes.meta.get("seed"),
        "count": len(scenes),
        "H": H,
        "W": W,
        "meta": scenes.meta,
        "files": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(path: str | Path) -> SceneSet:
    """Load and verify a dataset directory; raises before returning anything partial."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise SceneSetNotFoundError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneSetCorruptError(f"unreadable manifest: {exc}") from exc
    if manifest.get("magic") != FORMAT_MAGIC or manifest.get("version") != FORMAT_VERSION:
        raise SceneSetVersionError(
            f"manifest format {manifest.get('magic')!r} v{manifest.get('version')} "
            f"(expected {FORMAT_MAGIC!r} v{FORMAT_VERSION})"
        )
    files = manifest.get("files", [])
    if len(files) != manifest.get("count"):
        raise SceneSetCorruptError("manifest count does not match its file list")
    samples = []
    for entry in files:
        fpath = path / entry["name"]
        if not fpath.is_file():
            raise SceneSetNotFoundError(f"missing sample file {fpath}")
        data = fpath.read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            # A bad header is a format problem even if the checksum also fails.
            if len(data) >= len(_SAMPLE_MAGIC) and data[: len(_SAMPLE_MAGIC)] != _SAMPLE_MAGIC:
                raise SceneSetVersionError(f"{entry['name']}: unrecognized sample header")
            raise SceneSetCorruptError(f"{entry['name']}: checksum mismatch")
        samples.append(_sample_from_bytes(data, entry["name"]))
    meta = manifest["meta"]
    scenes = SceneSet(samples, meta)
    if scenes.samples[0].shape != (manifest["H"], manifest["W"]):
        raise SceneSetCorruptError("manifest image size does not match samples")
    return scenes


def dataset_checksum(path: str | Path) -> str:
    """Digest of a saved dataset's manifest (which itself lists per-file checksums)."""
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()
