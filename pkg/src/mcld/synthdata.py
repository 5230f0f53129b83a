"""Procedural articulated figures with exact dense-pose maps.

A figure has ten parts. Every part except the head is an oriented
rectangle hanging from a joint; the head is an axis-aligned pixel square
painted last, so its bounding box *is* the face box and contains no other
part. Colours are analytic functions of (part, u, v, seed), which makes
source/target pairs share appearance by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .persistence import read_archive, read_ppm, write_archive, write_ppm

NUM_PARTS = 10
PART_NAMES = (
    "head", "torso",
    "upper_arm_l", "upper_arm_r", "forearm_l", "forearm_r",
    "thigh_l", "thigh_r", "shin_l", "shin_r",
)
PART_IDS = {name: i + 1 for i, name in enumerate(PART_NAMES)}
HEAD, TORSO = 1, 2

JOINT_NAMES = ("shoulder_l", "shoulder_r", "elbow_l", "elbow_r", "hip_l", "hip_r", "knee_l", "knee_r")
# Radians from straight down, positive towards +x. Limits keep limbs below
# the shoulder line most of the time without forbidding crossings.
JOINT_LIMITS = np.array([
    (-1.6, 0.2), (-0.2, 1.6),
    (-1.2, 1.2), (-1.2, 1.2),
    (-0.6, 0.15), (-0.15, 0.6),
    (-0.8, 0.8), (-0.8, 0.8),
])

# Lengths/widths as fractions of scaled canvas height.
_TORSO = (0.30, 0.20)
_UPPER_ARM = (0.17, 0.07)
_FOREARM = (0.16, 0.06)
_THIGH = (0.22, 0.09)
_SHIN = (0.21, 0.08)
_HEAD = 0.20

# Parts sharing a garment share a texture.
_GARMENT = {2: 0, 3: 1, 4: 1, 5: 2, 6: 2, 7: 3, 8: 3, 9: 4, 10: 4}
_PAINT_ORDER = (7, 8, 9, 10, TORSO, 3, 4, 5, 6, HEAD)
BACKGROUND = np.float32(217) / np.float32(255.0)
IDENTITY_GRID = 4


@dataclass(frozen=True)
class PoseParams:
    joint_angles: tuple[float, ...]
    root_xy: tuple[float, float]
    scale: float

    def __post_init__(self):
        if len(self.joint_angles) != len(JOINT_NAMES):
            raise ValueError(f"expected {len(JOINT_NAMES)} joint angles, got {len(self.joint_angles)}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        for name, a, (lo, hi) in zip(JOINT_NAMES, self.joint_angles, JOINT_LIMITS):
            if not lo - 1e-9 <= a <= hi + 1e-9:
                raise ValueError(f"joint {name} angle {a:.3f} outside limits [{lo}, {hi}]")


@dataclass(frozen=True)
class PersonSpec:
    identity_seed: int
    texture_seed: int
    pose: PoseParams
    canvas: tuple[int, int] = (64, 64)
    factor: int = 4

    def validate(self) -> None:
        h, w = self.canvas
        if h < 32 or w < 32:
            raise ValueError(f"canvas {h}x{w} too small: need at least 32x32")
        if h % self.factor or w % self.factor:
            raise ValueError(f"canvas {h}x{w} not divisible by downsample factor {self.factor}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pose"]["joint_angles"] = list(self.pose.joint_angles)
        d["pose"]["root_xy"] = list(self.pose.root_xy)
        d["canvas"] = list(self.canvas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PersonSpec":
        pose = d["pose"]
        return cls(
            identity_seed=int(d["identity_seed"]),
            texture_seed=int(d["texture_seed"]),
            pose=PoseParams(tuple(pose["joint_angles"]), tuple(pose["root_xy"]), float(pose["scale"])),
            canvas=tuple(d["canvas"]),
            factor=int(d.get("factor", 4)),
        )


@dataclass
class DensePoseMap:
    part: np.ndarray  # H x W int64, 0 = background
    uv: np.ndarray  # H x W x 2 float32

    @property
    def shape(self) -> tuple[int, int]:
        return self.part.shape


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    dpmap: DensePoseMap
    face_box: tuple[int, int, int, int]  # x0, y0, x1, y1 with exclusive ends
    spec: PersonSpec
    clamped: bool = False
    part_pixels: np.ndarray = field(default=None)  # K+1 pixel counts per part id


@dataclass(frozen=True)
class Rect:
    origin: np.ndarray  # joint point, px
    direction: np.ndarray  # unit vector along the part
    length: float
    width: float

    @property
    def normal(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])

    def corners(self) -> np.ndarray:
        n = self.normal * self.width / 2
        end = self.origin + self.direction * self.length
        return np.stack([self.origin - n, self.origin + n, end - n, end + n])


def _dir(angle: float) -> np.ndarray:
    return np.array([np.sin(angle), np.cos(angle)])


def _layout(spec: PersonSpec, offset=(0.0, 0.0)):
    """Part rectangles and the integer head box for a pose."""
    h_canvas = spec.canvas[0]
    h = h_canvas * spec.pose.scale
    rx, ry = spec.pose.root_xy[0] + offset[0], spec.pose.root_xy[1] + offset[1]
    a = spec.pose.joint_angles
    lt, wt = _TORSO[0] * h, _TORSO[1] * h
    neck = np.array([rx, ry - lt])
    rects: dict[int, Rect] = {TORSO: Rect(neck, np.array([0.0, 1.0]), lt, wt)}
    for side, sign in ((0, -1.0), (1, 1.0)):
        shoulder = neck + np.array([sign * (wt / 2 + _UPPER_ARM[1] * h / 2), 0.04 * h])
        d_upper = _dir(a[0 + side])
        rects[3 + side] = Rect(shoulder, d_upper, _UPPER_ARM[0] * h, _UPPER_ARM[1] * h)
        elbow = shoulder + d_upper * _UPPER_ARM[0] * h
        rects[5 + side] = Rect(elbow, _dir(a[0 + side] + a[2 + side]), _FOREARM[0] * h, _FOREARM[1] * h)
        hip = np.array([rx + sign * wt / 4, ry])
        d_thigh = _dir(a[4 + side])
        rects[7 + side] = Rect(hip, d_thigh, _THIGH[0] * h, _THIGH[1] * h)
        knee = hip + d_thigh * _THIGH[0] * h
        rects[9 + side] = Rect(knee, _dir(a[4 + side] + a[6 + side]), _SHIN[0] * h, _SHIN[1] * h)
    size = max(2, int(round(_HEAD * h)))
    x0 = int(round(neck[0] - size / 2))
    y0 = int(round(neck[1] - size))
    head = (x0, y0, x0 + size, y0 + size)
    return rects, head


def figure_layout(spec: PersonSpec):
    """Layout after clamping the figure into the canvas.

    Returns (rects, head_box, clamped).
    """
    rects, head = _layout(spec)
    pts = np.concatenate([r.corners() for r in rects.values()]
                         + [np.array([[head[0], head[1]], [head[2], head[3]]], dtype=float)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    h, w = spec.canvas
    shift = np.zeros(2)
    for axis, limit in ((0, w), (1, h)):
        if lo[axis] < 0:
            shift[axis] = -lo[axis]
        elif hi[axis] > limit:
            shift[axis] = limit - hi[axis]
    if not shift.any():
        return rects, head, False
    # integer shift keeps the head square on the pixel grid
    shift = np.where(shift > 0, np.ceil(shift), np.floor(shift))
    rects, head = _layout(spec, offset=tuple(shift))
    return rects, head, True


def _palette_color(rng: np.random.Generator, n: int = 1) -> np.ndarray:
    return rng.integers(0, 256, size=(n, 3)).astype(np.uint8).astype(np.float32) / np.float32(255.0)


def identity_colors(identity_seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(identity_seed), 0x1D])
    return _palette_color(rng, IDENTITY_GRID * IDENTITY_GRID).reshape(IDENTITY_GRID, IDENTITY_GRID, 3)


def garment_pattern(texture_seed: int, garment: int) -> dict:
    rng = np.random.default_rng([int(texture_seed), 0x7E, garment])
    c0 = _palette_color(rng)[0]
    c1 = _palette_color(rng)[0]
    while np.abs(c0 - c1).sum() < 0.6:
        c1 = _palette_color(rng)[0]
    return {"colors": (c0, c1), "kind": int(rng.integers(0, 3)), "freq": int(rng.integers(2, 5))}


def part_color(spec: PersonSpec, part: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Analytic colour of body-surface points of one part, shape (..., 3)."""
    u = np.asarray(u)
    v = np.asarray(v)
    if part == HEAD:
        grid = identity_colors(spec.identity_seed)
        iu = np.clip((u * IDENTITY_GRID).astype(int), 0, IDENTITY_GRID - 1)
        iv = np.clip((v * IDENTITY_GRID).astype(int), 0, IDENTITY_GRID - 1)
        return grid[iv, iu]
    pat = garment_pattern(spec.texture_seed, _GARMENT[part])
    n = pat["freq"]
    cu = np.floor(u * n).astype(int)
    cv = np.floor(v * n).astype(int)
    if pat["kind"] == 0:
        parity = cu % 2
    elif pat["kind"] == 1:
        parity = cv % 2
    else:
        parity = (cu + cv) % 2
    c0, c1 = pat["colors"]
    return np.where(parity[..., None] == 0, c0, c1).astype(np.float32)


def render(spec: PersonSpec) -> Sample:
    spec.validate()
    h, w = spec.canvas
    rects, head, clamped = figure_layout(spec)
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    part = np.zeros((h, w), dtype=np.int64)
    uv = np.zeros((h, w, 2), dtype=np.float32)
    image = np.full((h, w, 3), BACKGROUND, dtype=np.float32)
    for k in _PAINT_ORDER:
        if k == HEAD:
            x0, y0, x1, y1 = head
            size = x1 - x0
            u = (px - x0) / size
            v = (py - y0) / size
            inside = (px > x0) & (px < x1) & (py > y0) & (py < y1)
        else:
            r = rects[k]
            dx, dy = px - r.origin[0], py - r.origin[1]
            along = dx * r.direction[0] + dy * r.direction[1]
            across = dx * r.normal[0] + dy * r.normal[1]
            u = along / r.length
            v = across / r.width + 0.5
            inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
        if not inside.any():
            continue
        part[inside] = k
        uv[inside, 0] = u[inside]
        uv[inside, 1] = v[inside]
        image[inside] = part_color(spec, k, u[inside], v[inside])
    x0, y0, x1, y1 = head
    box = (max(x0, 0), max(y0, 0), min(x1, w), min(y1, h))
    counts = np.bincount(part.ravel(), minlength=NUM_PARTS + 1)
    return Sample(image=image, dpmap=DensePoseMap(part, uv), face_box=box, spec=spec,
                  clamped=clamped, part_pixels=counts)


def uv_to_pixel(spec: PersonSpec, part: int, u, v) -> np.ndarray:
    """Analytic inverse of the dense-pose map: surface (u, v) -> pixel coords.

    Pixel (i, j) has its centre at (j + 0.5, i + 0.5) in the returned (x, y) frame.
    """
    rects, head, _ = figure_layout(spec)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if part == HEAD:
        x0, y0, x1, _ = head
        size = x1 - x0
        return np.stack([x0 + u * size, y0 + v * size], axis=-1)
    r = rects[part]
    along = u * r.length
    across = (v - 0.5) * r.width
    return (r.origin + along[..., None] * r.direction + across[..., None] * r.normal)


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class DatasetConfig:
    canvas: tuple[int, int] = (64, 64)
    factor: int = 4
    identity_pool: int = 32
    base_seed: int = 0


def random_pose(rng: np.random.Generator, canvas: tuple[int, int]) -> PoseParams:
    h, w = canvas
    angles = tuple(float(rng.uniform(lo, hi)) for lo, hi in JOINT_LIMITS)
    scale = float(rng.uniform(0.78, 0.92))
    hs = h * scale
    # centre the figure's vertical extent (head top .. feet)
    top = (_TORSO[0] + _HEAD) * hs
    bottom = (_THIGH[0] + _SHIN[0]) * hs
    root_y = (h - top - bottom) / 2 + top + rng.uniform(-0.03, 0.03) * h
    root_x = w / 2 + rng.uniform(-0.08, 0.08) * w
    return PoseParams(angles, (float(root_x), float(root_y)), scale)


def sample_pair(rng_seed: int, cfg: DatasetConfig = DatasetConfig()) -> tuple[Sample, Sample]:
    """Two renders of one person (identity + texture) in different poses."""
    rng = np.random.default_rng([int(rng_seed), 0x5A])
    identity_seed = int(rng.integers(0, cfg.identity_pool))
    texture_seed = int(rng.integers(0, 2**62))
    pose_s = random_pose(rng, cfg.canvas)
    pose_t = random_pose(rng, cfg.canvas)
    src = render(PersonSpec(identity_seed, texture_seed, pose_s, cfg.canvas, cfg.factor))
    tgt = render(PersonSpec(identity_seed, texture_seed, pose_t, cfg.canvas, cfg.factor))
    return src, tgt


# ---------------------------------------------------------------- on disk

MANIFEST_VERSION = 1


def save_sample(sample: Sample, prefix: Path) -> list[str]:
    prefix = Path(prefix)
    img_path = prefix.with_name(prefix.name + ".ppm")
    dp_path = prefix.with_name(prefix.name + ".mcld")
    try:
        write_ppm(img_path, sample.image)
        write_archive(dp_path,
                      {"dpmap.part": sample.dpmap.part.astype(np.uint8), "dpmap.uv": sample.dpmap.uv},
                      {"face_box": list(sample.face_box), "spec": sample.spec.to_dict(),
                       "clamped": sample.clamped})
    except OSError as exc:
        raise OSError(f"failed writing sample {prefix}: {exc}") from exc
    return [img_path.name, dp_path.name]


def load_sample(prefix) -> Sample:
    prefix = Path(prefix)
    image = read_ppm(prefix.with_name(prefix.name + ".ppm"))
    tensors, meta = read_archive(prefix.with_name(prefix.name + ".mcld"))
    part = tensors["dpmap.part"].astype(np.int64)
    return Sample(image=image, dpmap=DensePoseMap(part, tensors["dpmap.uv"].astype(np.float32)),
                  face_box=tuple(meta["face_box"]), spec=PersonSpec.from_dict(meta["spec"]),
                  clamped=bool(meta.get("clamped", False)),
                  part_pixels=np.bincount(part.ravel(), minlength=NUM_PARTS + 1))


def make_dataset(cfg: DatasetConfig, n: int, out_dir) -> dict:
    """Write `n` pairs; pair i depends only on base_seed + i."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        src, tgt = sample_pair(cfg.base_seed + i, cfg)
        sid = f"{i:06d}"
        entries.append({
            "id": sid,
            "source_files": save_sample(src, out / f"{sid}_src"),
            "target_files": save_sample(tgt, out / f"{sid}_tgt"),
            "specs": {"source": src.spec.to_dict(), "target": tgt.spec.to_dict()},
        })
    manifest = {"version": MANIFEST_VERSION, "base_seed": cfg.base_seed, "count": n,
                "canvas": list(cfg.canvas), "identity_pool": cfg.identity_pool, "entries": entries}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    return manifest


def load_dataset(data_dir) -> list[tuple[Sample, Sample]]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text("utf-8"))
    return [(load_sample(data_dir / f"{e['id']}_src"), load_sample(data_dir / f"{e['id']}_tgt"))
            for e in manifest["entries"]]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
