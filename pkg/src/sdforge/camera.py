"""Six-view camera rig, per-view image containers and view-directory I/O.

World space is z-up.  A view at azimuth ``a`` and elevation ``e`` sits at
``distance * (cos e cos a, cos e sin a, sin e)`` and looks at the origin.
Camera space is right-handed with x right, y down, z forward, so camera-space
depth is positive in front of the camera.  Image rows grow downwards; pixel ``(row, col)`` has
its centre at ``(col + 0.5, row + 0.5)`` in screen coordinates.

Normal images are world-space unit vectors.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ParameterError

RIG_AZIMUTH_OFFSET = 30.0
RIG_ELEVATIONS = (20.0, -10.0)
DEFAULT_FOV = 40.0
NEAR = 1e-3
CAMERAS_SCHEMA = 1


@dataclass(frozen=True)
class View:
    azimuth: float
    elevation: float
    distance: float
    fov_y: float = DEFAULT_FOV
    width: int = 64
    height: int = 64

    def __post_init__(self) -> None:
        if not self.distance > 0 or not 0 < self.fov_y < 180:
            raise ParameterError("distance must be positive and fov_y in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise ParameterError("image size must be positive")

    @cached_property
    def position(self) -> np.ndarray:
        a, e = math.radians(self.azimuth), math.radians(self.elevation)
        return self.distance * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])

    @cached_property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera right, down and forward axes."""
        fwd = -self.position / np.linalg.norm(self.position)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        cam_up = np.cross(right, fwd)
        return np.stack([right, -cam_up, fwd])

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2)

    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = -self.rotation @ self.position
        return m

    def to_camera(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.position) @ self.rotation.T

    def project(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Screen coordinates ``(..., 2)`` as (col, row) and camera depth of world points."""
        c = self.to_camera(p)
        z = c[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            sx = 0.5 * self.width + self.focal * c[..., 0] / z
            sy = 0.5 * self.height + self.focal * c[..., 1] / z
        return np.stack([sx, sy], axis=-1), z

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray directions through every pixel centre, ``(H, W, 3)``."""
        cols = (np.arange(self.width) + 0.5 - 0.5 * self.width) / self.focal
        rows = (np.arange(self.height) + 0.5 - 0.5 * self.height) / self.focal
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = cols[None, :]
        d[..., 1] = rows[:, None]
        d[..., 2] = 1.0
        d = d @ self.rotation
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def resized(self, width: int, height: int | None = None) -> "View":
        return replace(self, width=width, height=height or width)

    def to_dict(self) -> dict:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "distance": self.distance,
            "fov_y": self.fov_y,
            "width": self.width,
            "height": self.height,
            "world_to_camera": self.world_to_camera().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "View":
        return cls(d["azimuth"], d["elevation"], d["distance"], d["fov_y"], d["width"], d["height"])


def make_rig(distance: float, image_size: int = 64, fov_y: float = DEFAULT_FOV) -> list[View]:
    """Six views at azimuths 30 + 60 i degrees, elevations alternating 20 / -10."""
    if not distance > 0 or not fov_y > 0:
        raise ParameterError("distance and fov_y must be positive")
    if image_size < 32:
        raise ParameterError(f"image_size must be >= 32, got {image_size}")
    return [
        View(RIG_AZIMUTH_OFFSET + 60.0 * i, RIG_ELEVATIONS[i % 2], distance, fov_y, image_size, image_size)
        for i in range(6)
    ]


def default_distance(object_radius: float) -> float:
    return 2.7 * object_radius


@dataclass
class ViewImages:
    view: View
    mask: np.ndarray | None = None
    normal: np.ndarray | None = None
    depth: np.ndarray | None = None
    color: np.ndarray | None = None


@dataclass
class ViewSet:
    items: list[ViewImages] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.items) != 6:
            raise ParameterError(f"a ViewSet holds exactly six views, got {len(self.items)}")

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> ViewImages:
        return self.items[i]

    @property
    def views(self) -> list[View]:
        return [it.view for it in self.items]

    def is_standard_rig(self) -> bool:
        for i, v in enumerate(self.views):
            if abs((v.azimuth - RIG_AZIMUTH_OFFSET - 60.0 * i) % 360.0) > 1e-9:
                return False
            if abs(v.elevation - RIG_ELEVATIONS[i % 2]) > 1e-9:
                return False
        return True


# --------------------------------------------------------------------------
# image files
# --------------------------------------------------------------------------

RAW_MAGIC = b"IMGF"
_RAW_HEADER = struct.Struct("<4sH3I")


def write_raw_image(arr: np.ndarray, path) -> None:
    """Lossless dump: ``IMGF``, u16 version, u32 height, width, channels, then f32 LE."""
    a = np.asarray(arr, dtype="<f4")
    h, w = a.shape[:2]
    c = 1 if a.ndim == 2 else a.shape[2]
    Path(path).write_bytes(_RAW_HEADER.pack(RAW_MAGIC, 1, h, w, c) + a.tobytes())


def read_raw_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, version, h, w, c = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC or version != 1:
        raise FormatError(f"{path}: not an IMGF v1 file")
    a = np.frombuffer(data[_RAW_HEADER.size:], dtype="<f4").astype(np.float64)
    return a.reshape((h, w) if c == 1 else (h, w, c))


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(_to_u8(mask), mode="L").save(path)


def save_color_png(color: np.ndarray, path) -> None:
    Image.fromarray(_to_u8(color), mode="RGB").save(path)


def save_normal_png(normal: np.ndarray, path) -> None:
    Image.fromarray(_to_u8((np.asarray(normal) + 1.0) * 0.5), mode="RGB").save(path)


def save_depth_png(depth: np.ndarray, mask: np.ndarray, path) -> dict:
    """16-bit depth; 0 is background, ``d = offset + scale * (v - 1)`` otherwise."""
    inside = np.asarray(mask) > 0.5
    d = np.asarray(depth, dtype=np.float64)
    if inside.any():
        lo, hi = float(d[inside].min()), float(d[inside].max())
    else:
        lo, hi = 0.0, 0.0
    scale = (hi - lo) / 65534.0 if hi > lo else 1.0
    v = np.zeros(d.shape, dtype=np.uint16)
    v[inside] = (1 + np.rint((d[inside] - lo) / scale)).astype(np.uint16)
    Image.fromarray(v).save(path)
    side = {"scale": scale, "offset": lo, "background": 0}
    Path(path).with_suffix(".json").write_text(json.dumps(side, indent=2) + "\n")
    return side


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def load_depth_png(path) -> np.ndarray:
    v = np.asarray(Image.open(path)).astype(np.float64)
    side = json.loads(Path(path).with_suffix(".json").read_text())
    return np.where(v > 0, side["offset"] + side["scale"] * (v - 1), 0.0)


def save_viewset(views, out_dir, kinds=("mask", "normal", "depth", "color")) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for kind in kinds:
        (out / kind).mkdir(exist_ok=True)
    cams = {"schema": CAMERAS_SCHEMA, "views": [it.view.to_dict() for it in views]}
    (out / "cameras.json").write_text(json.dumps(cams, indent=2) + "\n")
    for i, it in enumerate(views):
        name = f"view_{i}.png"
        if "mask" in kinds and it.mask is not None:
            save_mask_png(it.mask, out / "mask" / name)
        if "normal" in kinds and it.normal is not None:
            save_normal_png(it.normal, out / "normal" / name)
        if "depth" in kinds and it.depth is not None:
            save_depth_png(it.depth, it.mask, out / "depth" / name)
        if "color" in kinds and it.color is not None:
            save_color_png(it.color, out / "color" / name)


def load_viewset(in_dir, require=("mask", "normal")) -> ViewSet:
    """Read a view directory written by :func:`save_viewset`.

    Raises ``FileNotFoundError`` naming the first missing required path.
    """
    src = Path(in_dir)
    cam_path = src / "cameras.json"
    if not cam_path.is_file():
        raise FileNotFoundError(f"missing {cam_path}")
    cams = json.loads(cam_path.read_text())
    views = [View.from_dict(d) for d in cams["views"]]
    for kind in require:
        if not (src / kind).is_dir():
            raise FileNotFoundError(f"missing directory {src / kind}")
    items = []
    for i, v in enumerate(views):
        name = f"view_{i}.png"
        it = ViewImages(v)
        for kind in ("mask", "normal", "depth", "color"):
            p = src / kind / name
            if not p.is_file():
                if kind in require:
                    raise FileNotFoundError(f"missing {p}")
                continue
            if kind == "mask":
                it.mask = load_png(p).astype(np.float64) / 255.0
            elif kind == "normal":
                n = load_png(p)[..., :3].astype(np.float64) / 255.0 * 2.0 - 1.0
                norm = np.linalg.norm(n, axis=-1, keepdims=True)
                it.normal = np.where(norm > 0.5, n / np.maximum(norm, 1e-12), 0.0)
            elif kind == "depth":
                it.depth = load_depth_png(p)
            else:
                it.color = load_png(p)[..., :3].astype(np.float64) / 255.0
        if it.mask is not None and it.normal is not None:
            it.normal = np.where(it.mask[..., None] > 0.5, it.normal, 0.0)
        items.append(it)
    return ViewSet(items)
