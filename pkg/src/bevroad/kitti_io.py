"""
KITTI-Road on-disk formats.

Readers for Velodyne binaries, calibration text and ground-truth PNGs, dataset
discovery, and the PNG emitters used for confidence maps and evaluation
overlays.

Layout expected under a dataset root::

    image_2/<prefix>_<id>.png
    velodyne/<prefix>_<id>.bin
    calib/<prefix>_<id>.txt
    gt_image_2/<prefix>_road_<id>.png      (optional)

with ``prefix`` one of ``uu``, ``um``, ``umm``.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    CalibrationParseError,
    DatasetLayoutError,
    ImageFormatError,
    MalformedFileError,
    RangeError,
    ShapeError,
)

log = logging.getLogger(__name__)

CATEGORIES = ("UU", "UM", "UMM")

GREEN = (0, 255, 0)
RED = (255, 0, 0)
BLUE = (0, 0, 255)
GRAY = (128, 128, 128)


def quantize_unit(values) -> np.ndarray:
    """Map values in [0, 1] to 0..255, rounding half away from zero."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(255.0 * v + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    """LiDAR returns as an ``(N, 4)`` float64 array of ``x, y, z, intensity``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ShapeError(f"point array must be (N, 4), got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class Calibration:
    p_cam: np.ndarray  # 3x4
    r_rect: np.ndarray  # 3x3
    tr_velo_to_cam: np.ndarray  # 3x4

    def orthonormality_error(self) -> tuple[float, float]:
        """Max deviation of ``R R^T`` from identity for r_rect and the velo rotation."""
        eye = np.eye(3)
        rot = self.tr_velo_to_cam[:, :3]
        return (
            float(np.abs(self.r_rect @ self.r_rect.T - eye).max()),
            float(np.abs(rot @ rot.T - eye).max()),
        )


@dataclass(frozen=True)
class SceneRef:
    id: str
    category: str
    image: Path
    velodyne: Path
    calib: Path
    gt: Path | None = None


@dataclass
class GtMaskPair:
    """Road labels plus the mask of pixels that take part in evaluation."""

    road: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.road = np.asarray(self.road, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.road.shape != self.valid.shape:
            raise ShapeError(f"road {self.road.shape} and valid {self.valid.shape} differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.road.shape

    def fliplr(self) -> "GtMaskPair":
        return GtMaskPair(self.road[:, ::-1].copy(), self.valid[:, ::-1].copy())


@dataclass
class SkipReport:
    """Scenes left out by :func:`discover_dataset`, with the reason for each."""

    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.skipped)


# ---------------------------------------------------------------------------
# Velodyne binaries
# ---------------------------------------------------------------------------


def parse_point_cloud(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise MalformedFileError(
            f"velodyne payload of {len(data)} bytes is not a multiple of 16"
        )
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise MalformedFileError(f"non-finite value in point {idx}")
    return PointCloud(pts)


def serialize_point_cloud(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


def read_point_cloud(path: str | os.PathLike) -> PointCloud:
    try:
        return parse_point_cloud(Path(path).read_bytes())
    except MalformedFileError as exc:
        raise MalformedFileError(f"{path}: {exc}") from None


def write_point_cloud(path: str | os.PathLike, cloud: PointCloud) -> None:
    Path(path).write_bytes(serialize_point_cloud(cloud))


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def load_calibration(text: str) -> Calibration:
    """Parse KITTI calibration text; unknown keys are ignored."""
    found: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        shape = _CALIB_KEYS[key]
        try:
            values = [float(tok) for tok in rest.split()]
        except ValueError:
            raise CalibrationParseError(f"line {lineno}: non-numeric value for {key}") from None
        if len(values) != shape[0] * shape[1]:
            raise CalibrationParseError(
                f"{key} needs {shape[0] * shape[1]} floats, got {len(values)}"
            )
        found[key] = np.array(values, dtype=np.float64).reshape(shape)
    for key in _CALIB_KEYS:
        if key not in found:
            raise CalibrationParseError(f"missing calibration key {key}")
    return Calibration(found["P2"], found["R0_rect"], found["Tr_velo_to_cam"])


def format_calibration(calib: Calibration) -> str:
    lines = []
    for key, mat in (
        ("P2", calib.p_cam),
        ("R0_rect", calib.r_rect),
        ("Tr_velo_to_cam", calib.tr_velo_to_cam),
    ):
        lines.append(key + ": " + " ".join(repr(float(v)) for v in np.ravel(mat)))
    return "\n".join(lines) + "\n"


def read_calibration(path: str | os.PathLike) -> Calibration:
    try:
        return load_calibration(Path(path).read_text())
    except CalibrationParseError as exc:
        raise CalibrationParseError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------------


def read_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return np.asarray(img, dtype=np.uint8).copy()


def write_png(path: str | os.PathLike, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 image, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def decode_gt_perspective(image: np.ndarray) -> GtMaskPair:
    """Decode a KITTI ground-truth image: red marks valid, red+blue marks road."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImageFormatError(
            f"ground truth must be 8-bit RGB, got shape {img.shape} dtype {img.dtype}"
        )
    valid = img[:, :, 0] == 255
    road = valid & (img[:, :, 2] == 255)
    return GtMaskPair(road, valid)


def encode_gt(gt: GtMaskPair) -> np.ndarray:
    """Inverse of :func:`decode_gt_perspective` (magenta road, red background)."""
    out = np.zeros(gt.shape + (3,), dtype=np.uint8)
    out[gt.valid, 0] = 255
    out[gt.road & gt.valid, 2] = 255
    return out


def encode_confidence_png(conf: np.ndarray) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim == 3 and conf.shape[2] == 1:
        conf = conf[:, :, 0]
    if conf.ndim != 2:
        raise ShapeError(f"confidence map must be HxW, got {conf.shape}")
    if not np.all((conf >= 0.0) & (conf <= 1.0)):
        raise RangeError("confidence values must lie in [0, 1]")
    return quantize_unit(conf)


def encode_overlay_png(conf: np.ndarray, gt: GtMaskPair, threshold: float = 0.5) -> np.ndarray:
    """Colour each pixel by its confusion class.

    Green = true positive, red = false positive, blue = false negative,
    black = true negative, gray = outside the valid mask.
    """
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim == 3 and conf.shape[2] == 1:
        conf = conf[:, :, 0]
    if conf.shape != gt.shape:
        raise ShapeError(f"confidence {conf.shape} does not match ground truth {gt.shape}")
    pred = conf >= threshold
    out = np.zeros(conf.shape + (3,), dtype=np.uint8)
    out[pred & gt.road & gt.valid] = GREEN
    out[pred & ~gt.road & gt.valid] = RED
    out[~pred & gt.road & gt.valid] = BLUE
    out[~gt.valid] = GRAY
    return out


# ---------------------------------------------------------------------------
# Dataset discovery
# ---------------------------------------------------------------------------

_NAME_RE = re.compile(r"^(uu|um|umm)_(\d+)$")
REQUIRED_DIRS = ("image_2", "velodyne", "calib")


def parse_scene_name(stem: str) -> tuple[str, str] | None:
    """``'um_000012'`` -> ``('UM', '000012')``; ``None`` for foreign names."""
    m = _NAME_RE.match(stem)
    if not m:
        return None
    return m.group(1).upper(), m.group(2)


def discover_dataset(root: str | os.PathLike) -> tuple[list[SceneRef], SkipReport]:
    root = Path(root)
    for sub in REQUIRED_DIRS:
        if not (root / sub).is_dir():
            raise DatasetLayoutError(f"{root} has no {sub}/ directory")

    report = SkipReport()
    scenes = []
    for img in sorted((root / "image_2").glob("*.png")):
        parsed = parse_scene_name(img.stem)
        if parsed is None:
            report.skipped.append((img.stem, "unrecognised file name"))
            continue
        category, num = parsed
        velo = root / "velodyne" / f"{img.stem}.bin"
        calib = root / "calib" / f"{img.stem}.txt"
        missing = [p.parent.name for p in (velo, calib) if not p.is_file()]
        if missing:
            report.skipped.append((img.stem, "missing " + ", ".join(missing)))
            continue
        gt = root / "gt_image_2" / f"{category.lower()}_road_{num}.png"
        scenes.append(SceneRef(img.stem, category, img, velo, calib, gt if gt.is_file() else None))

    for sid, reason in report.skipped:
        log.warning("skipping scene %s: %s", sid, reason)
    scenes.sort(key=lambda s: s.id)
    return scenes, report
