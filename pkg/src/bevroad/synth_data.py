"""
Deterministic synthetic road scenes.

A scene is a flat ground plane with a straight or constant-curvature road
corridor. Road returns are darker (lower reflectance) than off-road returns
and the camera sees gray asphalt against green verge, which gives every
model variant a learnable signal.

Two outputs are available: in-memory BEV scenes (:func:`generate_scene`)
and a KITTI-Road style directory with perspective images, Velodyne
binaries, calibration and ground truth (:func:`write_kitti_layout`).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bev_raster import CAMERA_ROLES, BevImage, RasterConfig, rasterize
from .camera_warp import DEFAULT_Z_PLANE
from .kitti_io import (
    Calibration,
    GtMaskPair,
    PointCloud,
    encode_gt,
    format_calibration,
    write_png,
    write_point_cloud,
)

ROAD_RGB = (110.0, 110.0, 110.0)
VERGE_RGB = (70.0, 140.0, 60.0)
SKY_RGB = (135.0, 180.0, 235.0)
TEXTURE_STD = 12.0
INTENSITY_STD = 0.05
CATEGORY_CYCLE = ("UM", "UMM", "UU")
SHAPES = ("straight", "arc")


@dataclass(frozen=True)
class SynthParams:
    road_shape: str = "straight"
    road_width: float = 8.0
    curvature: float = 0.02
    point_density: float = 40.0
    road_intensity_mean: float = 0.2
    offroad_intensity_mean: float = 0.6
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.road_shape not in SHAPES:
            raise ValueError(f"road_shape must be one of {SHAPES}, got {self.road_shape!r}")
        if not 2.0 < self.road_width < 12.0:
            raise ValueError(f"road_width must lie in (2, 12) m, got {self.road_width}")
        if not self.point_density > 0:
            raise ValueError("point_density must be positive")
        for v in (self.road_intensity_mean, self.offroad_intensity_mean):
            if not 0.0 <= v <= 1.0:
                raise ValueError("intensity means must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass
class Scene:
    """Per-scene bundle consumed by training and evaluation."""

    id: str
    camera_bev: BevImage
    lidar_bev: BevImage
    gt: GtMaskPair
    category: str = "UM"
    cloud: PointCloud | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt.shape

    def fliplr(self) -> "Scene":
        return Scene(
            f"{self.id}_flip",
            self.camera_bev.fliplr(),
            self.lidar_bev.fliplr(),
            self.gt.fliplr(),
            self.category,
            None,
        )


def road_mask(x: np.ndarray, y: np.ndarray, params: SynthParams) -> np.ndarray:
    """Analytic corridor membership for metric ground coordinates."""
    half = params.road_width / 2.0
    if params.road_shape == "straight" or params.curvature == 0:
        return np.abs(y) < half
    radius = 1.0 / params.curvature
    # circle through the origin, tangent to +x, centred at (0, radius)
    dist = np.hypot(x, y - radius)
    return np.abs(dist - abs(radius)) < half


def sample_cloud(params: SynthParams, cfg: RasterConfig, rng: np.random.Generator, margin: float = 2.0) -> PointCloud:
    x0, x1 = cfg.x_min - margin, cfg.x_max + margin
    y0, y1 = cfg.y_min - margin, cfg.y_max + margin
    n = int(round(params.point_density * (x1 - x0) * (y1 - y0)))
    x = rng.uniform(x0, x1, n)
    y = rng.uniform(y0, y1, n)
    z = DEFAULT_Z_PLANE + rng.normal(0.0, params.noise_std, n) if params.noise_std else np.full(n, DEFAULT_Z_PLANE)
    on_road = road_mask(x, y, params)
    mean = np.where(on_road, params.road_intensity_mean, params.offroad_intensity_mean)
    intensity = np.clip(rng.normal(mean, INTENSITY_STD), 0.0, 1.0)
    return PointCloud(np.column_stack([x, y, z, intensity]))


def _texture(mask: np.ndarray, rng: np.random.Generator, inside=ROAD_RGB, outside=VERGE_RGB) -> np.ndarray:
    base = np.where(mask[..., None], np.array(inside), np.array(outside))
    noisy = base + rng.normal(0.0, TEXTURE_STD, base.shape)
    return np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8)


def generate_scene(
    params: SynthParams,
    cfg: RasterConfig | None = None,
    scene_id: str | None = None,
    category: str = "UM",
) -> Scene:
    cfg = cfg or RasterConfig()
    rng = np.random.default_rng(params.seed)
    cloud = sample_cloud(params, cfg, rng)
    lidar = rasterize(cloud, cfg)

    xs, ys = cfg.cell_centers()
    road = road_mask(xs, ys, params)
    camera = BevImage(_texture(road, rng), CAMERA_ROLES)
    gt = GtMaskPair(road, np.ones_like(road))
    sid = scene_id or f"{category.lower()}_{params.seed:06d}"
    return Scene(sid, camera, lidar, gt, category, cloud)


def dataset_params(n: int, base: SynthParams) -> list[tuple[str, str, SynthParams]]:
    """``(scene id, category, params)`` for scene ``i``: seed ``base.seed + i``, shapes alternate."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = []
    for i in range(n):
        cat = CATEGORY_CYCLE[i % len(CATEGORY_CYCLE)]
        p = replace(base, road_shape=SHAPES[i % 2], seed=base.seed + i)
        out.append((f"{cat.lower()}_{i:06d}", cat, p))
    return out


def generate_dataset(n: int, base_params: SynthParams | None = None, cfg: RasterConfig | None = None) -> list[Scene]:
    base_params = base_params or SynthParams()
    return [generate_scene(p, cfg, sid, cat) for sid, cat, p in dataset_params(n, base_params)]


# ---------------------------------------------------------------------------
# KITTI-style perspective rendering
# ---------------------------------------------------------------------------

SYNTH_IMAGE_SHAPE = (400, 800)
SYNTH_FOCAL = 230.0
SYNTH_CAMERA_HEIGHT = 8.0


def synthetic_calibration(
    image_shape: tuple[int, int] = SYNTH_IMAGE_SHAPE,
    focal: float = SYNTH_FOCAL,
    camera_height: float = SYNTH_CAMERA_HEIGHT,
    cy: float = 20.0,
) -> Calibration:
    """Forward-looking pinhole camera above the LiDAR origin, optical axis along +x.

    The principal point sits on the middle column so a left-right mirrored
    image corresponds to a mirrored scene. Defaults cover the whole default
    region of interest.
    """
    _, w = image_shape
    cx = (w - 1) / 2.0
    p = np.array([[focal, 0.0, cx, 0.0], [0.0, focal, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    # camera x = -velo y, camera y = -(velo z - height), camera z = velo x
    tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, camera_height], [1.0, 0.0, 0.0, 0.0]])
    return Calibration(p, np.eye(3), tr)


def ground_hits(calib: Calibration, image_shape: tuple[int, int], z_plane: float = DEFAULT_Z_PLANE):
    """Ground-plane point seen through each pixel centre: ``(x, y, hit)``."""
    h, w = image_shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    k = calib.p_cam[:, :3]
    rays_rect = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(k).T
    rays_cam = rays_rect @ calib.r_rect  # r_rect^T applied to row vectors
    rot, t = calib.tr_velo_to_cam[:, :3], calib.tr_velo_to_cam[:, 3]
    dirs = rays_cam @ rot  # rot^T d
    origin = -rot.T @ t
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (z_plane - origin[2]) / dz
    hit = (dz < 0) & (s > 0)
    s = np.where(hit, s, 0.0)
    x = origin[0] + s * dirs[..., 0]
    y = origin[1] + s * dirs[..., 1]
    return x, y, hit


def render_perspective(
    params: SynthParams, calib: Calibration, image_shape: tuple[int, int], rng: np.random.Generator
) -> tuple[np.ndarray, GtMaskPair]:
    x, y, hit = ground_hits(calib, image_shape)
    road = hit & road_mask(x, y, params)
    img = _texture(road, rng)
    sky = _texture(np.zeros_like(road), rng, outside=SKY_RGB)
    img[~hit] = sky[~hit]
    return img, GtMaskPair(road, np.ones_like(road))


def write_kitti_layout(
    root: str | os.PathLike,
    n: int,
    base_params: SynthParams | None = None,
    cfg: RasterConfig | None = None,
    image_shape: tuple[int, int] = SYNTH_IMAGE_SHAPE,
) -> list[str]:
    """Write ``n`` synthetic scenes in the on-disk layout dataset discovery expects."""
    base_params = base_params or SynthParams()
    cfg = cfg or RasterConfig()
    root = Path(root)
    for sub in ("image_2", "velodyne", "calib", "gt_image_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    calib = synthetic_calibration(image_shape)
    ids = []
    for sid, cat, p in dataset_params(n, base_params):
        rng = np.random.default_rng(p.seed)
        cloud = sample_cloud(p, cfg, rng)
        img, gt = render_perspective(p, calib, image_shape, rng)
        num = sid.split("_")[1]
        write_png(root / "image_2" / f"{sid}.png", img)
        write_point_cloud(root / "velodyne" / f"{sid}.bin", cloud)
        (root / "calib" / f"{sid}.txt").write_text(format_calibration(calib))
        write_png(root / "gt_image_2" / f"{cat.lower()}_road_{num}.png", encode_gt(gt))
        ids.append(sid)
    return ids
