"""LiDAR point cloud -> 3-channel bird's-eye-view raster.

Channel roles of the raster:

* red   -- 255 if the cell holds at least one return, else 0
* green -- mean reflectance of the cell, clamped to [0, 1], scaled to 0..255
* blue  -- mean height, truncated to ``[z_low, z_high]`` and scaled to 0..255

Row 0 is the far edge of the region of interest (``x_max``), column 0 the
vehicle's left (``y_max``), so the image renders with forward pointing up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .kitti_io import PointCloud, quantize_unit

LIDAR_ROLES = ("occupancy", "mean_intensity", "mean_height")
CAMERA_ROLES = ("red", "green", "blue")


@dataclass(frozen=True)
class RasterConfig:
    x_min: float = 6.0
    x_max: float = 46.0
    y_min: float = -10.0
    y_max: float = 10.0
    resolution: float = 0.05
    z_low: float = -1.8
    z_high: float = -1.2

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("region of interest must have positive extent")
        if not self.z_high > self.z_low:
            raise ValueError("z_high must exceed z_low")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        for extent in (self.x_max - self.x_min, self.y_max - self.y_min):
            cells = extent / self.resolution
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError(
                    f"extent {extent} m is not a whole number of {self.resolution} m cells"
                )

    @property
    def height(self) -> int:
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def width(self) -> int:
        return int(round((self.y_max - self.y_min) / self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric ``(x, y)`` of every cell centre, each of shape (H, W)."""
        r = np.arange(self.height, dtype=np.float64)
        c = np.arange(self.width, dtype=np.float64)
        xs = self.x_max - (r + 0.5) * self.resolution
        ys = self.y_max - (c + 0.5) * self.resolution
        return np.meshgrid(xs, ys, indexing="ij")


@dataclass
class CellStats:
    count: np.ndarray  # (H, W) int64
    intensity_sum: np.ndarray  # (H, W) float64
    z_sum: np.ndarray  # (H, W) float64

    @property
    def shape(self) -> tuple[int, int]:
        return self.count.shape


@dataclass
class BevImage:
    """``H x W x C`` 8-bit raster with one documented role per channel."""

    data: np.ndarray
    channel_roles: tuple[str, ...] = CAMERA_ROLES

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ShapeError(f"BEV image must be HxWxC, got {self.data.shape}")
        if len(self.channel_roles) != self.data.shape[2]:
            raise ShapeError("one role per channel required")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def fliplr(self) -> "BevImage":
        return BevImage(self.data[:, ::-1].copy(), self.channel_roles)


def clip_to_roi(cloud: PointCloud, cfg: RasterConfig) -> PointCloud:
    x, y = cloud.x, cloud.y
    keep = (x >= cfg.x_min) & (x < cfg.x_max) & (y >= cfg.y_min) & (y < cfg.y_max)
    return PointCloud(cloud.points[keep])


def cell_indices(x: np.ndarray, y: np.ndarray, cfg: RasterConfig) -> tuple[np.ndarray, np.ndarray]:
    rows = np.floor((cfg.x_max - x) / cfg.resolution).astype(np.int64)
    cols = np.floor((cfg.y_max - y) / cfg.resolution).astype(np.int64)
    return np.clip(rows, 0, cfg.height - 1), np.clip(cols, 0, cfg.width - 1)


def bin_points(cloud: PointCloud, cfg: RasterConfig) -> CellStats:
    """Accumulate per-cell counts and sums; points must already be inside the RoI.

    ``np.bincount`` adds weights in input order, so sums are reproducible.
    """
    x, y = cloud.x, cloud.y
    outside = (x < cfg.x_min) | (x >= cfg.x_max) | (y < cfg.y_min) | (y >= cfg.y_max)
    if outside.any():
        idx = int(np.flatnonzero(outside)[0])
        raise ContractError(f"point {idx} lies outside the region of interest")
    h, w = cfg.shape
    rows, cols = cell_indices(x, y, cfg)
    flat = rows * w + cols
    count = np.bincount(flat, minlength=h * w).reshape(h, w)
    isum = np.bincount(flat, weights=cloud.intensity, minlength=h * w).reshape(h, w)
    zsum = np.bincount(flat, weights=cloud.z, minlength=h * w).reshape(h, w)
    return CellStats(count.astype(np.int64), isum, zsum)


def encode_bev_image(stats: CellStats, cfg: RasterConfig) -> BevImage:
    if stats.shape != cfg.shape:
        raise ShapeError(f"cell grid {stats.shape} does not match config {cfg.shape}")
    occupied = stats.count > 0
    n = np.where(occupied, stats.count, 1).astype(np.float64)
    mean_i = np.clip(stats.intensity_sum / n, 0.0, 1.0)
    mean_z = np.clip((stats.z_sum / n - cfg.z_low) / (cfg.z_high - cfg.z_low), 0.0, 1.0)

    out = np.zeros(cfg.shape + (3,), dtype=np.uint8)
    out[..., 0] = np.where(occupied, 255, 0)
    out[..., 1] = np.where(occupied, quantize_unit(mean_i), 0)
    out[..., 2] = np.where(occupied, quantize_unit(mean_z), 0)
    return BevImage(out, LIDAR_ROLES)


def rasterize(cloud: PointCloud, cfg: RasterConfig | None = None) -> BevImage:
    cfg = cfg or RasterConfig()
    return encode_bev_image(bin_points(clip_to_roi(cloud, cfg), cfg), cfg)


def combine_inputs(camera: BevImage, lidar: BevImage) -> BevImage:
    """Stack camera RGB (channels 0-2) and LiDAR (channels 3-5) into one raster."""
    if camera.data.shape[:2] != lidar.data.shape[:2]:
        raise ShapeError(
            f"camera {camera.data.shape[:2]} and lidar {lidar.data.shape[:2]} sizes differ"
        )
    data = np.concatenate([camera.data, lidar.data], axis=2)
    return BevImage(data, tuple(camera.channel_roles) + tuple(lidar.channel_roles))
