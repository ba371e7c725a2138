"""Project perspective camera images and labels onto the BEV grid.

Each BEV cell centre is placed on a flat ground plane in the LiDAR frame,
projected through the calibration chain and sampled from the source image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bev_raster import CAMERA_ROLES, BevImage, RasterConfig
from .errors import ShapeError
from .kitti_io import Calibration, GtMaskPair

DEFAULT_Z_PLANE = -1.73


@dataclass(frozen=True)
class GroundPlaneModel:
    z_plane: float = DEFAULT_Z_PLANE

    def __post_init__(self):
        if not np.isfinite(self.z_plane):
            raise ValueError("z_plane must be finite")


@dataclass
class ImageMap:
    """Source-image coordinates for every BEV cell.

    ``u`` is the column and ``v`` the row, both in pixel-centre units
    (integer values fall on pixel centres).
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    image_shape: tuple[int, int]


@dataclass
class BevWarpResult:
    image: BevImage
    valid: np.ndarray


def bev_to_image_map(
    calib: Calibration,
    plane: GroundPlaneModel,
    cfg: RasterConfig,
    image_shape: tuple[int, int],
) -> ImageMap:
    xs, ys = cfg.cell_centers()
    pts = np.stack([xs, ys, np.full_like(xs, plane.z_plane), np.ones_like(xs)], axis=-1)

    cam = pts @ calib.tr_velo_to_cam.T
    rect = cam @ calib.r_rect.T
    proj = np.concatenate([rect, np.ones(rect.shape[:-1] + (1,))], axis=-1) @ calib.p_cam.T

    w = proj[..., 2]
    depth_ok = rect[..., 2] > 0
    w_ok = w != 0
    safe_w = np.where(w_ok, w, 1.0)
    u = proj[..., 0] / safe_w
    v = proj[..., 1] / safe_w

    h_img, w_img = image_shape
    inside = (u >= 0) & (u <= w_img - 1) & (v >= 0) & (v <= h_img - 1)
    valid = depth_ok & w_ok & inside & np.isfinite(u) & np.isfinite(v)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    return ImageMap(u, v, valid, (int(h_img), int(w_img)))


def _check_source(shape: tuple[int, ...], mapping: ImageMap, cfg: RasterConfig) -> None:
    if tuple(shape[:2]) != mapping.image_shape:
        raise ShapeError(
            f"source image {tuple(shape[:2])} does not match map built for {mapping.image_shape}"
        )
    if mapping.valid.shape != cfg.shape:
        raise ShapeError(f"map grid {mapping.valid.shape} does not match config {cfg.shape}")


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W, C) at float coordinates; coords must be in range."""
    h, w = image.shape[:2]
    src = image.astype(np.float64)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    top = src[v0, u0] * (1 - fu) + src[v0, u1] * fu
    bottom = src[v1, u0] * (1 - fu) + src[v1, u1] * fu
    return top * (1 - fv) + bottom * fv


def warp_camera(image: np.ndarray, mapping: ImageMap, cfg: RasterConfig) -> BevWarpResult:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"camera image must be HxWx3, got {image.shape}")
    _check_source(image.shape, mapping, cfg)

    sampled = bilinear_sample(image, mapping.u, mapping.v)
    out = np.clip(np.floor(sampled + 0.5), 0, 255).astype(np.uint8)
    out[~mapping.valid] = 0
    return BevWarpResult(BevImage(out, CAMERA_ROLES), mapping.valid.copy())


def warp_gt(gt: GtMaskPair, mapping: ImageMap, cfg: RasterConfig) -> GtMaskPair:
    _check_source(gt.shape, mapping, cfg)
    h, w = gt.shape
    # nearest pixel centre, half away from zero (coords are non-negative)
    ui = np.clip(np.floor(mapping.u + 0.5).astype(np.int64), 0, w - 1)
    vi = np.clip(np.floor(mapping.v + 0.5).astype(np.int64), 0, h - 1)
    valid = mapping.valid & gt.valid[vi, ui]
    road = valid & gt.road[vi, ui]
    return GtMaskPair(road, valid)
