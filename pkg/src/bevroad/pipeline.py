"""Glue between on-disk scenes and the in-memory :class:`Scene` bundle."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .bev_raster import CAMERA_ROLES, LIDAR_ROLES, BevImage, RasterConfig, rasterize
from .camera_warp import GroundPlaneModel, bev_to_image_map, warp_camera, warp_gt
from .errors import DatasetLayoutError
from .kitti_io import (
    GtMaskPair,
    SceneRef,
    decode_gt_perspective,
    encode_gt,
    parse_scene_name,
    read_calibration,
    read_png,
    read_point_cloud,
    write_png,
)
from .synth_data import Scene

CAMERA_FILE = "camera_bev.png"
LIDAR_FILE = "lidar_bev.png"
GT_FILE = "gt_bev.png"
VALID_FILE = "valid.png"


def preprocess_scene(ref: SceneRef, cfg: RasterConfig, plane: GroundPlaneModel) -> dict[str, np.ndarray]:
    """Rasterise LiDAR and warp camera (and GT, if present) for one scene.

    Returns the images to write, keyed by file name.
    """
    image = read_png(ref.image)
    if image.ndim != 3:
        image = np.repeat(image[..., None], 3, axis=2)
    calib = read_calibration(ref.calib)
    cloud = read_point_cloud(ref.velodyne)

    mapping = bev_to_image_map(calib, plane, cfg, image.shape[:2])
    camera = warp_camera(image, mapping, cfg)
    out = {
        LIDAR_FILE: rasterize(cloud, cfg).data,
        CAMERA_FILE: camera.image.data,
        VALID_FILE: np.where(camera.valid, 255, 0).astype(np.uint8),
    }
    if ref.gt is not None:
        gt = warp_gt(decode_gt_perspective(read_png(ref.gt)), mapping, cfg)
        out[GT_FILE] = encode_gt(gt)
    return out


def write_scene_outputs(out_dir: str | os.PathLike, images: dict[str, np.ndarray]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in images.items():
        write_png(out_dir / name, arr)


def load_preprocessed(root: str | os.PathLike, require_gt: bool = True) -> list[Scene]:
    """Read every ``<root>/<scene id>/`` directory written by preprocessing, sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetLayoutError(f"{root} is not a directory")
    scenes = []
    for d in sorted(p for p in root.iterdir() if (p / LIDAR_FILE).is_file()):
        camera = read_png(d / CAMERA_FILE)
        lidar = read_png(d / LIDAR_FILE)
        valid = read_png(d / VALID_FILE) > 0
        if (d / GT_FILE).is_file():
            gt = decode_gt_perspective(read_png(d / GT_FILE))
            gt = GtMaskPair(gt.road & valid, gt.valid & valid)
        elif require_gt:
            raise DatasetLayoutError(f"scene {d.name} has no {GT_FILE}")
        else:
            gt = GtMaskPair(np.zeros_like(valid), valid)
        parsed = parse_scene_name(d.name)
        category = parsed[0] if parsed else "UM"
        scenes.append(
            Scene(d.name, BevImage(camera, CAMERA_ROLES), BevImage(lidar, LIDAR_ROLES), gt, category)
        )
    if not scenes:
        raise DatasetLayoutError(f"no preprocessed scenes under {root}")
    return scenes
