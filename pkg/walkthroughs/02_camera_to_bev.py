"""Warp a perspective camera image and its ground truth onto the BEV grid.

Run: python3 walkthroughs/02_camera_to_bev.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from bevroad.bev_raster import RasterConfig
from bevroad.camera_warp import GroundPlaneModel, bev_to_image_map, warp_camera, warp_gt
from bevroad.kitti_io import encode_gt, write_png
from bevroad.synth_data import SYNTH_IMAGE_SHAPE, SynthParams, render_perspective, synthetic_calibration

out = Path(sys.argv[1] if len(sys.argv) > 1 else "walkthrough_out")
out.mkdir(exist_ok=True)

cfg = RasterConfig(resolution=0.25)
calib = synthetic_calibration()
image, gt = render_perspective(SynthParams(road_shape="arc"), calib, SYNTH_IMAGE_SHAPE, np.random.default_rng(1))

# the lookup table is computed once per calibration and reused for image and labels
mapping = bev_to_image_map(calib, GroundPlaneModel(), cfg, SYNTH_IMAGE_SHAPE)
print(f"{mapping.valid.mean():.0%} of BEV cells see the image")
camera_bev = warp_camera(image, mapping, cfg)
gt_bev = warp_gt(gt, mapping, cfg)

write_png(out / "perspective.png", image)
write_png(out / "camera_bev.png", camera_bev.image.data)
write_png(out / "gt_bev.png", encode_gt(gt_bev))
print("wrote perspective.png, camera_bev.png and gt_bev.png to", out)
