"""Rasterise a synthetic point cloud into a bird's-eye-view image.

Run: python3 walkthroughs/01_lidar_to_bev.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from bevroad.bev_raster import RasterConfig, cell_indices, rasterize
from bevroad.kitti_io import PointCloud, write_png
from bevroad.synth_data import SynthParams, sample_cloud

out = Path(sys.argv[1] if len(sys.argv) > 1 else "walkthrough_out")
out.mkdir(exist_ok=True)

cfg = RasterConfig()  # 40 m x 20 m at 0.05 m per pixel
print("grid", cfg.shape)

# one point: where does it land and what colour does the cell get?
point = PointCloud(np.array([[10.0, 0.025, -1.5, 0.5]]))
r, c = cell_indices(point.x, point.y, cfg)
print("point (10, 0.025) -> cell", int(r[0]), int(c[0]), "rgb", rasterize(point).data[r[0], c[0]].tolist())

# a whole synthetic sweep: road returns are darker than the verge
cloud = sample_cloud(SynthParams(road_shape="arc"), cfg, np.random.default_rng(0))
bev = rasterize(cloud, cfg)
print(f"{len(cloud)} points, {np.count_nonzero(bev.data[..., 0])} occupied cells")
write_png(out / "lidar_bev.png", bev.data)
print("wrote", out / "lidar_bev.png")
