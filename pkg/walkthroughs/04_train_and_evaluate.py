"""Train the six model variants briefly on synthetic scenes and compare them.

Uses the desk profile (160 x 80 inputs) so it finishes in minutes on a CPU.

Run: python3 walkthroughs/04_train_and_evaluate.py [EPOCHS]
"""

import sys

import numpy as np

from bevroad.bev_raster import RasterConfig
from bevroad.eval_metrics import aggregate, format_table, pr_curve
from bevroad.model_zoo import DESK_PROFILE, ModelVariant, parameter_count, predict, prepare_inputs
from bevroad.synth_data import generate_dataset
from bevroad.train_engine import HyperParams, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
raster = RasterConfig(resolution=0.25)
scenes = generate_dataset(8, cfg=raster)
train_set, test_set = scenes[:6], scenes[6:]
hp = HyperParams(max_epochs=epochs, aug_rate=1.0, val_split=0.2)

reports = {}
for variant in ModelVariant:
    ckpt, history = train(variant, DESK_PROFILE, train_set, hp)
    model = ckpt.build()
    print(
        f"model {variant.value}: {parameter_count(model)} parameters, "
        f"best epoch {ckpt.epoch}, validation BinaryIoU {ckpt.val_biou:.3f}"
    )
    curves = {}
    for s in test_set:
        inputs = prepare_inputs(variant, s.camera_bev.data[None], s.lidar_bev.data[None])
        conf = predict(model, inputs)[0, :, :, 0]
        curves[s.id] = pr_curve(conf, s.gt)
    reports[variant.value] = aggregate(curves)["URBAN"]

print()
print(format_table(reports))
print("mean BinaryIoU", {k: round(r.binary_iou_mean, 3) for k, r in reports.items()})
print("test scenes:", [s.id for s in test_set], "road fraction", np.mean([s.gt.road.mean() for s in test_set]).round(3))
