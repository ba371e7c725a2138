import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevroad.bev_raster import RasterConfig
from bevroad.camera_warp import GroundPlaneModel, bev_to_image_map, warp_gt
from bevroad.kitti_io import decode_gt_perspective, discover_dataset, read_calibration, read_png, read_point_cloud
from bevroad.synth_data import (
    CATEGORY_CYCLE,
    SynthParams,
    dataset_params,
    generate_dataset,
    generate_scene,
    ground_hits,
    road_mask,
    synthetic_calibration,
    write_kitti_layout,
)

DESK = RasterConfig(resolution=0.25)


def test_straight_mask_is_analytic():
    s = generate_scene(SynthParams(road_width=8.0), DESK)
    xs, ys = DESK.cell_centers()
    np.testing.assert_array_equal(s.gt.road, np.abs(ys) < 4.0)
    assert s.gt.valid.all()


def test_arc_mask_follows_circle():
    p = SynthParams(road_shape="arc", curvature=0.02, road_width=6.0)
    x = np.array([0.0, 10.0, 10.0])
    r = 50.0
    y_on = r - np.sqrt(r * r - 100.0)
    y = np.array([0.0, y_on, y_on + 3.5])
    np.testing.assert_array_equal(road_mask(x, y, p), [True, True, False])


def test_road_is_darker_in_lidar():
    s = generate_scene(SynthParams(point_density=40.0), DESK)
    green = s.lidar_bev.data[..., 1].astype(float)
    occupied = s.lidar_bev.data[..., 0] > 0
    road = s.gt.road & occupied
    assert green[road].mean() < green[~s.gt.road & occupied].mean()


def test_density_fills_cells():
    sparse = generate_scene(SynthParams(point_density=0.5), DESK)
    dense = generate_scene(SynthParams(point_density=80.0), DESK)
    occ = lambda sc: (sc.lidar_bev.data[..., 0] > 0).mean()  # noqa: E731
    # uniform sampling: a cell of area a is empty with probability exp(-density * a)
    area = DESK.resolution**2
    assert occ(sparse) == pytest.approx(1 - np.exp(-0.5 * area), abs=0.01)
    assert occ(dense) == pytest.approx(1 - np.exp(-80.0 * area), abs=0.003)


def test_determinism_and_seed_sensitivity():
    a = generate_scene(SynthParams(seed=3), DESK)
    b = generate_scene(SynthParams(seed=3), DESK)
    c = generate_scene(SynthParams(seed=4), DESK)
    assert a.lidar_bev.data.tobytes() == b.lidar_bev.data.tobytes()
    assert a.camera_bev.data.tobytes() == b.camera_bev.data.tobytes()
    assert a.lidar_bev.data.tobytes() != c.lidar_bev.data.tobytes()


def test_dataset_alternates_shapes_and_categories():
    plan = dataset_params(6, SynthParams(seed=10))
    assert [p.road_shape for _, _, p in plan] == ["straight", "arc"] * 3
    assert [c for _, c, _ in plan] == list(CATEGORY_CYCLE) * 2
    assert [p.seed for _, _, p in plan] == list(range(10, 16))
    ids = [sid for sid, _, _ in plan]
    assert ids[0] == "um_000000" and len(set(ids)) == 6
    scenes = generate_dataset(3, cfg=DESK)
    assert all(s.shape == DESK.shape for s in scenes)


def test_param_validation():
    for bad in (dict(road_shape="zigzag"), dict(road_width=1.0), dict(point_density=0.0), dict(noise_std=-1.0)):
        with pytest.raises(ValueError):
            SynthParams(**bad)
    with pytest.raises(ValueError):
        dataset_params(0, SynthParams())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["straight", "arc"]), st.floats(3.0, 11.0))
def test_scene_invariants(seed, shape, width):
    s = generate_scene(SynthParams(road_shape=shape, road_width=width, seed=seed, point_density=2.0), DESK)
    assert not (s.gt.road & ~s.gt.valid).any()
    assert s.camera_bev.data.dtype == np.uint8 and s.lidar_bev.data.dtype == np.uint8
    assert s.gt.road.any() and (~s.gt.road).any()


def test_calibration_sees_whole_roi():
    calib = synthetic_calibration()
    x, y, hit = ground_hits(calib, (400, 800))
    assert hit.any()
    assert bev_to_image_map(calib, GroundPlaneModel(), DESK, (400, 800)).valid.all()


def test_kitti_layout_round_trip(tmp_path):
    ids = write_kitti_layout(tmp_path, 3, SynthParams(point_density=2.0), DESK)
    assert ids == ["um_000000", "umm_000001", "uu_000002"]
    refs, skipped = discover_dataset(tmp_path)
    assert [r.id for r in refs] == ids and len(skipped) == 0
    assert [r.category for r in refs] == ["UM", "UMM", "UU"]
    ref = refs[0]
    assert read_png(ref.image).shape == (400, 800, 3)
    assert len(read_point_cloud(ref.velodyne)) > 0
    calib = read_calibration(ref.calib)
    gt = decode_gt_perspective(read_png(ref.gt))
    bev_gt = warp_gt(gt, bev_to_image_map(calib, GroundPlaneModel(), DESK, (400, 800)), DESK)
    analytic = generate_scene(SynthParams(point_density=2.0), DESK).gt.road
    agree = (bev_gt.road == analytic)[bev_gt.valid].mean()
    assert agree > 0.98
