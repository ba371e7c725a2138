import numpy as np
import pytest

from oracles import bilinear_oracle

from bevroad.bev_raster import RasterConfig
from bevroad.camera_warp import GroundPlaneModel, ImageMap, bev_to_image_map, bilinear_sample, warp_camera, warp_gt
from bevroad.errors import ShapeError
from bevroad.kitti_io import Calibration, GtMaskPair
from bevroad.synth_data import synthetic_calibration

CFG = RasterConfig(resolution=0.25)  # 160 x 80
PLANE = GroundPlaneModel()
IMG_SHAPE = (400, 800)


def axis_calibration(f=230.0, cx=399.5, cy=20.0, height=8.0):
    p = np.array([[f, 0, cx, 0], [0, f, cy, 0], [0, 0, 1, 0]], float)
    tr = np.array([[0, -1, 0, 0], [0, 0, -1, height], [1, 0, 0, 0]], float)
    return Calibration(p, np.eye(3), tr)


def test_pinhole_projection_of_one_cell():
    calib = axis_calibration()
    m = bev_to_image_map(calib, PLANE, CFG, IMG_SHAPE)
    r, c = 100, 30
    x = CFG.x_max - (r + 0.5) * CFG.resolution
    y = CFG.y_max - (c + 0.5) * CFG.resolution
    # camera frame: (-y, height - z, x)
    u = 230.0 * (-y) / x + 399.5
    v = 230.0 * (8.0 + 1.73) / x + 20.0
    assert m.valid[r, c]
    assert m.u[r, c] == pytest.approx(u, abs=1e-9)
    assert m.v[r, c] == pytest.approx(v, abs=1e-9)


def test_points_behind_camera_invalid():
    calib = axis_calibration()
    calib.tr_velo_to_cam[2, 3] = -50.0  # push the camera 50 m ahead of every cell
    m = bev_to_image_map(calib, PLANE, CFG, IMG_SHAPE)
    assert not m.valid.any()


def test_singular_projection_marked_invalid():
    calib = axis_calibration()
    calib.p_cam[2] = 0.0
    m = bev_to_image_map(calib, PLANE, CFG, IMG_SHAPE)
    assert not m.valid.any()


def test_wide_fov_synthetic_calibration_covers_roi():
    for cfg in (CFG, RasterConfig()):
        m = bev_to_image_map(synthetic_calibration(IMG_SHAPE), PLANE, cfg, IMG_SHAPE)
        assert m.valid.all()


def test_out_of_image_cells_invalid():
    m = bev_to_image_map(axis_calibration(f=900.0), PLANE, CFG, IMG_SHAPE)
    assert m.valid.any() and not m.valid.all()
    assert np.all((m.u[m.valid] >= 0) & (m.u[m.valid] <= IMG_SHAPE[1] - 1))


def test_constant_source_stays_constant():
    m = bev_to_image_map(axis_calibration(), PLANE, CFG, IMG_SHAPE)
    img = np.empty(IMG_SHAPE + (3,), np.uint8)
    img[:] = (10, 200, 33)
    out = warp_camera(img, m, CFG)
    assert np.all(out.image.data[out.valid] == (10, 200, 33))
    assert not out.image.data[~out.valid].any()


def test_all_invalid_map_gives_black():
    m = bev_to_image_map(axis_calibration(), PLANE, CFG, IMG_SHAPE)
    m.valid[:] = False
    out = warp_camera(np.full(IMG_SHAPE + (3,), 99, np.uint8), m, CFG)
    assert not out.image.data.any() and not out.valid.any()
    gt = warp_gt(GtMaskPair(np.ones(IMG_SHAPE, bool), np.ones(IMG_SHAPE, bool)), m, CFG)
    assert not gt.valid.any() and not gt.road.any()


def test_gradient_source_matches_bilinear_oracle():
    m = bev_to_image_map(axis_calibration(), PLANE, CFG, IMG_SHAPE)
    cols = np.arange(IMG_SHAPE[1])
    img = np.empty(IMG_SHAPE + (3,), np.uint8)
    img[..., 0] = (cols * 255 // (IMG_SHAPE[1] - 1))[None, :]
    img[..., 1] = (np.arange(IMG_SHAPE[0]) * 255 // (IMG_SHAPE[0] - 1))[:, None]
    img[..., 2] = 17
    out = warp_camera(img, m, CFG).image.data
    rng = np.random.default_rng(0)
    rows, cs = np.nonzero(m.valid)
    for k in rng.choice(len(rows), 10, replace=False):
        r, c = rows[k], cs[k]
        expected = np.floor(bilinear_oracle(img, m.u[r, c], m.v[r, c]) + 0.5)
        np.testing.assert_array_equal(out[r, c], expected)


def test_bilinear_sample_exact_at_pixel_centres():
    img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    got = bilinear_sample(img, np.array([0.0, 1.0, 0.5]), np.array([0.0, 1.0, 0.5]))
    np.testing.assert_allclose(got[0], img[0, 0])
    np.testing.assert_allclose(got[1], img[1, 1])
    np.testing.assert_allclose(got[2], img.reshape(4, 3).mean(axis=0))


def test_gt_all_road():
    m = bev_to_image_map(synthetic_calibration(IMG_SHAPE), PLANE, CFG, IMG_SHAPE)
    gt = warp_gt(GtMaskPair(np.ones(IMG_SHAPE, bool), np.ones(IMG_SHAPE, bool)), m, CFG)
    assert gt.road.all() and gt.valid.all()


def test_gt_half_split_matches_nn_oracle():
    m = bev_to_image_map(axis_calibration(), PLANE, CFG, IMG_SHAPE)
    road = np.zeros(IMG_SHAPE, bool)
    road[:, : IMG_SHAPE[1] // 2] = True
    valid = np.ones(IMG_SHAPE, bool)
    valid[:5] = False
    out = warp_gt(GtMaskPair(road & valid, valid), m, CFG)
    for r in range(CFG.height):
        for c in range(CFG.width):
            if not m.valid[r, c]:
                assert not out.valid[r, c]
                continue
            ui, vi = int(np.floor(m.u[r, c] + 0.5)), int(np.floor(m.v[r, c] + 0.5))
            assert out.valid[r, c] == valid[vi, ui]
            assert out.road[r, c] == (valid[vi, ui] and road[vi, ui])
    assert not np.any(out.road & ~out.valid)


def test_mirror_equivariance_with_centred_axis():
    calib = synthetic_calibration(IMG_SHAPE)
    m = bev_to_image_map(calib, PLANE, CFG, IMG_SHAPE)
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, IMG_SHAPE + (3,), dtype=np.uint8)
    road = rng.random(IMG_SHAPE) < 0.5
    gt = GtMaskPair(road, np.ones(IMG_SHAPE, bool))

    a = warp_camera(img, m, CFG).image.data.astype(int)
    b = warp_camera(img[:, ::-1].copy(), m, CFG).image.data.astype(int)
    assert np.abs(a[:, ::-1] - b).max() <= 1
    ga = warp_gt(gt, m, CFG)
    gb = warp_gt(gt.fliplr(), m, CFG)
    # exact half-pixel ties round up in both images, the only asymmetry
    tie = np.abs((m.u % 1) - 0.5) < 1e-9
    tie = tie | tie[:, ::-1]
    assert tie.mean() < 0.05
    np.testing.assert_array_equal(ga.road[:, ::-1][~tie], gb.road[~tie])


def test_source_shape_mismatch():
    m = bev_to_image_map(axis_calibration(), PLANE, CFG, IMG_SHAPE)
    with pytest.raises(ShapeError):
        warp_camera(np.zeros((10, 10, 3), np.uint8), m, CFG)
    with pytest.raises(ShapeError):
        warp_camera(np.zeros(IMG_SHAPE, np.uint8), m, CFG)
    with pytest.raises(ShapeError):
        warp_gt(GtMaskPair(np.ones((3, 3)), np.ones((3, 3))), m, CFG)


def test_plane_must_be_finite():
    with pytest.raises(ValueError):
        GroundPlaneModel(float("nan"))


def test_image_map_fields():
    m = bev_to_image_map(axis_calibration(), PLANE, CFG, IMG_SHAPE)
    assert isinstance(m, ImageMap)
    assert m.u.shape == m.v.shape == m.valid.shape == CFG.shape
    assert m.image_shape == IMG_SHAPE
