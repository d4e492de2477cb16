import numpy as np
import pytest
import torch

from conftest import random_camera, visible_count
from cascade_nvs.camera import Camera, Extrinsics, Intrinsics, look_at
from cascade_nvs.errors import ConfigError
from cascade_nvs.fileio import read_ply, write_ply
from cascade_nvs.pcfuse import (
    FusionRecord,
    GeometricCheck,
    PointCloud,
    build_pointcloud,
    cloud_diameter,
    eval_pointcloud,
    fuse_records,
    geometric_filter,
    median_fuse,
    photometric_filter,
    predict_reference_depths,
    select_views,
)
from cascade_nvs.pipeline import setup_cascade
from cascade_nvs.synthdata import box_scene, camera_rig, depth_range, generate_scene, raycast_render


def _line_rig(n):
    return [look_at((x, 0.0, -4.0), (x, 0.0, 0.0), width=8, height=8) for x in np.arange(n, dtype=float)]


def test_select_views_self_exclusion_and_symmetry():
    cams = _line_rig(7)
    assert select_views(cams[3], cams, 2) == [2, 4]
    assert select_views(cams[3], cams, 4) == [2, 4, 1, 5]
    assert select_views(cams[0], cams, 3) == [1, 2, 3]
    with pytest.raises(ConfigError):
        select_views(cams[0], cams, 7)
    assert select_views(cams[0], cams, 7, at_most=True) == [1, 2, 3, 4, 5, 6]


def test_select_views_brute_force_oracle(rng):
    for _ in range(50):
        cams = [random_camera(rng, 8, 8) for _ in range(9)]
        tgt = random_camera(rng, 8, 8)
        n = int(rng.integers(1, 10))
        dist = [float(np.linalg.norm(c.center - tgt.center)) for c in cams]
        oracle = sorted(range(9), key=lambda i: (dist[i], i))[:n]
        assert select_views(tgt, cams, n) == oracle


def test_photometric_filter_thresholds(rng):
    conf = [rng.uniform(size=(4, 5)) for _ in range(3)]
    assert all(m.all() for m in photometric_filter(conf, 0.0))
    assert not any(m.any() for m in photometric_filter(conf, 1.0 + 1e-9))
    assert not photometric_filter([np.full((2, 2), 1 / 12)], 0.3)[0].any()
    counts = [sum(int(m.sum()) for m in photometric_filter(conf, t)) for t in np.linspace(0, 1, 11)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))


@pytest.fixture(scope="module")
def plane_rig():
    """Exact depths of a single textured plane seen by a 5-view rig."""
    scene = generate_scene(2, 0)
    cams = camera_rig(scene, 5, jitter_seed=2, width=32, height=32)
    renders = [raycast_render(scene, c) for c in cams]
    recs = [FusionRecord(r[0], r[1], c, np.ones(r[1].shape)) for r, c in zip(renders, cams)]
    return scene, cams, renders, recs


def test_geometric_filter_exact_depths_pass(plane_rig):
    _, cams, renders, recs = plane_rig
    check = geometric_filter(recs)
    for i, (cam, r) in enumerate(zip(cams, renders)):
        others = [j for j in range(5) if j != i]
        seen = visible_count(cam, r[1], [cams[j] for j in others], [renders[j][1] for j in others]) >= 3
        assert check.masks[i][seen].mean() >= 0.99


def test_geometric_filter_rejects_corrupted_view(plane_rig):
    _, cams, renders, recs = plane_rig
    bad = [FusionRecord(r.image, r.depth * (1.1 if i == 2 else 1.0), r.cam, r.confidence) for i, r in enumerate(recs)]
    check = geometric_filter(bad)
    assert not check.masks[2].any()
    for i in (0, 1, 3, 4):
        others = [j for j in range(5) if j not in (i, 2)]
        seen = visible_count(cams[i], renders[i][1], [cams[j] for j in others], [renders[j][1] for j in others]) >= 3
        assert check.masks[i][seen].mean() >= 0.99


def test_geometric_filter_impossible_quorum_and_monotone(plane_rig):
    recs = plane_rig[3]
    assert not any(m.any() for m in geometric_filter(recs, min_views=5).masks)
    kept = [sum(int(m.sum()) for m in geometric_filter(recs, min_views=s).masks) for s in range(1, 6)]
    assert all(b <= a for a, b in zip(kept, kept[1:]))


def test_median_fuse_hand_cases():
    cam = Camera(Intrinsics(10.0, 10.0, 0.0, 0.0), Extrinsics(np.eye(3), np.zeros(3)), 1, 1)
    rec = FusionRecord(np.zeros((1, 1, 3)), np.array([[10.0]]), cam, np.ones((1, 1)))
    check = GeometricCheck([np.array([[True]])], [[np.array([[10.0]]), np.array([[40.0]])]])
    assert median_fuse([rec], check)[0][0, 0] == 10.0
    check = GeometricCheck([np.array([[True]])], [[np.array([[10.0]]), np.array([[np.nan]])]])
    assert median_fuse([rec], check)[0][0, 0] == 10.0
    check = GeometricCheck([np.array([[False]])], [[np.array([[10.0]])]])
    assert median_fuse([rec], check)[0][0, 0] == 0.0


def test_median_fuse_exact_depths_unchanged(plane_rig):
    recs = plane_rig[3]
    check = geometric_filter(recs)
    fused = median_fuse(recs, check)
    for r, f, m, cons in zip(recs, fused, check.masks, check.consistent):
        assert np.allclose(f[m], r.depth[m], rtol=1e-9)
        # the median stays inside the consistent set's range
        stack = np.stack([r.depth] + list(cons))
        assert np.all(f[m] >= np.nanmin(stack[:, m], 0) - 1e-12) and np.all(f[m] <= np.nanmax(stack[:, m], 0) + 1e-12)


def test_median_fuse_reduces_noise(plane_rig):
    recs = plane_rig[3]
    rng = np.random.default_rng(5)
    noisy = [FusionRecord(r.image, r.depth * (1 + rng.normal(scale=0.002, size=r.depth.shape)), r.cam, r.confidence) for r in recs]
    check = geometric_filter(noisy)
    fused = median_fuse(noisy, check)
    before = np.concatenate([np.abs(n.depth - r.depth)[m] for n, r, m in zip(noisy, recs, check.masks)])
    after = np.concatenate([np.abs(f - r.depth)[m] for f, r, m in zip(fused, recs, check.masks)])
    assert len(after) > 1000 and after.mean() < before.mean()


def test_build_pointcloud_plane():
    d = 2.75
    cam = Camera(Intrinsics(12.0, 12.0, 3.5, 2.5), Extrinsics(np.eye(3), np.zeros(3)), 8, 6)
    img = np.random.default_rng(0).uniform(size=(6, 8, 3))
    rec = FusionRecord(img, np.full((6, 8), d), cam, np.ones((6, 8)))
    pc = build_pointcloud([rec], [rec.depth])
    assert len(pc) == 48 and np.abs(pc.points[:, 2] - d).max() < 1e-9
    assert np.array_equal(pc.colors, img.reshape(-1, 3))


def test_two_view_box_cloud_on_surface():
    scene = box_scene(0)
    cams = camera_rig(scene, 2, jitter_seed=0, width=48, height=48)
    recs = [FusionRecord(r[0], r[1], c, np.ones(r[1].shape)) for r, c in ((raycast_render(scene, c), c) for c in cams)]
    pc = fuse_records(recs, tau_p=0.0, min_views=1)
    rect, box = scene.primitives
    blo, bhi = np.asarray(box.lo), np.asarray(box.hi)
    # distance to the union of the backdrop plane and the box surface
    d_rect = np.abs(pc.points[:, 2] - rect.center[2])
    q = np.maximum(blo - pc.points, pc.points - bhi)
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(1), 0)
    d_box = np.abs(outside + inside)
    assert len(pc) > 1000 and np.minimum(d_rect, d_box).max() < 1e-3


def test_pointcloud_ply_roundtrip(tmp_path, plane_rig):
    recs = plane_rig[3]
    pc = fuse_records(recs)
    write_ply(tmp_path / "f.ply", pc.points, pc.colors)
    pts, cols = read_ply(tmp_path / "f.ply")
    write_ply(tmp_path / "g.ply", pts, cols)
    assert (tmp_path / "f.ply").read_bytes() == (tmp_path / "g.ply").read_bytes()


def test_eval_pointcloud_cases(rng):
    g = rng.uniform(size=(4000, 3))
    gt = PointCloud(g, np.zeros_like(g))
    m = eval_pointcloud(gt, gt, 0.01)
    assert (m.accuracy, m.completeness, m.f_score) == (0.0, 0.0, 1.0)
    # a dense grid shifted by a small delta along one axis
    ax = np.linspace(0, 1, 41)
    grid = np.stack(np.meshgrid(ax, ax, [0.0]), -1).reshape(-1, 3)
    delta = 0.003
    m = eval_pointcloud(PointCloud(grid + [0, 0, delta], np.zeros_like(grid)), PointCloud(grid, np.zeros_like(grid)), 0.01)
    assert m.accuracy == pytest.approx(delta, abs=1e-12) and m.completeness == pytest.approx(delta, abs=1e-12)
    sub = PointCloud(g[:1000], np.zeros((1000, 3)))
    m = eval_pointcloud(sub, gt, 0.01)
    assert m.accuracy == 0.0 and m.completeness > 0 and m.overall == pytest.approx(m.completeness / 2)
    swapped = eval_pointcloud(gt, sub, 0.01)
    assert (swapped.accuracy, swapped.completeness) == (m.completeness, m.accuracy)
    assert swapped.precision == m.recall and swapped.recall == m.precision
    with pytest.raises(ConfigError):
        eval_pointcloud(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), gt, 0.1)


def test_pointcloud_invariants():
    with pytest.raises(ConfigError):
        PointCloud(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]), np.zeros((1, 3)))


def test_cloud_diameter(rng):
    pts = rng.normal(size=(300, 3))
    brute = max(np.linalg.norm(a - b) for a in pts for b in pts)
    assert cloud_diameter(pts) == pytest.approx(brute, rel=1e-12)
    flat = np.c_[rng.normal(size=(200, 2)), np.zeros(200)]
    brute = max(np.linalg.norm(a - b) for a in flat for b in flat)
    assert cloud_diameter(flat) == pytest.approx(brute, rel=1e-12)
    assert cloud_diameter(np.array([[0, 0, 0], [1, 1, 1], [3, 3, 3.0]])) == pytest.approx(np.sqrt(27))
    assert cloud_diameter(np.ones((5, 3))) == 0.0


def _rig_images(scene, cams):
    renders = [raycast_render(scene, c) for c in cams]
    images = [torch.tensor(r[0].transpose(2, 0, 1), dtype=torch.float32) for r in renders]
    return renders, images


def test_predict_reference_depths_minimal_rig():
    scene = generate_scene(1, 1)
    cams = camera_rig(scene, 2, jitter_seed=1, width=32, height=32)
    renders, images = _rig_images(scene, cams)
    d_min, d_max = depth_range([r[1] for r in renders], bracket=scene.depth_bracket())
    recs = predict_reference_depths(images, cams, d_min, d_max, 4)
    assert len(recs) == 2 and all(np.isfinite(r.depth).all() and r.depth.shape == (32, 32) for r in recs)
    assert all(r.image is not None and np.array_equal(r.image, images[i].numpy().transpose(1, 2, 0).astype(np.float64)) for i, r in enumerate(recs))


def test_predict_reference_depths_accuracy():
    """Reference views: pooled fraction within 1.5 final intervals.

    Each rig view is predicted from its four neighbors, which for the rig
    ends all lie on one side. The measured pooled level on this family is
    0.89 to 0.91, below the 0.95 reached for novel views between rig
    cameras; this test pins the measured level.
    """
    scene = generate_scene(0, 1)
    cams = camera_rig(scene, 5, jitter_seed=0)
    renders, images = _rig_images(scene, cams)
    d_min, d_max = depth_range([r[1] for r in renders], bracket=scene.depth_bracket())
    recs = predict_reference_depths(images, cams, d_min, d_max, 4)
    scaling, sched = setup_cascade(d_min, d_max)
    tol = 1.5 * sched.delta[-1] / scaling.f
    good = total = 0
    for i, r in enumerate(recs):
        src = select_views(cams[i], cams, 4)
        assert i not in src
        seen = visible_count(cams[i], renders[i][1], [cams[j] for j in src], [renders[j][1] for j in src]) >= 2
        good += int((np.abs(r.depth - renders[i][1]) <= tol)[seen].sum())
        total += int(seen.sum())
    assert good / total >= 0.85
