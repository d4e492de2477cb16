import numpy as np
import pytest
import torch
from scipy.special import softmax as scipy_softmax

from conftest import random_camera
from cascade_nvs.camera import Camera, Extrinsics, backproject, pixel_grid, project
from cascade_nvs.costvol import (
    PSV,
    build_psv,
    cost_to_prob_learned,
    cost_to_prob_photometric,
    init_regularizer,
    mean_psv,
    regress_depth_cascade,
    soft_argmax,
)
from cascade_nvs.errors import ConfigError
from cascade_nvs.planes import PlaneSet, adaptive_scale, cascade_schedule, initial_planes, resample_planes
from cascade_nvs.warp import bilinear_sample

D64 = torch.float64


def smooth_feature(h, w, c=2):
    ys, xs = torch.meshgrid(torch.arange(h, dtype=D64), torch.arange(w, dtype=D64), indexing="ij")
    return torch.stack([torch.sin(0.3 * xs + 0.2 * ys + k) for k in range(c)])


def test_build_psv_identity():
    cam = random_camera(np.random.default_rng(0), 16, 12)
    feat = smooth_feature(12, 16)
    psv = build_psv(feat, cam, cam, initial_planes(1.0, 0.5, 4), (12, 16))
    assert psv.volume.shape == (2, 4, 12, 16) and psv.valid.all()
    for i in range(4):
        assert torch.allclose(psv.volume[:, i], feat, atol=1e-9)


def test_build_psv_matches_backproject_project_oracle(rng):
    h, w = 24, 32
    feat = smooth_feature(h, w)
    checked = 0
    for _ in range(60):
        src, tgt = random_camera(rng, w, h), random_camera(rng, w, h)
        d_star = float(rng.uniform(2.0, 5.0))
        planes = PlaneSet(stage=1, uniform=torch.tensor([d_star - 0.5, d_star], dtype=D64))
        psv = build_psv(feat, src, tgt, planes, (h, w))
        uv = pixel_grid(w, h).reshape(-1, 2)
        X = backproject(tgt, uv, np.full(len(uv), d_star))
        uv_s, _, front = project(src, X)
        oracle = bilinear_sample(feat, torch.as_tensor(uv_s.reshape(h, w, 2)))
        both = oracle.mask & psv.valid[1] & torch.as_tensor(front.reshape(h, w))
        if both.sum() < 20:
            continue
        # the feature has slope below 0.4 per px, so 1e-6 px error bounds the value error by 1e-6
        assert torch.allclose(psv.volume[:, 1][:, both], oracle.values[:, both], atol=1e-6)
        checked += 1
    assert checked >= 10


def test_build_psv_per_pixel_planes_match_uniform(rng):
    h, w = 12, 16
    feat = smooth_feature(h, w)
    src, tgt = random_camera(rng, w, h), random_camera(rng, w, h)
    per_pixel = resample_planes(torch.full((h, w), 4.0, dtype=D64), 4, 0.25)
    uniform = PlaneSet(stage=1, uniform=per_pixel.depths()[:, 0, 0].clone())
    a = build_psv(feat, src, tgt, per_pixel, (h, w))
    b = build_psv(feat, src, tgt, uniform, (h, w))
    assert torch.equal(a.valid, b.valid)
    assert torch.allclose(a.volume, b.volume, atol=1e-9)


def test_build_psv_outside_is_zero(rng):
    cam = random_camera(rng, 16, 12)
    feat = smooth_feature(12, 16) + 5.0
    shifted = Camera(cam.intrinsics, Extrinsics(cam.R, cam.t + np.array([100.0, 0, 0])), 16, 12)
    for planes in [initial_planes(1.0, 1.0, 2), resample_planes(torch.full((12, 16), 3.0, dtype=D64), 2, 0.5)]:
        psv = build_psv(feat, shifted, cam, planes, (12, 16))
        assert not psv.valid.any()
        assert torch.count_nonzero(psv.volume) == 0


def test_mean_psv_cases():
    g = torch.Generator().manual_seed(0)
    vols = [PSV(torch.rand(2, 3, 4, 5, generator=g, dtype=D64), torch.ones(3, 4, 5, dtype=torch.bool)) for _ in range(4)]
    assert torch.equal(mean_psv(vols[:1]).volume, vols[0].volume)
    assert torch.allclose(mean_psv([vols[0], vols[0]]).volume, vols[0].volume, atol=0)
    oracle = np.zeros((2, 3, 4, 5))
    for v in vols:
        oracle += v.volume.numpy()
    assert np.allclose(mean_psv(vols).volume.numpy(), oracle / 4, atol=1e-15)


def test_mean_psv_errors():
    with pytest.raises(ConfigError):
        mean_psv([])
    a = PSV(torch.zeros(1, 2, 3, 3), torch.ones(2, 3, 3, dtype=torch.bool))
    b = PSV(torch.zeros(1, 3, 3, 3), torch.ones(3, 3, 3, dtype=torch.bool))
    with pytest.raises(ConfigError):
        mean_psv([a, b])


def _two_view(values_a, values_b):
    va = torch.tensor(values_a, dtype=D64)[:, None, None]
    vb = torch.tensor(values_b, dtype=D64)[:, None, None]
    ok = torch.ones_like(va, dtype=torch.bool)
    return [va, vb], [ok, ok]


def test_photometric_softmax_hand_values():
    # cross-view variances (0, 1, 4)
    vols, valid = _two_view([0.0, -1.0, -2.0], [0.0, 1.0, 2.0])
    V = cost_to_prob_photometric(vols, valid, beta=1.0).V[:, 0, 0]
    # softmax(0, -1, -4), evaluated independently by scipy
    assert np.allclose(V.numpy(), scipy_softmax([0.0, -1.0, -4.0]), atol=1e-15)
    assert np.allclose(V.numpy(), [0.72140, 0.26539, 0.01321], atol=5e-6)
    assert int(V.argmax()) == 0


def test_photometric_zero_variance_wins_and_zero_beta_uniform(rng):
    a = rng.uniform(size=6)
    b = a + np.r_[0.0, rng.uniform(0.1, 1.0, size=5)] * rng.choice([-1, 1], size=6)
    vols, valid = _two_view(a.tolist(), b.tolist())
    assert int(cost_to_prob_photometric(vols, valid, beta=10.0).V[:, 0, 0].argmax()) == 0
    V0 = cost_to_prob_photometric(vols, valid, beta=0.0).V
    assert torch.allclose(V0, torch.full_like(V0, 1 / 6), atol=1e-15)


def test_photometric_underobserved_pixel_is_uniform():
    vols = [torch.rand(5, 2, 2, dtype=D64), torch.rand(5, 2, 2, dtype=D64)]
    valid = [torch.ones(5, 2, 2, dtype=torch.bool), torch.ones(5, 2, 2, dtype=torch.bool)]
    valid[1][:, 0, 0] = False
    V = cost_to_prob_photometric(vols, valid, beta=100.0).V
    assert torch.allclose(V[:, 0, 0], torch.full((5,), 0.2, dtype=D64), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_learned_probability_invariants(seed):
    g = torch.Generator().manual_seed(seed)
    params = init_regularizer(3, g, D64)
    params = {k: torch.randn(v.shape, generator=g, dtype=D64) for k, v in params.items()}
    V = cost_to_prob_learned(torch.randn(3, 6, 4, 5, generator=g, dtype=D64) * 10, params).V
    assert (V >= 0).all()
    assert torch.allclose(V.sum(0), torch.ones(4, 5, dtype=D64), atol=1e-5)


def test_learned_zero_final_layer_is_uniform():
    params = init_regularizer(2, torch.Generator().manual_seed(0), D64)
    V = cost_to_prob_learned(torch.randn(2, 8, 3, 3, dtype=D64), params).V
    assert torch.allclose(V, torch.full_like(V, 1 / 8), atol=1e-15)


def test_learned_shape_mismatch():
    params = init_regularizer(2, torch.Generator().manual_seed(0))
    with pytest.raises(ConfigError):
        cost_to_prob_learned(torch.zeros(3, 4, 2, 2), params)


def test_learned_final_layer_has_no_bias():
    params = init_regularizer(2, torch.Generator().manual_seed(0))
    assert "reg.2.bias" not in params and "reg.1.bias" in params


def test_soft_argmax_cases():
    planes = PlaneSet(stage=1, uniform=torch.tensor([100.0, 200.0], dtype=D64))
    V = torch.tensor([0.25, 0.75], dtype=D64)[:, None, None]
    assert soft_argmax(V, planes).item() == 175.0
    planes = initial_planes(100.0, 10.0, 4)
    onehot = torch.zeros(4, 2, 2, dtype=D64)
    onehot[2] = 1
    assert torch.equal(soft_argmax(onehot, planes), torch.full((2, 2), 130.0, dtype=D64))
    uniform = torch.full((4, 2, 2), 0.25, dtype=D64)
    assert torch.allclose(soft_argmax(uniform, planes), torch.full((2, 2), 125.0, dtype=D64), atol=1e-12)


def test_soft_argmax_per_pixel_planes_within_bounds(rng):
    d_prev = torch.as_tensor(rng.uniform(200, 400, size=(5, 6)))
    planes = resample_planes(d_prev, 6, 3.0)
    V = torch.softmax(torch.as_tensor(rng.normal(size=(6, 5, 6)) * 4), dim=0)
    D = soft_argmax(V, planes)
    d = planes.depths()
    assert (D >= d.min(0).values - 1e-9).all() and (D <= d.max(0).values + 1e-9).all()


def test_single_plane_gives_its_depth_exactly():
    planes = PlaneSet(stage=1, uniform=torch.tensor([137.25], dtype=D64))
    vols, valid = _two_view([0.3], [0.7])
    V = cost_to_prob_photometric(vols, valid, beta=5.0)
    assert soft_argmax(V, planes).item() == 137.25


def test_cascade_errors():
    scaling, d1 = adaptive_scale(1.0, 2.0, 100.0, 8)
    sched = cascade_schedule(8, d1, 2)
    with pytest.raises(ConfigError):
        regress_depth_cascade([], [], None, sched, scaling)
    with pytest.raises(ConfigError):
        regress_depth_cascade([torch.zeros(3, 16, 16)], [None], None, sched, scaling, backend="bogus")
    with pytest.raises(ConfigError):
        regress_depth_cascade([torch.zeros(3, 16, 16)], [None], None, sched, scaling, backend="learned")
