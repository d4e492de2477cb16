import pytest
import torch

from conftest import random_camera
from cascade_nvs.errors import ConfigError
from cascade_nvs.featfuse import blend_weights, fuse_features

D64 = torch.float64


def test_blend_weights_hand_values():
    z = torch.tensor([1.0, 3.0], dtype=D64)[:, None, None]
    vis = torch.ones(2, 1, 1, dtype=torch.bool)
    assert blend_weights(z, vis)[:, 0, 0].tolist() == [0.75, 0.25]
    vis[1] = False
    assert blend_weights(z, vis)[:, 0, 0].tolist() == [1.0, 0.0]
    vis[0] = False
    assert blend_weights(z, vis)[:, 0, 0].tolist() == [0.0, 0.0]


def test_blend_weights_properties(rng):
    z = torch.as_tensor(rng.uniform(0.5, 10.0, size=(4, 6, 7)))
    vis = torch.as_tensor(rng.uniform(size=(4, 6, 7)) > 0.3)
    a = blend_weights(z, vis)
    covered = vis.any(0)
    assert torch.allclose(a.sum(0)[covered], torch.ones(int(covered.sum()), dtype=D64), atol=1e-9)
    assert (a[~vis] == 0).all()
    # scale invariance under a global factor on z
    assert torch.allclose(blend_weights(z * 37.5, vis), a, atol=1e-12)
    # nearer views dominate: raising one z lowers its weight
    z2 = z.clone()
    z2[0] = z2[0] * 1.5
    a2 = blend_weights(z2, vis)
    both = vis[0] & (vis.sum(0) > 1)
    assert (a2[0][both] < a[0][both]).all()


def _scene(rng, n=3, h=12, w=16):
    tgt = random_camera(rng, w, h)
    cams = [random_camera(rng, w, h) for _ in range(n)]
    feats = [torch.as_tensor(rng.normal(size=(4, h, w))) for _ in range(n)]
    depth = torch.as_tensor(rng.uniform(2.0, 4.0, size=(h, w)))
    return feats, depth, tgt, cams


def test_fuse_features_invariants(rng):
    feats, depth, tgt, cams = _scene(rng)
    out = fuse_features(feats, depth, tgt, cams)
    assert torch.allclose(out.alpha.sum(0)[out.coverage], torch.ones(int(out.coverage.sum()), dtype=D64), atol=1e-9)
    assert (out.W[:, ~out.coverage] == 0).all()
    perm = [2, 0, 1]
    out_p = fuse_features([feats[i] for i in perm], depth, tgt, [cams[i] for i in perm])
    assert torch.allclose(out_p.W, out.W, atol=1e-12)
    assert torch.equal(out_p.alpha, out.alpha[perm])


def test_fuse_features_single_view_and_identical_features(rng):
    feats, depth, tgt, cams = _scene(rng)
    # the target camera itself is always visible
    one = fuse_features([feats[0]], depth, tgt, [tgt])
    assert one.coverage.all() and torch.allclose(one.alpha, torch.ones_like(one.alpha))
    assert torch.allclose(one.W, feats[0], atol=1e-9)
    const = torch.full((4, 12, 16), 2.5, dtype=D64)
    out = fuse_features([const] * 3, depth, tgt, cams)
    assert torch.allclose(out.W[:, out.coverage], torch.full_like(out.W[:, out.coverage], 2.5), atol=1e-12)


def test_fuse_features_invisible_everywhere(rng):
    feats, depth, tgt, cams = _scene(rng, n=2)
    out = fuse_features(feats, -depth, tgt, cams)
    assert not out.coverage.any() and torch.count_nonzero(out.W) == 0 and torch.count_nonzero(out.alpha) == 0


def test_fuse_features_errors(rng):
    feats, depth, tgt, cams = _scene(rng)
    with pytest.raises(ConfigError):
        fuse_features(feats, depth, tgt, cams[:2])
    with pytest.raises(ConfigError):
        fuse_features([], depth, tgt, [])
    with pytest.raises(ConfigError):
        fuse_features(feats, depth[:-1], tgt, cams)
