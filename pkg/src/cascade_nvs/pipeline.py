"""End-to-end novel view synthesis: depth cascade, feature fusion and the generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera, scale_camera
from .costvol import CascadeResult, init_regularizer, regress_depth_cascade
from .errors import ConfigError
from .featfuse import fuse_features
from .generator import DEFAULT_CONFIG, GeneratorConfig, RecurrentState, extract_features, init_generator, render_view
from .learn import l1_image_loss, scaled_depth_loss
from .planes import DEFAULT_C, DepthScaling, adaptive_scale, cascade_schedule


@dataclass
class SceneData:
    """One dataset scene held in memory as float32 tensors."""

    images: list[torch.Tensor]  # (3, H, W)
    depths: list[torch.Tensor]  # (H, W), scene units
    cams: list[Camera]
    d_min: float
    d_max: float

    @classmethod
    def load(cls, index, dtype=torch.float32) -> "SceneData":
        imgs, deps, cams = [], [], []
        for i in range(len(index)):
            rgb, depth, cam = index.load_view(i)
            imgs.append(torch.as_tensor(np.ascontiguousarray(rgb.transpose(2, 0, 1)), dtype=dtype))
            deps.append(torch.as_tensor(np.asarray(depth), dtype=dtype))
            cams.append(cam)
        return cls(imgs, deps, cams, index.d_min, index.d_max)


def init_pipeline_params(gen: torch.Generator, backend: str = "learned", K: int = 3, config: GeneratorConfig = DEFAULT_CONFIG, dtype=torch.float32) -> dict:
    """Generator parameters plus, for the learned backend, one regularizer per stage."""
    if K != config.K:
        raise ConfigError(f"the generator is built for K={config.K} stages, got K={K}")
    params = init_generator(gen, config, dtype)
    if backend == "learned":
        for k in range(K):
            params.update(init_regularizer(config.extractor[K - 1 - k], gen, dtype, prefix=f"reg{k}"))
    return params


@dataclass
class ViewPrediction:
    image: torch.Tensor  # (3, H, W)
    depth: CascadeResult
    scaling: DepthScaling
    state: RecurrentState


def setup_cascade(d_min: float, d_max: float, M1: int = 48, K: int = 3, C: float = DEFAULT_C, delta1: float | None = None):
    """Depth scaling and cascade schedule; ``delta1`` overrides the interval derived from the range."""
    scaling, auto = adaptive_scale(d_min, d_max, C, M1)
    return scaling, cascade_schedule(M1, auto if delta1 is None else delta1, K)


@dataclass
class DepthPrediction:
    result: CascadeResult
    scaling: DepthScaling
    pyramids: list  # per-view FeaturePyramid, or None when features were not needed

    @property
    def depth(self) -> torch.Tensor:
        """Final-stage depth in scene units."""
        return self.result.depth / self.scaling.f


def predict_depth(
    images,
    cams: list[Camera],
    tgt_cam: Camera,
    d_min: float,
    d_max: float,
    params: dict | None = None,
    backend: str = "photometric",
    M1: int = 48,
    K: int = 3,
    C: float = DEFAULT_C,
    delta1: float | None = None,
    config: GeneratorConfig = DEFAULT_CONFIG,
    need_features: bool = False,
) -> DepthPrediction:
    """Run the depth cascade for the target camera.

    Features are extracted when the learned backend needs them or when
    ``need_features`` is set (the generator consumes them afterwards).
    """
    scaling, schedule = setup_cascade(d_min, d_max, M1, K, C, delta1)
    pyramids = None
    if backend == "learned" or need_features:
        if params is None:
            raise ConfigError("feature extraction needs generator parameters")
        pyramids = [extract_features(img, params, config) for img in images]
    if backend == "learned":
        res = regress_depth_cascade(None, cams, tgt_cam, schedule, scaling, "learned", params=params, features=[p.levels for p in pyramids])
    elif backend == "photometric":
        with torch.no_grad():
            res = regress_depth_cascade([img.detach() for img in images], cams, tgt_cam, schedule, scaling, "photometric")
    else:
        raise ConfigError(f"unknown backend {backend!r}")
    return DepthPrediction(res, scaling, pyramids)


def predict_view(
    images,
    cams: list[Camera],
    tgt_cam: Camera,
    d_min: float,
    d_max: float,
    params: dict,
    backend: str = "learned",
    state: RecurrentState | None = None,
    M1: int = 48,
    K: int = 3,
    config: GeneratorConfig = DEFAULT_CONFIG,
    C: float = DEFAULT_C,
    delta1: float | None = None,
) -> ViewPrediction:
    """Regress the target depth, fuse source features and render the target image."""
    dp = predict_depth(images, cams, tgt_cam, d_min, d_max, params, backend, M1, K, C, delta1, config, need_features=True)
    res, scaling = dp.result, dp.scaling
    f = scaling.f
    fused = []
    for k in range(len(res.stage_depths)):
        s = tgt_cam.width // res.stage_cams[k].width
        src = [scale_camera(c.with_translation_scaled(f), s) for c in cams]
        fused.append(fuse_features([p[k] for p in dp.pyramids], res.stage_depths[k], res.stage_cams[k], src).W)
    depth = res.depth
    depth_norm = (depth - scaling.C) / (scaling.scaled_max - scaling.C)
    img, new_state = render_view(fused, depth_norm, depth / f, tgt_cam, state or RecurrentState(), params, config)
    return ViewPrediction(img, res, scaling, new_state)


@dataclass
class FrameResult:
    image: torch.Tensor
    l1: torch.Tensor
    depth_loss: torch.Tensor
    depth_mae: float  # scene units
    mse: float


def render_scene_sequence(scene: SceneData, sources: list[int], targets: list[int], params: dict, config) -> list[FrameResult]:
    """Render rig views ``targets`` in order from ``sources`` and score them against ground truth."""
    state = RecurrentState()
    out = []
    imgs = [scene.images[i] for i in sources]
    cams = [scene.cams[i] for i in sources]
    for t in targets:
        pred = predict_view(imgs, cams, scene.cams[t], scene.d_min, scene.d_max, params, config.backend, state, config.M1, config.K)
        state = pred.state
        gt = scene.images[t]
        gt_d = scene.depths[t]
        l1 = l1_image_loss(pred.image, gt)
        valid = gt_d > 0
        dl, _ = scaled_depth_loss(pred.depth.depth, gt_d, pred.scaling.f, valid)
        mae = float((pred.depth.depth.detach() / pred.scaling.f - gt_d)[valid].abs().mean()) if valid.any() else 0.0
        mse = float(((pred.image.detach() - gt) ** 2).mean())
        out.append(FrameResult(pred.image, l1, dl, mae, mse))
    return out


def evaluate_view(scene: SceneData, params: dict, config) -> tuple[float, torch.Tensor]:
    """PSNR of the middle rig view rendered from all other views."""
    from .evalmetrics import psnr

    n = len(scene.cams)
    t = n // 2
    src = [i for i in range(n) if i != t]
    pred = predict_view([scene.images[i] for i in src], [scene.cams[i] for i in src], scene.cams[t], scene.d_min, scene.d_max, params, config.backend, None, config.M1, config.K)
    return psnr(pred.image.detach(), scene.images[t]), pred.image.detach()
