"""Losses, parameter initialization, the optimizer, gradient checking and toy training."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, DivergenceError

# --- initialization -------------------------------------------------------------


def fan_in_uniform(shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Uniform(-b, b) with b = sqrt(3 / fan_in), which keeps unit activation variance.

    ``shape`` is (out, in, *kernel); fan_in = in * prod(kernel).
    """
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(3.0 / fan_in)
    u = torch.rand(tuple(shape), generator=generator, dtype=torch.float64)
    return ((2.0 * u - 1.0) * bound).to(dtype)


# --- losses ----------------------------------------------------------------------


def l1_image_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    if pred.shape != target.shape:
        raise ConfigError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def scaled_depth_loss(depth_scaled: torch.Tensor, depth_gt: torch.Tensor, f: float, valid: torch.Tensor | None = None):
    """L1 between a scaled-unit depth estimate and f times the scene-unit ground truth.

    Returns:
        ``(loss, empty)``. When no pixel is valid the loss is a zero tensor and
        ``empty`` is True.
    """
    if depth_scaled.shape != depth_gt.shape:
        raise ConfigError(f"depth shapes differ: {tuple(depth_scaled.shape)} vs {tuple(depth_gt.shape)}")
    if valid is None:
        valid = torch.ones_like(depth_gt, dtype=torch.bool)
    n = int(valid.sum())
    if n == 0:
        return depth_scaled.sum() * 0.0, True
    diff = (depth_scaled - f * depth_gt).abs()
    return diff[valid].sum() / n, False


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    perceptual: float = 10.0
    adversarial: float = 1.0
    depth: float = 1.0

    def __post_init__(self):
        for name in ("l1", "perceptual", "adversarial", "depth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")


def total_loss(components: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of the loss terms.

    Recognized keys are ``l1``, ``depth``, ``perceptual`` and ``adversarial``.
    The last two have no implementation here and must be absent or zero.
    """
    unknown = set(components) - {"l1", "depth", "perceptual", "adversarial"}
    if unknown:
        raise ConfigError(f"unknown loss components: {sorted(unknown)}")
    for name in ("perceptual", "adversarial"):
        if name in components and float(components[name]) != 0.0:
            raise ConfigError(f"the {name} loss is not available in this implementation")
    total = weights.l1 * components.get("l1", 0.0)
    if weights.depth:
        total = total + weights.depth * components.get("depth", 0.0)
    return total


# --- optimizer -------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.9)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimState) -> tuple[dict, OptimState]:
    """One Adam update. Returns new parameter tensors; ``state`` is updated in place.

    Parameters without a gradient entry are left unchanged. A non-finite
    gradient raises :class:`DivergenceError` naming the offending tensors.
    """
    bad = [k for k, g in grads.items() if g is not None and not torch.isfinite(g).all()]
    if bad:
        raise DivergenceError(f"non-finite gradient at step {state.step + 1} in: {', '.join(sorted(bad))}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = g.detach()
        m = b1 * state.m.get(name, torch.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, torch.zeros_like(p)) + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        out[name] = (p.detach() - state.lr * (m / c1) / ((v / c2).sqrt() + state.eps)).requires_grad_(p.requires_grad)
    return out, state


# --- gradient check ----------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: dict[str, torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    seed: int = 0,
    analytic: Callable[[dict], dict] | None = None,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(**inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection. For each
    input block the error is max|a - n| / max(max|a|, max|n|, 1e-12).

    Args:
        fn: the operation; receives the inputs as keyword arguments.
        inputs: float64 tensors; every entry is checked.
        tolerance: pass threshold on the largest block error.
        step: finite-difference step.
        seed: seeds the output projection and entry subsampling.
        analytic: optional override returning ``{name: gradient}``; by default
            torch autograd differentiates the projected output.
        max_entries: check at most this many randomly chosen entries per block.
    """
    gen = torch.Generator().manual_seed(seed)
    base = {k: v.detach().to(torch.float64) for k, v in inputs.items()}
    out0 = fn(**base)
    weight = torch.randn(out0.shape, generator=gen, dtype=torch.float64) if out0.dim() else torch.ones((), dtype=torch.float64)

    def scalar(values):
        return (fn(**values) * weight).sum()

    if analytic is None:
        leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
        s = scalar(leaves)
        grads = torch.autograd.grad(s, list(leaves.values()), allow_unused=True)
        ana = {k: (g if g is not None else torch.zeros_like(base[k])) for k, g in zip(leaves, grads)}
    else:
        ana = analytic({k: v.clone() for k, v in base.items()})
        ana = {k: ana[k] for k in base}

    errors = {}
    with torch.no_grad():
        for name, x in base.items():
            n = x.numel()
            idx = range(n)
            if max_entries is not None and n > max_entries:
                idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
            a_flat = ana[name].reshape(-1)
            a_sel, n_sel = [], []
            for i in idx:
                plus = dict(base)
                minus = dict(base)
                xp = x.clone().reshape(-1)
                xm = x.clone().reshape(-1)
                xp[i] += step
                xm[i] -= step
                plus[name] = xp.reshape(x.shape)
                minus[name] = xm.reshape(x.shape)
                n_sel.append(float((scalar(plus) - scalar(minus)) / (2 * step)))
                a_sel.append(float(a_flat[i]))
            a = np.asarray(a_sel)
            num = np.asarray(n_sel)
            if a.size == 0:
                continue
            scale = max(np.abs(a).max(), np.abs(num).max(), 1e-12)
            errors[name] = float(np.abs(a - num).max() / scale)
    return GradCheckReport(errors, tolerance)


# --- toy training ---------------------------------------------------------------------


def psnr_from_mse(mse: float) -> float:
    return 99.0 if mse <= 1e-10 else float(10.0 * math.log10(1.0 / mse))


@dataclass
class ToyConfig:
    """Settings for :func:`train_toy`."""

    epochs: int = 20
    seed: int = 0
    lr: float = 1e-3
    weights: LossWeights = LossWeights()
    backend: str = "learned"
    n_sources: tuple[int, int] = (2, 4)  # inclusive range sampled per step
    seq_len: tuple[int, int] = (1, 2)
    M1: int = 48
    K: int = 3


def _log_line(fh, record: dict):
    fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_toy(train_scenes, eval_scenes, config: ToyConfig = ToyConfig(), log_path=None, checkpoint_path=None):
    """Train the generator (and the learned regularizer) on synthetic scenes.

    Every epoch visits the training scenes in a seeded order. Each step picks
    a short sequence of target views from the scene's rig and a random subset
    of the remaining views as sources, renders the sequence with a threaded
    recurrent state and takes one Adam step on the summed frame losses.

    Args:
        train_scenes: list of :class:`~cascade_nvs.synthdata.DatasetIndex`.
        eval_scenes: held-out scenes; their middle rig view is rendered from
            the others after each epoch to measure PSNR.
        config: training settings.
        log_path: JSON-lines metric log (one object per epoch).
        checkpoint_path: parameters are written here after every epoch.

    Returns:
        ``(params, log)`` where ``params`` holds generator and regularizer
        tensors and ``log`` is the list of per-epoch records.
    """
    from .fileio import write_checkpoint
    from .pipeline import SceneData, evaluate_view, init_pipeline_params, render_scene_sequence

    if not train_scenes:
        raise ConfigError("train_toy needs at least one training scene")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    params = init_pipeline_params(gen, backend=config.backend, K=config.K)
    params = {k: v.requires_grad_(True) for k, v in params.items()}
    state = OptimState(lr=config.lr)
    data = [SceneData.load(s) for s in train_scenes]
    held = [SceneData.load(s) for s in eval_scenes]
    log = []
    fh = open(log_path, "w") if log_path is not None else None
    last_good = {k: v.detach().clone() for k, v in params.items()}
    try:
        for epoch in range(1, config.epochs + 1):
            l1_sum = depth_sum = 0.0
            mse_sum = 0.0
            n_frames = 0
            for si in rng.permutation(len(data)):
                scene = data[si]
                n_views = len(scene.cams)
                q = int(rng.integers(config.seq_len[0], config.seq_len[1] + 1))
                targets = [int(t) for t in rng.choice(n_views, size=q, replace=False)]
                pool = [i for i in range(n_views) if i not in targets]
                hi = min(config.n_sources[1], len(pool))
                lo = min(config.n_sources[0], hi)
                n_src = int(rng.integers(lo, hi + 1))
                sources = sorted(int(s) for s in rng.choice(pool, size=n_src, replace=False))
                frames = render_scene_sequence(scene, sources, targets, params, config)
                loss = 0.0
                for fr in frames:
                    comp = {"l1": fr.l1, "depth": fr.depth_loss}
                    loss = loss + total_loss(comp, config.weights)
                    l1_sum += float(fr.l1.detach())
                    depth_sum += float(fr.depth_mae)
                    mse_sum += float(fr.mse)
                    n_frames += 1
                loss = loss / len(frames)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"loss became {float(loss.detach())} in epoch {epoch}")
                names = list(params)
                grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
                grads = {k: g for k, g in zip(names, grads) if g is not None}
                params, state = adam_step(params, grads, state)
                last_good = {k: v.detach().clone() for k, v in params.items()}
            with torch.no_grad():
                held_psnr = [evaluate_view(s, params, config)[0] for s in held]
            record = {
                "epoch": epoch,
                "l1": l1_sum / n_frames,
                "depth_mae": depth_sum / n_frames,
                "train_psnr": psnr_from_mse(mse_sum / n_frames),
                "heldout_psnr": float(np.mean(held_psnr)) if held_psnr else None,
            }
            log.append(record)
            if fh is not None:
                _log_line(fh, record)
                fh.flush()
            if checkpoint_path is not None:
                write_checkpoint(checkpoint_path, {k: v.detach().numpy() for k, v in params.items()})
    except DivergenceError:
        if checkpoint_path is not None:
            write_checkpoint(checkpoint_path, {k: v.numpy() for k, v in last_good.items()})
        raise
    finally:
        if fh is not None:
            fh.close()
    return {k: v.detach() for k, v in params.items()}, log
