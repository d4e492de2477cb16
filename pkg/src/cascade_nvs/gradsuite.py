"""Finite-difference gradient suite over every trainable operation."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .costvol import cost_to_prob_learned, init_regularizer
from .generator import init_recurrent, init_spade, recurrent_cell, spade_block
from .learn import GradCheckReport, grad_check, l1_image_loss, scaled_depth_loss, total_loss
from .warp import bilinear_sample

DTYPE = torch.float64


def _rand(gen, *shape, lo=-1.0, hi=1.0):
    return lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=DTYPE)


def _off_grid(gen, n, limit, margin=0.02):
    """Coordinates in (-0.5, limit + 0.5) kept away from integers so no kink lies within the step."""
    x = _rand(gen, n, lo=-0.5, hi=limit + 0.5)
    frac = x - x.floor()
    return torch.where(frac < margin, x + 2 * margin, torch.where(frac > 1 - margin, x - 2 * margin, x))


def _randomize(params, gen, scale=0.5):
    return {k: scale * _rand(gen, *v.shape) for k, v in params.items()}


def case_bilinear(gen):
    C = int(torch.randint(1, 4, (1,), generator=gen))
    H, W = (int(v) for v in torch.randint(3, 8, (2,), generator=gen))
    n = int(torch.randint(4, 12, (1,), generator=gen))
    coords = torch.stack([_off_grid(gen, n, W - 1), _off_grid(gen, n, H - 1)], dim=-1)
    inputs = {"img": _rand(gen, C, H, W), "coords": coords}
    return (lambda img, coords: bilinear_sample(img, coords).values), inputs


def case_spade(gen):
    C = int(torch.randint(1, 4, (1,), generator=gen))
    h, w = (int(v) for v in torch.randint(3, 7, (2,), generator=gen))
    dh, dw = (int(v) for v in torch.randint(2, 9, (2,), generator=gen))
    hidden = int(torch.randint(2, 5, (1,), generator=gen))
    p = _randomize(init_spade(torch.Generator().manual_seed(0), C, "s", hidden, DTYPE), gen)
    inputs = {"x": _rand(gen, C, h, w), "depth": _rand(gen, dh, dw, lo=0.0, hi=1.0), **p}

    def fn(x, depth, **params):
        return spade_block(x, depth, params, "s")

    return fn, inputs


def case_recurrent(gen):
    cin = int(torch.randint(1, 4, (1,), generator=gen))
    hid = int(torch.randint(1, 4, (1,), generator=gen))
    h, w = (int(v) for v in torch.randint(2, 6, (2,), generator=gen))
    p = _randomize(init_recurrent(torch.Generator().manual_seed(0), cin, hid, "r", DTYPE), gen)
    inputs = {"x": _rand(gen, cin, h, w), "c_prev": _rand(gen, hid, h, w), "h_prev": _rand(gen, hid, h, w), **p}

    def fn(x, c_prev, h_prev, **params):
        c, hh = recurrent_cell(x, c_prev, h_prev, params, "r")
        return torch.cat([c, hh])

    return fn, inputs


def case_regularizer(gen):
    C = int(torch.randint(1, 4, (1,), generator=gen))
    M = int(torch.randint(2, 5, (1,), generator=gen))
    h, w = (int(v) for v in torch.randint(2, 5, (2,), generator=gen))
    p = _randomize(init_regularizer(C, torch.Generator().manual_seed(0), DTYPE, "g"), gen)
    inputs = {"volume": _rand(gen, C, M, h, w), **p}

    def fn(volume, **params):
        return cost_to_prob_learned(volume, params, "g").V

    return fn, inputs


def _away_from_zero(x, margin=0.05):
    return torch.where(x.abs() < margin, x + 2 * margin * torch.sign(x + 1e-30), x)


def case_losses(gen):
    h, w = (int(v) for v in torch.randint(2, 6, (2,), generator=gen))
    target = _rand(gen, 3, h, w, lo=0.0, hi=1.0)
    pred = target + _away_from_zero(_rand(gen, 3, h, w, lo=-0.3, hi=0.3))
    f = float(_rand(gen, 1, lo=1.0, hi=50.0))
    gt_d = _rand(gen, h, w, lo=1.0, hi=3.0)
    d_hat = f * gt_d + _away_from_zero(_rand(gen, h, w, lo=-2.0, hi=2.0))
    valid = torch.rand((h, w), generator=gen) > 0.3
    valid[0, 0] = True
    inputs = {"pred": pred, "depth": d_hat}

    def fn(pred, depth):
        l1 = l1_image_loss(pred, target)
        ld, _ = scaled_depth_loss(depth, gt_d, f, valid)
        return torch.stack([l1, ld, total_loss({"l1": l1, "depth": ld})])

    return fn, inputs


CASES = {
    "bilinear_sample": case_bilinear,
    "spade_block": case_spade,
    "recurrent_cell": case_recurrent,
    "cost_to_prob_learned": case_regularizer,
    "losses": case_losses,
}


@dataclass
class SuiteResult:
    reports: dict[str, list[GradCheckReport]]
    tolerance: float

    def max_error(self, name: str) -> float:
        return max(r.max_error for r in self.reports[name])

    @property
    def passed(self) -> bool:
        return all(self.max_error(n) < self.tolerance for n in self.reports)

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "operations": {n: {"shapes": len(r), "max_rel_error": self.max_error(n)} for n, r in self.reports.items()},
        }


def run_suite(n_shapes: int = 20, seed: int = 0, tolerance: float = 1e-4, max_entries: int = 40, ops=None) -> SuiteResult:
    """Check every registered operation on ``n_shapes`` random shapes in double precision."""
    reports = {}
    for name in ops or CASES:
        gen = torch.Generator().manual_seed(seed)
        out = []
        for i in range(n_shapes):
            fn, inputs = CASES[name](gen)
            out.append(grad_check(fn, inputs, tolerance=tolerance, seed=seed + i, max_entries=max_entries))
        reports[name] = out
    return SuiteResult(reports, tolerance)
