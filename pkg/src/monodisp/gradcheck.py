"""Finite-difference checks of the loss-term gradients with respect to disparity.

Each term is checked on small random float64 instances.  Elements whose
perturbation can cross a non-differentiable point are excluded: a sampling
coordinate within ``margin`` of an integer (the interpolation kinks) or an
L1 argument within ``margin`` of zero.  Dependence of those arguments on each
disparity element is read off their Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .imaging import grad_x, grad_y
from .losses import (adaptive_weights, bilateral_cyclic_loss, edge_weights, numeric_gradient,
                     photometric_loss, smoothness_loss, structural_loss, value_and_grad)
from .warp import Side, cyclic_tensor, horizontal_resample

GRAD_TERMS = ("photometric", "structural", "smoothness", "cyclic")


@dataclass
class TermCheck:
    term: str
    max_rel_error: float
    n_checked: int
    n_excluded: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol and self.n_checked > 0


def _columns(width: int, like: torch.Tensor) -> torch.Tensor:
    return torch.arange(width, dtype=like.dtype).expand_as(like)


def _near_integer(coords: torch.Tensor) -> torch.Tensor:
    return coords - coords.detach().round()


def _instance(rng: np.random.Generator, size: int, max_disp: float):
    h = w = size
    left = torch.from_numpy(rng.uniform(0, 1, (1, 3, h, w)))
    right = torch.from_numpy(rng.uniform(0, 1, (1, 3, h, w)))
    d = torch.from_numpy(rng.uniform(0, max_disp, (2, 1, h, w)))
    return left, right, d


def _term_functions(term: str, left, right, d):
    """``(loss(d), kink_args(d))`` for a stacked ``(2, 1, H, W)`` disparity pair."""
    w = left.shape[-1]
    x = _columns(w, d[0])
    d0 = d[0].detach()
    recon0 = horizontal_resample(right, d0, Side.LEFT.direction)
    alpha = adaptive_weights(left, recon0)[0]
    lam = edge_weights(left)[0]

    if term == "photometric":
        def loss(dd):
            return photometric_loss(left, horizontal_resample(right, dd[0], -1))

        def kinks(dd):
            return torch.cat([_near_integer(x - dd[0]).reshape(-1),
                              (left - horizontal_resample(right, dd[0], -1)).reshape(-1)])
    elif term == "structural":
        def loss(dd):
            return structural_loss(left, horizontal_resample(right, dd[0], -1))

        def kinks(dd):
            return _near_integer(x - dd[0]).reshape(-1)
    elif term == "smoothness":
        def loss(dd):
            return smoothness_loss(dd[0, 0], alpha, lam)

        def kinks(dd):
            return torch.cat([grad_x(dd[0, 0]).reshape(-1), grad_y(dd[0, 0]).reshape(-1)])
    elif term == "cyclic":
        def loss(dd):
            return bilateral_cyclic_loss(dd[0], cyclic_tensor(dd[0], dd[1], Side.LEFT), alpha[None])

        def kinks(dd):
            return torch.cat([_near_integer(x + dd[1]).reshape(-1),
                              _near_integer(x - dd[0]).reshape(-1),
                              (dd[0] - cyclic_tensor(dd[0], dd[1], Side.LEFT)).reshape(-1)])
    else:
        raise ValueError(f"unknown term {term!r}; choose from {GRAD_TERMS}")
    return loss, kinks


def excluded_elements(kinks: Callable, d: torch.Tensor, margin: float) -> torch.Tensor:
    """Boolean mask over ``d``: elements that feed an argument within ``margin`` of a kink."""
    args = kinks(d).detach()
    near = args.abs() < margin
    if not near.any():
        return torch.zeros_like(d, dtype=torch.bool)
    jac = torch.autograd.functional.jacobian(kinks, d).reshape(args.numel(), -1)
    touched = (jac[near] != 0).any(dim=0)
    return touched.reshape(d.shape)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> torch.Tensor:
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    return (analytic - numeric).abs() / scale


def check_term(term: str, rng: np.random.Generator, size: int = 8, max_disp: float = 3.0,
               margin: float = 1e-3, step: float = 1e-6) -> TermCheck:
    left, right, d = _instance(rng, size, max_disp)
    loss, kinks = _term_functions(term, left, right, d)
    _, analytic = value_and_grad(loss, d)
    numeric = numeric_gradient(loss, d, step)
    skip = excluded_elements(kinks, d, margin)
    # smoothness and photometric depend only on the left field
    used = torch.ones_like(skip)
    if term != "cyclic":
        used[1] = False
    keep = used & ~skip
    err = relative_error(analytic, numeric)[keep]
    return TermCheck(term, float(err.max()) if err.numel() else float("nan"),
                     int(keep.sum()), int((used & skip).sum()))


def run_suite(n_instances: int = 20, seed: int = 0, size: int = 8, terms=GRAD_TERMS, **kwargs) -> dict:
    """Worst-case check per term over ``n_instances`` random instances."""
    rng = np.random.default_rng(seed)
    out = {}
    for term in terms:
        worst, checked, excluded = 0.0, 0, 0
        for _ in range(n_instances):
            r = check_term(term, rng, size, **kwargs)
            worst = max(worst, r.max_rel_error)
            checked += r.n_checked
            excluded += r.n_excluded
        out[term] = TermCheck(term, worst, checked, excluded)
    return out
