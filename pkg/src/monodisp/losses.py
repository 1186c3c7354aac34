"""Training objective: data terms, adaptive weights and adaptive regularizers.

Single-term functions return raw sums over every element they are given
(pixels, channels and batch).  :func:`total_loss` evaluates the full objective
over the loss pyramid and normalizes each term to a per-pixel mean so the
term weights keep their meaning across scales.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import InvalidInputError
from .imaging import channel_mean, downsample_half, gaussian_blur, grad_x, grad_y, laplacian
from .warp import Side, cyclic_tensor, reconstruct_images

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4


@dataclass(frozen=True)
class LossWeights:
    w_ph: float = 0.15
    w_st: float = 0.425
    w_sm: float = 0.10
    w_bc: float = 1.05
    c: float = 5.0
    pyramid_levels: int = 4
    blur_sigma: float = 1.0

    def __post_init__(self):
        for f in ("w_ph", "w_st", "w_sm", "w_bc"):
            v = getattr(self, f)
            if not (v >= 0 and v < float("inf")):
                raise InvalidInputError(f"{f} must be a finite non-negative number, got {v}")
        if not self.c > 0:
            raise InvalidInputError(f"c must be positive, got {self.c}")
        if self.pyramid_levels < 1:
            raise InvalidInputError("pyramid_levels must be at least 1")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.w_ph * factor, self.w_st * factor, self.w_sm * factor,
                           self.w_bc * factor, self.c, self.pyramid_levels, self.blur_sigma)


@dataclass
class DisparityPyramid:
    """Per-scale ``(left, right)`` disparity tensors, finest scale first.

    Each tensor is ``(B, H_r, W_r)`` in pixels at scale ``r``.
    """

    scales: list = field(default_factory=list)

    def __len__(self):
        return len(self.scales)

    def __getitem__(self, r):
        return self.scales[r]

    def detach(self) -> "DisparityPyramid":
        return DisparityPyramid([(l.detach(), r.detach()) for l, r in self.scales])


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def photometric_loss(image, recon) -> torch.Tensor:
    """Sum of absolute residuals over every channel and pixel."""
    image, recon = torch.as_tensor(image), torch.as_tensor(recon)
    _same_shape(image, recon, "photometric_loss")
    return (image - recon).abs().sum()


def _box3(x: torch.Tensor) -> torch.Tensor:
    planes = x.reshape(-1, 1, *x.shape[-2:])
    planes = F.pad(planes, (1, 1, 1, 1), mode="replicate")
    return F.avg_pool2d(planes, 3, stride=1).reshape(x.shape)


def ssim(image, recon) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows, averaged over channels.

    Inputs are ``(..., C, H, W)`` (or ``(H, W)``); output is ``(..., H, W)``.
    """
    x, y = torch.as_tensor(image), torch.as_tensor(recon)
    _same_shape(x, y, "ssim")
    if x.dim() < 2 or x.shape[-1] < 3 or x.shape[-2] < 3:
        raise InvalidInputError(f"ssim needs at least 3x3 rasters, got {tuple(x.shape)}")
    mu_x, mu_y = _box3(x), _box3(y)
    var_x = _box3(x * x) - mu_x ** 2
    var_y = _box3(y * y) - mu_y ** 2
    cov = _box3(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return channel_mean(num / den)


def structural_loss(image, recon) -> torch.Tensor:
    return (1 - ssim(image, recon)).sum()


def residual_map(image, recon) -> torch.Tensor:
    """Channel-mean absolute residual, ``(..., H, W)``."""
    image, recon = torch.as_tensor(image), torch.as_tensor(recon)
    _same_shape(image, recon, "residual_map")
    return channel_mean((image - recon).abs())


def adaptive_weights(image, recon, c: float = 5.0) -> torch.Tensor:
    """``exp(-c * rho(x) * mean(rho))``, detached from the graph.

    ``rho`` is the local residual; dividing by the global residual's reciprocal
    is written as a product so the converged case ``rho == 0`` gives 1.  The
    mean is taken per image over its last two axes.
    """
    if not c > 0:
        raise InvalidInputError(f"c must be positive, got {c}")
    rho = residual_map(image, recon).detach()
    mu = rho.mean(dim=(-2, -1), keepdim=True)
    return torch.exp(-c * rho * mu)


def edge_weights(image, blur_sigma: float = 1.0) -> torch.Tensor:
    """``exp(-|laplacian(blur(image))|)`` in (0, 1]."""
    img = torch.as_tensor(image)
    return torch.exp(-laplacian(gaussian_blur(img, blur_sigma)).abs()).detach()


def smoothness_loss(disparity, alpha, lam) -> torch.Tensor:
    d = torch.as_tensor(disparity)
    alpha, lam = torch.as_tensor(alpha, dtype=d.dtype), torch.as_tensor(lam, dtype=d.dtype)
    _same_shape(d, alpha, "smoothness_loss")
    _same_shape(d, lam, "smoothness_loss")
    return (alpha * lam * (grad_x(d).abs() + grad_y(d).abs())).sum()


def bilateral_cyclic_loss(disparity, recon_disparity, alpha) -> torch.Tensor:
    d = torch.as_tensor(disparity)
    d_hat = torch.as_tensor(recon_disparity, dtype=d.dtype)
    alpha = torch.as_tensor(alpha, dtype=d.dtype)
    _same_shape(d, d_hat, "bilateral_cyclic_loss")
    _same_shape(d, alpha, "bilateral_cyclic_loss")
    return (alpha * (d - d_hat).abs()).sum()


def init_loss(images: Sequence, recons: Sequence, weights: LossWeights) -> torch.Tensor:
    """Data-fidelity objective ``w_ph * l_ph + w_st * l_st`` summed over the given views."""
    if len(images) != len(recons):
        raise InvalidInputError("init_loss: need one reconstruction per image")
    ph = sum(photometric_loss(i, r) for i, r in zip(images, recons))
    st = sum(structural_loss(i, r) for i, r in zip(images, recons))
    return weights.w_ph * ph + weights.w_st * st


def value_and_grad(fn: Callable[..., torch.Tensor], *inputs: torch.Tensor):
    """Evaluate ``fn(*inputs)`` and its autograd gradient with respect to each input."""
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    value = fn(*leaves)
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    grads = [torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads)]
    return value.detach(), grads if len(grads) > 1 else grads[0]


def numeric_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x, step: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar function, element by element, in float64."""
    if not step > 0:
        raise InvalidInputError("step must be positive")
    x = torch.as_tensor(x, dtype=torch.float64).detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(x))
            flat[i] = orig - step
            lo = float(fn(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


TERMS = ("photometric", "structural", "smoothness", "cyclic")


@dataclass
class LossBreakdown:
    """Per-scale, per-side term values (already per-pixel normalized) and the total.

    Term tensors are ``(levels, 2)``; column 0 is the left view.  ``total`` keeps
    its autograd graph.
    """

    photometric: torch.Tensor
    structural: torch.Tensor
    smoothness: torch.Tensor
    cyclic: torch.Tensor
    mean_alpha: torch.Tensor
    weights: LossWeights
    total: torch.Tensor

    def weighted_terms(self) -> dict:
        w = self.weights
        decay = 0.5 ** torch.arange(self.smoothness.shape[0], dtype=self.smoothness.dtype)
        return {
            "photometric": w.w_ph * self.photometric,
            "structural": w.w_st * self.structural,
            "smoothness": w.w_sm * decay[:, None] * self.smoothness,
            "cyclic": w.w_bc * self.cyclic,
        }

    def record(self) -> dict:
        """Plain-float summary for logging."""
        out = {name: float(getattr(self, name).detach().sum()) for name in TERMS}
        out["weighted"] = {k: float(v.detach().sum()) for k, v in self.weighted_terms().items()}
        out["total"] = float(self.total.detach())
        out["mean_alpha"] = self.mean_alpha.detach().tolist()
        return out


def image_pyramid(image: torch.Tensor, levels: int) -> list:
    out = [image]
    for _ in range(levels - 1):
        out.append(downsample_half(out[-1]))
    return out


def total_loss(left, right, pyramid: DisparityPyramid, weights: LossWeights = LossWeights(),
               data_only: bool = False) -> LossBreakdown:
    """Full objective over the loss pyramid for a batch of stereo pairs.

    ``left``/``right`` are ``(B, C, H, W)`` full-resolution images, ``pyramid``
    holds ``weights.pyramid_levels`` scales.  With ``data_only`` the
    regularizers are skipped (reported as zero), which is the initial-branch
    objective of the two-branch decoder.
    """
    left, right = torch.as_tensor(left), torch.as_tensor(right)
    if left.dim() == 3:
        left, right = left.unsqueeze(0), right.unsqueeze(0)
    _same_shape(left, right, "total_loss")
    levels = weights.pyramid_levels
    if len(pyramid) != levels:
        raise InvalidInputError(f"pyramid has {len(pyramid)} scales, expected {levels}")
    lefts, rights = image_pyramid(left, levels), image_pyramid(right, levels)

    rows = {name: [] for name in TERMS}
    alphas = []
    zero = left.new_zeros(())
    for r in range(levels):
        d_left, d_right = pyramid[r]
        if d_left.dim() == 2:
            d_left, d_right = d_left.unsqueeze(0), d_right.unsqueeze(0)
        img = (lefts[r], rights[r])
        if d_left.shape[-2:] != img[0].shape[-2:]:
            raise InvalidInputError(
                f"scale {r}: disparity {tuple(d_left.shape[-2:])} vs image {tuple(img[0].shape[-2:])}")
        d = (d_left, d_right)
        recon = reconstruct_images(img[0], img[1], d_left, d_right)
        b, ch, h, w = img[0].shape
        npix = b * h * w
        per_scale = {name: [] for name in TERMS}
        alpha_row = []
        for s in Side:
            alpha = adaptive_weights(img[s], recon[s], weights.c)
            alpha_row.append(alpha.mean())
            per_scale["photometric"].append(photometric_loss(img[s], recon[s]) / (npix * ch))
            per_scale["structural"].append(structural_loss(img[s], recon[s]) / npix)
            if data_only:
                per_scale["smoothness"].append(zero)
                per_scale["cyclic"].append(zero)
                continue
            lam = edge_weights(img[s], weights.blur_sigma)
            per_scale["smoothness"].append(smoothness_loss(d[s], alpha, lam) / npix)
            d_hat = cyclic_tensor(d[s], d[1 - s], s)
            per_scale["cyclic"].append(bilateral_cyclic_loss(d[s], d_hat, alpha) / npix)
        for name in TERMS:
            rows[name].append(torch.stack(per_scale[name]))
        alphas.append(torch.stack(alpha_row))

    terms = {name: torch.stack(rows[name]) for name in TERMS}
    partial = LossBreakdown(**terms, mean_alpha=torch.stack(alphas).detach(),
                            weights=weights, total=zero)
    partial.total = sum(v.sum() for v in partial.weighted_terms().values())
    return partial
