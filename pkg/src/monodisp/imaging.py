"""Raster primitives shared by the loss and data modules.

Rasters are torch tensors laid out channel-first: scalar fields are ``(..., H, W)``
and images are ``(..., C, H, W)``.  Every function is pure.
"""
import math

import torch
import torch.nn.functional as F

from .errors import InvalidInputError

LAPLACIAN_STENCIL = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _require_size(t: torch.Tensor, min_h: int, min_w: int, what: str):
    if t.dim() < 2:
        raise InvalidInputError(f"{what}: expected at least 2 dims, got shape {tuple(t.shape)}")
    h, w = t.shape[-2:]
    if h < min_h or w < min_w:
        raise InvalidInputError(f"{what}: raster {h}x{w} is smaller than {min_h}x{min_w}")


def _planes(t: torch.Tensor):
    """View every (H, W) plane as its own batch entry; returns tensor and an inverse."""
    shape = t.shape
    out = t.reshape(-1, 1, *shape[-2:])
    return out, lambda y: y.reshape(*shape[:-2], *y.shape[-2:])


def grad_x(field) -> torch.Tensor:
    """Forward difference along columns; last column is zero (so a single column gives zeros)."""
    f = _as_tensor(field)
    _require_size(f, 1, 1, "grad_x")
    g = torch.zeros_like(f)
    g[..., :, :-1] = f[..., :, 1:] - f[..., :, :-1]
    return g


def grad_y(field) -> torch.Tensor:
    """Forward difference along rows; last row is zero."""
    f = _as_tensor(field)
    _require_size(f, 1, 1, "grad_y")
    g = torch.zeros_like(f)
    g[..., :-1, :] = f[..., 1:, :] - f[..., :-1, :]
    return g


def channel_mean(image) -> torch.Tensor:
    """Average an image ``(..., C, H, W)`` over channels; 2-d input passes through."""
    img = _as_tensor(image)
    if img.dim() == 2:
        return img
    return img.mean(dim=-3)


def laplacian(image) -> torch.Tensor:
    """5-point Laplacian of the channel-mean image, replicate borders.

    Returns a signed field of shape ``(..., H, W)``; callers take the magnitude.
    """
    img = _as_tensor(image)
    _require_size(img, 3, 3, "laplacian")
    gray = channel_mean(img)
    x, undo = _planes(gray)
    kernel = torch.tensor(LAPLACIAN_STENCIL, dtype=x.dtype, device=x.device).view(1, 1, 3, 3)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    return undo(F.conv2d(padded, kernel))


def gaussian_kernel1d(sigma: float, dtype=torch.float64) -> torch.Tensor:
    radius = max(1, math.ceil(3.0 * sigma))
    t = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma: float = 1.0) -> torch.Tensor:
    """Separable Gaussian blur with radius ``ceil(3*sigma)`` and replicate borders.

    Works on fields ``(H, W)`` and images ``(..., C, H, W)``; each channel is
    filtered independently.
    """
    if not sigma > 0:
        raise InvalidInputError(f"gaussian_blur: sigma must be positive, got {sigma}")
    img = _as_tensor(image)
    _require_size(img, 1, 1, "gaussian_blur")
    x, undo = _planes(img)
    k = gaussian_kernel1d(sigma, dtype=x.dtype).to(x.device)
    r = (k.numel() - 1) // 2
    x = F.pad(x, (r, r, 0, 0), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    x = F.pad(x, (0, 0, r, r), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    return undo(x)


def downsample_half(image) -> torch.Tensor:
    """2x2 average pooling; height and width must be even."""
    img = _as_tensor(image)
    _require_size(img, 2, 2, "downsample_half")
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise InvalidInputError(f"downsample_half: dimensions must be even, got {h}x{w}")
    x, undo = _planes(img)
    return undo(F.avg_pool2d(x, 2))
