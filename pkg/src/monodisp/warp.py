"""1-d horizontal bilinear resampling and the disparity cyclic constructions.

Sign convention: the left view is reconstructed by sampling the right view at
``x - d_left(x)`` (direction -1) and the right view by sampling the left view at
``x + d_right(x)`` (direction +1).  Sampling coordinates are clamped to the
image border.
"""
from dataclasses import dataclass
from enum import IntEnum

import torch

from .errors import InvalidInputError


class Side(IntEnum):
    LEFT = 0
    RIGHT = 1

    @property
    def direction(self) -> int:
        return -1 if self is Side.LEFT else 1

    @property
    def other(self) -> "Side":
        return Side(1 - self)


@dataclass(frozen=True)
class DisparityField:
    """A disparity raster in pixels at its own resolution, tagged with its view."""

    data: torch.Tensor
    side: Side

    def __post_init__(self):
        object.__setattr__(self, "side", Side(self.side))


class _HorizontalSampler(torch.autograd.Function):
    """Two-tap linear interpolation along the last axis with an explicit backward."""

    @staticmethod
    def forward(ctx, source, disparity, direction):
        # source (N, C, H, W), disparity (N, H, W)
        width = source.shape[-1]
        base = torch.arange(width, dtype=disparity.dtype, device=disparity.device)
        coords = base + direction * disparity
        # non-finite disparities must surface as non-finite output, not bad indices
        invalid = ~torch.isfinite(coords)
        clamped = coords.nan_to_num(0.0).clamp(0, width - 1)
        x0 = clamped.floor()
        frac = (clamped - x0).unsqueeze(1)
        x0 = x0.long()
        x1 = (x0 + 1).clamp(max=width - 1)
        idx0 = x0.unsqueeze(1).expand_as(source)
        idx1 = x1.unsqueeze(1).expand_as(source)
        v0 = source.gather(-1, idx0)
        v1 = source.gather(-1, idx1)
        out = (1 - frac) * v0 + frac * v1
        if invalid.any():
            out = out.masked_fill(invalid.unsqueeze(1), float("nan"))
        inside = ((coords > 0) & (coords < width - 1)).unsqueeze(1)
        ctx.save_for_backward(idx0, idx1, frac, v1 - v0, inside)
        ctx.direction = direction
        ctx.source_shape = source.shape
        return out

    @staticmethod
    def backward(ctx, grad_out):
        idx0, idx1, frac, slope, inside = ctx.saved_tensors
        grad_source = grad_disp = None
        if ctx.needs_input_grad[0]:
            grad_source = grad_out.new_zeros(ctx.source_shape)
            grad_source.scatter_add_(-1, idx0, (1 - frac) * grad_out)
            grad_source.scatter_add_(-1, idx1, frac * grad_out)
        if ctx.needs_input_grad[1]:
            grad_disp = (ctx.direction * grad_out * slope * inside).sum(dim=1)
        return grad_source, grad_disp, None


def horizontal_resample(source, disparity, direction: int) -> torch.Tensor:
    """Sample ``source`` at ``x + direction * disparity(x)`` along each row.

    ``source`` is ``(H, W)``, ``(C, H, W)`` or ``(B, C, H, W)``; ``disparity``
    is ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)`` and is shared by all
    channels.  The result has the shape of ``source`` and is differentiable
    with respect to both arguments.
    """
    if direction not in (-1, 1):
        raise InvalidInputError(f"direction must be -1 or +1, got {direction}")
    src = torch.as_tensor(source)
    disp = torch.as_tensor(disparity, dtype=src.dtype)
    if src.dim() < 2 or src.dim() > 4:
        raise InvalidInputError(f"source must be 2-, 3- or 4-d, got shape {tuple(src.shape)}")
    if disp.shape[-2:] != src.shape[-2:]:
        raise InvalidInputError(
            f"disparity {tuple(disp.shape)} does not match source {tuple(src.shape)}")
    h, w = src.shape[-2:]
    if src.dim() == 4:
        n = src.shape[0]
        if disp.dim() == 4:
            if disp.shape[1] != 1:
                raise InvalidInputError("disparity must have a single channel")
            disp = disp[:, 0]
        if disp.dim() == 2:
            disp = disp.expand(n, h, w)
        if disp.shape[0] != n:
            raise InvalidInputError(f"batch mismatch: {disp.shape[0]} vs {n}")
        return _HorizontalSampler.apply(src, disp, direction)
    if disp.dim() != 2:
        raise InvalidInputError("unbatched source needs a 2-d disparity")
    src4 = src.reshape(1, -1, h, w)
    out = _HorizontalSampler.apply(src4, disp.unsqueeze(0), direction)
    return out.reshape(src.shape)


def reconstruct_images(left, right, d_left, d_right):
    """Rebuild each view from its counterpart: returns ``(left_hat, right_hat)``."""
    if torch.as_tensor(left).shape != torch.as_tensor(right).shape:
        raise InvalidInputError("left and right images differ in shape")
    left_hat = horizontal_resample(right, d_left, Side.LEFT.direction)
    right_hat = horizontal_resample(left, d_right, Side.RIGHT.direction)
    return left_hat, right_hat


def _with_channel(d: torch.Tensor) -> torch.Tensor:
    # disparity-as-source: give (B, H, W) fields a channel axis, keep (H, W) as is
    return d.unsqueeze(1) if d.dim() == 3 else d


def _drop_channel(out: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return out.reshape(like.shape)


def project_tensor(d_self, d_other, side: Side) -> torch.Tensor:
    """Move the counterpart field into the frame of ``side``."""
    side = Side(side)
    d_self = torch.as_tensor(d_self)
    d_other = torch.as_tensor(d_other, dtype=d_self.dtype)
    if d_self.shape != d_other.shape:
        raise InvalidInputError(f"field shapes differ: {tuple(d_self.shape)} vs {tuple(d_other.shape)}")
    out = horizontal_resample(_with_channel(d_other), d_self, side.direction)
    return _drop_channel(out, d_self)


def cyclic_tensor(d_self, d_other, side: Side) -> torch.Tensor:
    """Project ``d_self`` to the other view and back again."""
    side = Side(side)
    d_self = torch.as_tensor(d_self)
    projected_self = project_tensor(d_other, d_self, side.other)
    out = horizontal_resample(_with_channel(projected_self), d_self, side.direction)
    return _drop_channel(out, d_self)


def _check_pair(d_self: DisparityField, d_other: DisparityField):
    if d_self.side == d_other.side:
        raise InvalidInputError(f"both fields are on the {d_self.side.name.lower()} side")


def project_disparity(d_self: DisparityField, d_other: DisparityField) -> DisparityField:
    """Left: ``d_right(x - d_left(x))``; right: ``d_left(x + d_right(x))``."""
    _check_pair(d_self, d_other)
    return DisparityField(project_tensor(d_self.data, d_other.data, d_self.side), d_self.side)


def cyclic_reconstruct(d_self: DisparityField, d_other: DisparityField) -> DisparityField:
    """Left: ``d_right_proj(x - d_left(x))``; right: ``d_left_proj(x + d_right(x))``."""
    _check_pair(d_self, d_other)
    return DisparityField(cyclic_tensor(d_self.data, d_other.data, d_self.side), d_self.side)
