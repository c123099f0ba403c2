"""Differentiable image warping: coordinate deformation plus bilinear resampling.

Coordinate convention: axis 0 of an image is x (rows), axis 1 is y (columns).
A displacement field gives per-pixel offsets (dx, dy) in pixel units; the
output at (x, y) samples the source at (u, v) = (x + dx, y + dy) with the
bilinear kernel

    out(x, y) = sum_ij src(i, j) * max(0, 1 - |u - i|) * max(0, 1 - |v - j|)

Source coordinates outside the grid contribute nothing (the kernel support is
empty there); no clamping is applied. The kernel has kinks where u or v is an
integer; the backward pass picks subgradient 0 there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

Array = np.ndarray


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel offsets in pixels. dx moves along axis 0, dy along axis 1.

    Both grids are (h, w) for a single field or (n, h, w) for a batch.
    """

    dx: Array
    dy: Array

    def __post_init__(self):
        if self.dx.shape != self.dy.shape:
            raise DimensionError(
                f"dx {self.dx.shape} and dy {self.dy.shape} must match"
            )
        if not (np.all(np.isfinite(self.dx)) and np.all(np.isfinite(self.dy))):
            raise NumericError("displacement field contains non-finite values")

    @property
    def shape(self):
        return self.dx.shape

    @classmethod
    def zero(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    @classmethod
    def from_stacked(cls, arr: Array) -> "DisplacementField":
        """Build from a (..., h, w, 2) array, channel 0 = dx, channel 1 = dy."""
        if arr.shape[-1] != 2:
            raise DimensionError(f"stacked field needs a trailing 2-axis, got {arr.shape}")
        return cls(np.ascontiguousarray(arr[..., 0]), np.ascontiguousarray(arr[..., 1]))

    def stacked(self) -> Array:
        return np.stack([self.dx, self.dy], axis=-1)


def deform_coords(field: DisplacementField):
    """Source coordinates (u, v) = (x + dx, y + dy) over the regular grid."""
    h, w = field.dx.shape[-2:]
    xs = np.arange(h, dtype=field.dx.dtype).reshape(h, 1)
    ys = np.arange(w, dtype=field.dy.dtype).reshape(1, w)
    return field.dx + xs, field.dy + ys


def _corner_terms(fu, fv):
    # (di, dj, weight, d_weight/d_fu, d_weight/d_fv) for the 4-neighbor support
    return (
        (0, 0, (1 - fu) * (1 - fv), -(1 - fv), -(1 - fu)),
        (1, 0, fu * (1 - fv), (1 - fv), -fu),
        (0, 1, (1 - fu) * fv, -fv, (1 - fu)),
        (1, 1, fu * fv, fv, fu),
    )


def _broadcast_inputs(source, u, v, same_grid=False):
    """Validate and batch-normalize a (source, u, v) triple.

    The sampling grid may have any spatial shape (resizing reads a source at
    a differently-shaped grid); u and v must agree with each other and with
    the source's batching. same_grid additionally pins the grid to the
    source's own spatial shape, which warping requires.
    """
    single = source.ndim == 3
    sb = source[None] if single else source
    ub = u[None] if u.ndim == 2 else u
    vb = v[None] if v.ndim == 2 else v
    if sb.ndim != 4:
        raise DimensionError(f"source must be (h, w, c) or (n, h, w, c), got {source.shape}")
    n = sb.shape[0]
    if ub.shape != vb.shape or ub.ndim != 3 or ub.shape[0] != n:
        raise DimensionError(
            f"coords {u.shape}/{v.shape} do not fit source {source.shape}"
        )
    if same_grid and ub.shape[1:] != sb.shape[1:3]:
        raise DimensionError(
            f"field grid {ub.shape[1:]} must equal image grid {sb.shape[1:3]}"
        )
    return single, sb, ub, vb


def bilinear_sample(source: Array, coords) -> Array:
    """Resample source at coordinate grids (u, v). Out-of-range reads are 0."""
    u, v = coords
    single, sb, ub, vb = _broadcast_inputs(source, u, v)
    n, h, w, c = sb.shape
    i0 = np.floor(ub)
    j0 = np.floor(vb)
    fu, fv = ub - i0, vb - j0
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    nidx = np.arange(n)[:, None, None]
    out = np.zeros(ub.shape + (c,), dtype=np.result_type(sb.dtype, ub.dtype))
    for di, dj, wgt, _, _ in _corner_terms(fu, fv):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        vals = sb[nidx, np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)]
        out += vals * (wgt * ok)[..., None]
    if single:
        out = out[0]
    if not np.all(np.isfinite(out)):
        raise NumericError("bilinear_sample produced non-finite values")
    return out


def warp_apply(source: Array, field: DisplacementField) -> Array:
    """bilinear_sample at the deformed coordinates of `field`.

    Unlike free-form sampling, a warp's field must live on the image's own
    grid (that is what makes it a deformation of the image).
    """
    if field.dx.shape[-2:] != source.shape[-3:-1]:
        raise DimensionError(
            f"field grid {field.dx.shape[-2:]} must equal image grid {source.shape[-3:-1]}"
        )
    return bilinear_sample(source, deform_coords(field))


def warp_backward(source: Array, field: DisplacementField, grad_out: Array):
    """Analytic partials of warp_apply.

    Returns (grad_source, grad_field). Gradient accumulation into the source
    uses a fixed bincount reduction, so results are deterministic. Where u or
    v sits exactly on a kink (integer value) the corresponding field gradient
    is 0.
    """
    u, v = deform_coords(field)
    single, sb, ub, vb = _broadcast_inputs(source, u, v, same_grid=True)
    n, h, w, c = sb.shape
    gb = grad_out[None] if grad_out.ndim == 3 else grad_out
    if gb.shape != sb.shape:
        raise DimensionError(f"upstream gradient {grad_out.shape} does not match {source.shape}")
    i0 = np.floor(ub)
    j0 = np.floor(vb)
    fu, fv = ub - i0, vb - j0
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    nidx = np.arange(n)[:, None, None]

    grad_src_flat = np.zeros(n * h * w * c, dtype=np.float64)
    grad_u = np.zeros((n, h, w), dtype=np.float64)
    grad_v = np.zeros((n, h, w), dtype=np.float64)
    ch = np.arange(c, dtype=np.int64)
    for di, dj, wgt, dw_du, dw_dv in _corner_terms(fu, fv):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        ic, jc = np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)
        vals = sb[nidx, ic, jc] * ok[..., None]
        gdotval = (gb * vals).sum(axis=-1)
        grad_u += gdotval * dw_du
        grad_v += gdotval * dw_dv
        # scatter wgt * grad into the source positions actually read
        flat = (((nidx + np.zeros_like(ic)) * h + ic) * w + jc)[..., None] * c + ch
        contrib = gb * (wgt * ok)[..., None]
        grad_src_flat += np.bincount(
            flat.reshape(-1), weights=contrib.reshape(-1).astype(np.float64),
            minlength=n * h * w * c,
        )
    grad_u[fu == 0] = 0.0
    grad_v[fv == 0] = 0.0
    grad_src = grad_src_flat.reshape(n, h, w, c).astype(sb.dtype)
    grad_u = grad_u.astype(field.dx.dtype)
    grad_v = grad_v.astype(field.dy.dtype)
    if single:
        grad_src, grad_u, grad_v = grad_src[0], grad_u[0], grad_v[0]
    return grad_src, DisplacementField(grad_u, grad_v)
