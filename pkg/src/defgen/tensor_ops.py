"""Dense layer primitives with hand-written forward/backward passes.

All arrays are numpy ndarrays, channel-last. Spatial ops accept a single
example ``(h, w, c)`` or a batch ``(n, h, w, c)``; fully-connected ops accept
``(d,)`` or ``(n, d)``. Every forward has a paired backward that returns exact
analytic partials, so whole networks can be differentiated by chaining layer
backwards in reverse (no general autodiff graph).

Geometry convention: ``deconv_apply`` with stride ``s`` maps spatial extent
``n -> s*n`` and ``conv_apply`` maps ``s*n -> n``. The two are exact adjoints
of each other for a shared kernel: ``<conv(x), y> == <x, deconv(y)>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

Array = np.ndarray

ACTIVATIONS = ("relu", "tanh", "linear")


@dataclass(frozen=True)
class LayerSpec:
    """Shape/type record for one layer of a generator or encoder stack.

    kind: "fc" | "deconv" | "conv"
    in_shape / out_shape: per-example shapes, e.g. (64,) or (8, 8, 40)
    """

    kind: str
    in_shape: tuple
    out_shape: tuple
    kernel_size: int = 0
    stride: int = 1
    activation: str = "linear"

    def __post_init__(self):
        if self.kind not in ("fc", "deconv", "conv"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.kind == "deconv":
            if self.out_shape[0] != self.stride * self.in_shape[0]:
                raise ConfigError(
                    f"deconv stride {self.stride} must map {self.in_shape} to "
                    f"{self.stride}x spatial extent, got {self.out_shape}"
                )
        if self.kind == "conv":
            if self.in_shape[0] != self.stride * self.out_shape[0]:
                raise ConfigError(
                    f"conv stride {self.stride} must shrink {self.in_shape} "
                    f"accordingly, got {self.out_shape}"
                )


def _ensure_finite(out: Array, op: str) -> Array:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

def fc_apply(x: Array, weights: Array, bias: Array, out_shape=None) -> Array:
    """x @ weights + bias, optionally reshaped to a per-example out_shape."""
    if weights.ndim != 2:
        raise DimensionError(f"fc weights must be 2-d, got {weights.shape}")
    if x.shape[-1] != weights.shape[0]:
        raise DimensionError(
            f"fc input {x.shape} incompatible with weights {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise DimensionError(
            f"fc bias {bias.shape} incompatible with weights {weights.shape}"
        )
    single = x.ndim == 1
    xb = x[None] if single else x
    out = xb @ weights + bias
    if out_shape is not None:
        out = out.reshape((out.shape[0],) + tuple(out_shape))
    if single:
        out = out[0]
    return _ensure_finite(out, "fc_apply")


def fc_backward(x: Array, weights: Array, grad_out: Array, need_weight_grads=True):
    """Partials of fc_apply. Returns (grad_x, grad_weights, grad_bias)."""
    single = x.ndim == 1
    xb = x[None] if single else x
    g = grad_out.reshape(xb.shape[0], weights.shape[1])
    grad_x = g @ weights.T
    if need_weight_grads:
        grad_w = xb.T @ g
        grad_b = g.sum(axis=0)
    else:
        grad_w = grad_b = None
    if single:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# transposed convolution (scatter) and its adjoint convolution (gather)
# ---------------------------------------------------------------------------

def _check_kernel(kernel: Array, stride: int, op: str):
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"{op} kernel must be (k, k, c, c'), got {kernel.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"{op} stride must be 1 or 2, got {stride}")
    if kernel.shape[0] < stride:
        raise ConfigError(
            f"{op} kernel size {kernel.shape[0]} must be >= stride {stride}"
        )


def _deconv_geometry(h, w, k, stride):
    # full scatter extent, crop offset, cropped output extent
    fh, fw = stride * (h - 1) + k, stride * (w - 1) + k
    pb = (k - stride) // 2
    return fh, fw, pb, stride * h, stride * w


def deconv_apply(x: Array, kernel: Array, stride: int) -> Array:
    """Transposed convolution: scatter-accumulate, spatial extent n -> stride*n.

    kernel is (k, k, c_in, c_out); x is (..., h, w, c_in).
    """
    _check_kernel(kernel, stride, "deconv")
    single = x.ndim == 3
    xb = x[None] if single else x
    n, h, w, ci = xb.shape
    k, _, kci, co = kernel.shape
    if ci != kci:
        raise DimensionError(
            f"deconv input channels {xb.shape} do not match kernel {kernel.shape}"
        )
    fh, fw, pb, oh, ow = _deconv_geometry(h, w, k, stride)
    full = np.zeros((n, fh, fw, co), dtype=xb.dtype)
    for a in range(k):
        for b in range(k):
            full[:, a:a + stride * h:stride, b:b + stride * w:stride, :] += xb @ kernel[a, b]
    out = full[:, pb:pb + oh, pb:pb + ow, :]
    if single:
        out = out[0]
    return _ensure_finite(out, "deconv_apply")


def deconv_backward(x: Array, kernel: Array, stride: int, grad_out: Array,
                    need_kernel_grad=True):
    """Partials of deconv_apply. Returns (grad_x, grad_kernel)."""
    single = x.ndim == 3
    xb = x[None] if single else x
    gb = grad_out[None] if grad_out.ndim == 3 else grad_out
    n, h, w, ci = xb.shape
    k, _, _, co = kernel.shape
    fh, fw, pb, oh, ow = _deconv_geometry(h, w, k, stride)
    gp = np.pad(gb, ((0, 0), (pb, fh - oh - pb), (pb, fw - ow - pb), (0, 0)))
    grad_x = np.zeros_like(xb)
    grad_k = np.zeros_like(kernel) if need_kernel_grad else None
    for a in range(k):
        for b in range(k):
            gs = gp[:, a:a + stride * h:stride, b:b + stride * w:stride, :]
            grad_x += gs @ kernel[a, b].T
            if need_kernel_grad:
                grad_k[a, b] = np.einsum("nijc,nijd->cd", xb, gs)
    if single:
        grad_x = grad_x[0]
    return grad_x, grad_k


def conv_apply(x: Array, kernel: Array, stride: int) -> Array:
    """Strided convolution, the exact adjoint of deconv_apply.

    kernel is shared with the paired deconv: (k, k, c_out, c_in) here, i.e.
    input has kernel.shape[3] channels and output kernel.shape[2].
    """
    _check_kernel(kernel, stride, "conv")
    single = x.ndim == 3
    xb = x[None] if single else x
    n, hh, ww, cin = xb.shape
    k, _, cout, kcin = kernel.shape
    if cin != kcin:
        raise DimensionError(
            f"conv input channels {xb.shape} do not match kernel {kernel.shape}"
        )
    h, w = -(-hh // stride), -(-ww // stride)
    pb = (k - stride) // 2
    pa_h = stride * (h - 1) + k - hh - pb
    pa_w = stride * (w - 1) + k - ww - pb
    xp = np.pad(xb, ((0, 0), (pb, pa_h), (pb, pa_w), (0, 0)))
    out = np.zeros((n, h, w, cout), dtype=xb.dtype)
    for a in range(k):
        for b in range(k):
            out += xp[:, a:a + stride * h:stride, b:b + stride * w:stride, :] @ kernel[a, b].T
    if single:
        out = out[0]
    return _ensure_finite(out, "conv_apply")


def conv_backward(x: Array, kernel: Array, stride: int, grad_out: Array,
                  need_kernel_grad=True):
    """Partials of conv_apply. Returns (grad_x, grad_kernel)."""
    single = x.ndim == 3
    xb = x[None] if single else x
    gb = grad_out[None] if grad_out.ndim == 3 else grad_out
    n, hh, ww, cin = xb.shape
    k = kernel.shape[0]
    h, w = gb.shape[1], gb.shape[2]
    pb = (k - stride) // 2
    pa_h = stride * (h - 1) + k - hh - pb
    pa_w = stride * (w - 1) + k - ww - pb
    xp = np.pad(xb, ((0, 0), (pb, pa_h), (pb, pa_w), (0, 0)))
    gxp = np.zeros_like(xp)
    grad_k = np.zeros_like(kernel) if need_kernel_grad else None
    for a in range(k):
        for b in range(k):
            sl = (slice(None), slice(a, a + stride * h, stride),
                  slice(b, b + stride * w, stride), slice(None))
            gxp[sl] += gb @ kernel[a, b]
            if need_kernel_grad:
                grad_k[a, b] = np.einsum("nijc,nijd->cd", gb, xp[sl])
    grad_x = gxp[:, pb:pb + hh, pb:pb + ww, :]
    if single:
        grad_x = grad_x[0]
    return grad_x, grad_k


# ---------------------------------------------------------------------------
# pointwise activations
# ---------------------------------------------------------------------------

def activation_apply(x: Array, kind: str) -> Array:
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "tanh":
        out = np.tanh(x)
    elif kind == "linear":
        out = x
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return _ensure_finite(out, f"activation_apply[{kind}]")


def activation_backward(x: Array, kind: str, grad_out: Array) -> Array:
    """Derivative w.r.t. the pre-activation input. relu'(0) = 0."""
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "tanh":
        t = np.tanh(x)
        return grad_out * (1 - t * t)
    if kind == "linear":
        return grad_out
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def init_layer(spec: LayerSpec, rng: np.random.Generator, std=0.02, dtype=np.float32):
    """Gaussian(0, std^2) weights, zero biases, in the requested dtype."""
    if spec.kind == "fc":
        din = int(np.prod(spec.in_shape))
        dout = int(np.prod(spec.out_shape))
        return {
            "weight": rng.normal(0.0, std, size=(din, dout)).astype(dtype),
            "bias": np.zeros(dout, dtype=dtype),
        }
    if spec.kind == "deconv":
        k = spec.kernel_size
        return {"kernel": rng.normal(0.0, std, size=(k, k, spec.in_shape[-1], spec.out_shape[-1])).astype(dtype)}
    if spec.kind == "conv":
        k = spec.kernel_size
        # conv kernels keep the deconv layout: (k, k, c_out, c_in)
        return {"kernel": rng.normal(0.0, std, size=(k, k, spec.out_shape[-1], spec.in_shape[-1])).astype(dtype)}
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


def layer_forward(x: Array, spec: LayerSpec, weights: dict):
    """Apply one layer (pre-activation + activation). Returns (out, cache)."""
    if spec.kind == "fc":
        flat = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
        pre = fc_apply(flat, weights["weight"], weights["bias"], out_shape=spec.out_shape)
    elif spec.kind == "deconv":
        pre = deconv_apply(x, weights["kernel"], spec.stride)
    else:
        pre = conv_apply(x, weights["kernel"], spec.stride)
    out = activation_apply(pre, spec.activation)
    return out, (x, pre)


def layer_backward(spec: LayerSpec, weights: dict, cache, grad_out: Array,
                   need_weight_grads=True):
    """Invert layer_forward. Returns (grad_in, grad_weights_dict)."""
    x, pre = cache
    g = activation_backward(pre, spec.activation, grad_out)
    if spec.kind == "fc":
        flat = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
        gx, gw, gb = fc_backward(flat, weights["weight"], g, need_weight_grads)
        wg = {"weight": gw, "bias": gb} if need_weight_grads else None
        return gx.reshape(x.shape), wg
    if spec.kind == "deconv":
        gx, gk = deconv_backward(x, weights["kernel"], spec.stride, g, need_weight_grads)
    else:
        gx, gk = conv_backward(x, weights["kernel"], spec.stride, g, need_weight_grads)
    return gx, ({"kernel": gk} if need_weight_grads else None)
