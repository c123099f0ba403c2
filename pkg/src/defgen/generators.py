"""Appearance and geometric generator networks and their warped composition.

A model maps two independent latents to an image:

    X = warp(F_a(Z_a), F_g(Z_g))

F_a emits an appearance image in [0, 1]^(D x D x 3) (tanh output rescaled),
F_g emits a displacement field (linear output times a max-displacement
constant). Both are fc-then-deconv stacks whose per-layer widths are tied by a
single ratio alpha: appearance width = round(alpha * geometric width). Every
forward has a cached variant plus a backward returning analytic partials with
respect to the latents and every weight tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor_ops import LayerSpec, init_layer, layer_backward, layer_forward
from .warp import DisplacementField, warp_apply, warp_backward

Array = np.ndarray


@dataclass(frozen=True)
class LatentPair:
    """One appearance latent and one geometric latent, (d,) or (n, d)."""

    z_a: Array
    z_g: Array

    def batch_size(self):
        return None if self.z_a.ndim == 1 else self.z_a.shape[0]


@dataclass(frozen=True)
class ArchitectureConfig:
    """Shape hyperparameters for the paired generator stacks.

    geometric_widths[i] is the channel count entering deconv layer i of the
    geometric stack (geometric_widths[0] is the fc output width at the base
    resolution). Appearance widths are derived: round(alpha * width).
    image_size must equal base_size * 2**len(geometric_widths).
    """

    image_size: int = 64
    d_a: int = 64
    d_g: int = 64
    geometric_widths: tuple = (128, 64, 32, 16)
    kernel_sizes: tuple = (3, 3, 5, 5)
    alpha: float = 0.625
    base_size: int = 4
    out_channels: int = 3

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if len(self.kernel_sizes) != len(self.geometric_widths):
            raise ConfigError(
                f"{len(self.geometric_widths)} widths need as many kernel sizes, "
                f"got {len(self.kernel_sizes)}"
            )
        expected = self.base_size * 2 ** len(self.geometric_widths)
        if self.image_size != expected:
            raise ConfigError(
                f"image_size {self.image_size} inconsistent with base {self.base_size} "
                f"and {len(self.geometric_widths)} upsampling layers (need {expected})"
            )
        if self.d_a < 1 or self.d_g < 1:
            raise ConfigError("latent dimensions must be positive")

    def appearance_widths(self):
        widths = []
        for w in self.geometric_widths:
            aw = int(round(self.alpha * w))
            if aw < 1:
                raise ConfigError(
                    f"alpha {self.alpha} collapses width {w} to zero filters"
                )
            widths.append(aw)
        return tuple(widths)

    @classmethod
    def tiny8(cls, d=8):
        return cls(image_size=8, d_a=d, d_g=d, geometric_widths=(16,), kernel_sizes=(3,))

    @classmethod
    def tiny16(cls, d=12):
        return cls(image_size=16, d_a=d, d_g=d, geometric_widths=(16, 8),
                   kernel_sizes=(3, 3))

    @classmethod
    def tiny32(cls, d=16):
        return cls(image_size=32, d_a=d, d_g=d, geometric_widths=(32, 16, 8),
                   kernel_sizes=(3, 3, 5))


def _stack_specs(config: ArchitectureConfig, widths, d_in, out_channels, final_activation):
    base = config.base_size
    specs = [LayerSpec("fc", (d_in,), (base, base, widths[0]), activation="relu")]
    size = base
    for i, k in enumerate(config.kernel_sizes):
        last = i == len(config.kernel_sizes) - 1
        cout = out_channels if last else widths[i + 1]
        specs.append(
            LayerSpec(
                "deconv",
                (size, size, widths[i]),
                (2 * size, 2 * size, cout),
                kernel_size=k,
                stride=2,
                activation=final_activation if last else "relu",
            )
        )
        size *= 2
    return specs


def scale_architecture(config: ArchitectureConfig):
    """LayerSpec stacks for both generators under the alpha width ratio."""
    app = _stack_specs(config, config.appearance_widths(), config.d_a,
                       config.out_channels, "tanh")
    geo = _stack_specs(config, config.geometric_widths, config.d_g, 2, "linear")
    return app, geo


@dataclass
class ModelParams:
    """Weights for both generator stacks plus the two model-level scalars.

    config is optional: models are fully described by their spec lists, and
    hand-built stacks (e.g. a single linear fc layer) are legitimate.
    """

    appearance_specs: list
    geometric_specs: list
    appearance_weights: list
    geometric_weights: list
    sigma: float = 0.3
    max_displacement: float = 8.0
    config: ArchitectureConfig | None = None

    @property
    def d_a(self):
        return self.appearance_specs[0].in_shape[-1]

    @property
    def d_g(self):
        return self.geometric_specs[0].in_shape[-1]

    @property
    def image_size(self):
        return self.appearance_specs[-1].out_shape[0]

    def all_tensors(self):
        """(name, array) pairs in a fixed order, for serialization etc."""
        out = []
        for prefix, weights in (("appearance", self.appearance_weights),
                                ("geometric", self.geometric_weights)):
            for i, layer in enumerate(weights):
                for key in sorted(layer):
                    out.append((f"{prefix}/{i}/{key}", layer[key]))
        return out


def init_params(config: ArchitectureConfig, rng, std=0.02, sigma=0.3,
                max_displacement=8.0, dtype=np.float32) -> ModelParams:
    if sigma <= 0 or max_displacement <= 0:
        raise ConfigError("sigma and max_displacement must be positive")
    app_specs, geo_specs = scale_architecture(config)
    return ModelParams(
        appearance_specs=app_specs,
        geometric_specs=geo_specs,
        appearance_weights=[init_layer(s, rng, std=std, dtype=dtype) for s in app_specs],
        geometric_weights=[init_layer(s, rng, std=std, dtype=dtype) for s in geo_specs],
        sigma=float(sigma),
        max_displacement=float(max_displacement),
        config=config,
    )


def _check_latent(z, d, name):
    if z.shape[-1] != d or z.ndim not in (1, 2):
        raise DimensionError(f"{name} must have length {d}, got shape {z.shape}")


def _stack_forward(z, specs, weights):
    h = z
    caches = []
    for spec, w in zip(specs, weights):
        h, cache = layer_forward(h if h.ndim > 1 else h[None], spec, w)
        caches.append(cache)
    if z.ndim == 1:
        h = h[0]
    return h, caches


def _stack_backward(specs, weights, caches, grad, need_weight_grads=True):
    if grad.ndim == 3:
        grad = grad[None]
    weight_grads = [None] * len(specs)
    for i in reversed(range(len(specs))):
        grad, weight_grads[i] = layer_backward(
            specs[i], weights[i], caches[i], grad, need_weight_grads=need_weight_grads
        )
    return grad, weight_grads


# ---------------------------------------------------------------------------
# appearance generator
# ---------------------------------------------------------------------------

def appearance_forward_cached(z_a: Array, params: ModelParams):
    _check_latent(z_a, params.d_a, "Z_a")
    raw, caches = _stack_forward(z_a, params.appearance_specs, params.appearance_weights)
    # tanh lands in [-1, 1]; shift to pixel range
    img = (raw + 1) / 2
    return img, caches


def appearance_forward(z_a: Array, params: ModelParams) -> Array:
    return appearance_forward_cached(z_a, params)[0]


def appearance_backward(params: ModelParams, caches, grad_img: Array):
    single = grad_img.ndim == 3
    grad_z, wgrads = _stack_backward(
        params.appearance_specs, params.appearance_weights, caches, grad_img * 0.5
    )
    if single:
        grad_z = grad_z[0]
    return grad_z, wgrads


# ---------------------------------------------------------------------------
# geometric generator
# ---------------------------------------------------------------------------

def geometric_forward_cached(z_g: Array, params: ModelParams):
    _check_latent(z_g, params.d_g, "Z_g")
    raw, caches = _stack_forward(z_g, params.geometric_specs, params.geometric_weights)
    field = DisplacementField.from_stacked(raw * params.max_displacement)
    return field, caches


def geometric_forward(z_g: Array, params: ModelParams) -> DisplacementField:
    return geometric_forward_cached(z_g, params)[0]


def geometric_backward(params: ModelParams, caches, grad_field: DisplacementField):
    g = grad_field.stacked() * params.max_displacement
    single = g.ndim == 3
    grad_z, wgrads = _stack_backward(
        params.geometric_specs, params.geometric_weights, caches, g
    )
    if single:
        grad_z = grad_z[0]
    return grad_z, wgrads


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class ModelCache:
    appearance_image: Array
    field: DisplacementField
    appearance_caches: list
    geometric_caches: list


def model_forward_cached(latents: LatentPair, params: ModelParams):
    img, app_caches = appearance_forward_cached(latents.z_a, params)
    fld, geo_caches = geometric_forward_cached(latents.z_g, params)
    out = warp_apply(img, fld)
    return out, ModelCache(img, fld, app_caches, geo_caches)


def model_forward(latents: LatentPair, params: ModelParams) -> Array:
    """Generated image (the likelihood noise is never added here)."""
    return model_forward_cached(latents, params)[0]


def model_backward(params: ModelParams, cache: ModelCache, grad_out: Array):
    """Full-chain partials: returns (grad_z_a, grad_z_g, app grads, geo grads)."""
    grad_src, grad_field = warp_backward(cache.appearance_image, cache.field, grad_out)
    gz_a, app_wgrads = appearance_backward(params, cache.appearance_caches, grad_src)
    gz_g, geo_wgrads = geometric_backward(params, cache.geometric_caches, grad_field)
    return gz_a, gz_g, app_wgrads, geo_wgrads


def model_backward_latents(params: ModelParams, cache: ModelCache, grad_out: Array):
    """Latent partials only; skips weight gradients (inference hot path)."""
    grad_src, grad_field = warp_backward(cache.appearance_image, cache.field, grad_out)
    single = grad_src.ndim == 3
    gz_a, _ = _stack_backward(params.appearance_specs, params.appearance_weights,
                              cache.appearance_caches, grad_src * 0.5,
                              need_weight_grads=False)
    gz_g, _ = _stack_backward(params.geometric_specs, params.geometric_weights,
                              cache.geometric_caches,
                              grad_field.stacked() * params.max_displacement,
                              need_weight_grads=False)
    if single:
        gz_a, gz_g = gz_a[0], gz_g[0]
    return gz_a, gz_g


def sample_prior(params_or_config, rng, n=None, dtype=np.float64) -> LatentPair:
    """Standard-normal latents matching the model's dimensions."""
    src = params_or_config
    shape_a = (src.d_a,) if n is None else (n, src.d_a)
    shape_g = (src.d_g,) if n is None else (n, src.d_g)
    return LatentPair(
        rng.standard_normal(shape_a).astype(dtype, copy=False),
        rng.standard_normal(shape_g).astype(dtype, copy=False),
    )


def zero_latents(params_or_config, n=None, dtype=np.float64) -> LatentPair:
    src = params_or_config
    shape_a = (src.d_a,) if n is None else (n, src.d_a)
    shape_g = (src.d_g,) if n is None else (n, src.d_g)
    return LatentPair(np.zeros(shape_a, dtype=dtype), np.zeros(shape_g, dtype=dtype))


def clone_params(params: ModelParams) -> ModelParams:
    return replace(
        params,
        appearance_weights=[{k: v.copy() for k, v in w.items()}
                            for w in params.appearance_weights],
        geometric_weights=[{k: v.copy() for k, v in w.items()}
                           for w in params.geometric_weights],
    )
