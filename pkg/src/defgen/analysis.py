"""Disentanglement analyses over a trained model.

Procedures here treat the model as read-only: latent sweeps rendered as image
sequences, appearance/geometry recombination between examples, covariance
responses of latent dimensions against labeled factors, reconstruction error
under a stated pixel convention, appearance-only fine-tuning with frozen
geometry, and driving an external image through the learned warp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import FactorTable, unit_factor_vector
from .errors import ConfigError, DataError, DimensionError, ResolutionError
from .generators import (
    LatentPair,
    ModelParams,
    clone_params,
    geometric_forward,
    model_forward,
    zero_latents,
)
from .inference import LangevinConfig, alternating_inference
from .training import TrainConfig, TrainResult, train
from .warp import warp_apply

Array = np.ndarray

__all__ = [
    "SweepSpec", "FactorTable", "CovarianceResult", "ReconstructionResult",
    "interpolate_dimension", "recombine_latents", "infer_latents",
    "covariance_response", "covariance_from_means", "reconstruction_error",
    "transfer_fine_tune", "apply_warp_external", "zero_geometry",
]

VECTORS = ("appearance", "geometric")


@dataclass(frozen=True)
class SweepSpec:
    """One latent dimension swept over [-gamma, gamma] in uniform steps.

    steps counts intervals, so the rendered sequence has steps + 1 entries.
    The non-swept latent vector is held at `fixed` (zeros when omitted).
    """

    vector: str = "appearance"
    dim: int = 0
    gamma: float = 10.0
    steps: int = 10
    fixed: Array | None = None

    def __post_init__(self):
        if self.vector not in VECTORS:
            raise ConfigError(f"vector must be one of {VECTORS}, got {self.vector!r}")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.dim < 0:
            raise DimensionError("dim must be non-negative")

    def values(self) -> Array:
        return np.linspace(-self.gamma, self.gamma, self.steps + 1)


def _sweep_latents(params: ModelParams, spec: SweepSpec) -> LatentPair:
    d = params.d_a if spec.vector == "appearance" else params.d_g
    d_other = params.d_g if spec.vector == "appearance" else params.d_a
    if spec.dim >= d:
        raise DimensionError(f"dim {spec.dim} out of range for length-{d} vector")
    vals = spec.values()
    swept = np.zeros((len(vals), d), dtype=np.float32)
    swept[:, spec.dim] = vals
    if spec.fixed is None:
        other = np.zeros((len(vals), d_other), dtype=np.float32)
    else:
        fixed = np.asarray(spec.fixed, dtype=np.float32)
        if fixed.shape != (d_other,):
            raise DimensionError(
                f"fixed latent must have shape ({d_other},), got {fixed.shape}"
            )
        other = np.tile(fixed, (len(vals), 1))
    if spec.vector == "appearance":
        return LatentPair(swept, other)
    return LatentPair(other, swept)


def interpolate_dimension(params: ModelParams, spec: SweepSpec) -> Array:
    """Render the sweep: (steps + 1, size, size, 3) images."""
    return model_forward(_sweep_latents(params, spec), params)


def recombine_latents(params: ModelParams, z_a: Array, z_g: Array) -> Array:
    """Image from A's appearance code and B's geometry code."""
    return model_forward(LatentPair(np.asarray(z_a), np.asarray(z_g)), params)


def infer_latents(X: Array, params: ModelParams, steps=300, step_size=0.1,
                  noise=True, seed=0, start: LatentPair = None) -> LatentPair:
    """Posterior latents for X by alternating Langevin from a zero start."""
    if start is None:
        n = None if X.ndim == 3 else X.shape[0]
        start = zero_latents(params, n=n, dtype=X.dtype)
    cfg = LangevinConfig(step_size=step_size, steps=steps, noise=noise, seed=seed)
    return alternating_inference(X, start, params, cfg)


# ---------------------------------------------------------------------------
# covariance response
# ---------------------------------------------------------------------------

@dataclass
class CovarianceResult:
    r_g: Array          # (d_g,) responses of geometric dims
    r_a: Array          # (d_a,)
    levels: Array       # (L,) factor levels, ascending
    means_g: Array      # (L, d_g) per-level posterior means
    means_a: Array      # (L, d_a)
    factor: str


def covariance_from_means(level_means: Array, v: Array) -> Array:
    """R_i = |dot(level-indexed means for dim i, v)| for each latent dim."""
    level_means = np.asarray(level_means, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if level_means.shape[0] != v.shape[0]:
        raise DimensionError(
            f"{level_means.shape[0]} levels vs direction of length {v.shape[0]}"
        )
    return np.abs(level_means.T @ v)


def covariance_response(params: ModelParams, dataset, factor: str,
                        steps=300, step_size=0.1, noise=True,
                        seed=0) -> CovarianceResult:
    """Per-dimension response of posterior level means to a labeled factor.

    Needs at least two distinct factor levels; the probe direction is the
    level values scaled to unit norm, and responses are sign-invariant in it.
    """
    if dataset.factors is None or factor not in dataset.factors.values:
        raise DataError(f"dataset has no factor {factor!r}")
    groups = dataset.factors.level_indices(factor)
    if len(groups) < 2:
        raise DataError(f"factor {factor!r} has a single level; response undefined")
    lat = infer_latents(dataset.images, params, steps=steps, step_size=step_size,
                        noise=noise, seed=seed)
    means_a = np.stack([lat.z_a[idx].mean(axis=0) for _, idx in groups])
    means_g = np.stack([lat.z_g[idx].mean(axis=0) for _, idx in groups])
    levels = np.array([lvl for lvl, _ in groups])
    v = unit_factor_vector(levels)
    return CovarianceResult(
        r_g=covariance_from_means(means_g, v),
        r_a=covariance_from_means(means_a, v),
        levels=levels, means_g=means_g, means_a=means_a, factor=factor,
    )


# ---------------------------------------------------------------------------
# reconstruction error and transfer
# ---------------------------------------------------------------------------

CONVENTIONS = ("sum255", "mean01")


@dataclass
class ReconstructionResult:
    per_image: Array
    mean: float
    convention: str    # sum255: sum of squared [0,255] diffs per image


def reconstruction_error(params: ModelParams, dataset, steps=300, step_size=0.1,
                         noise=True, seed=0, convention="sum255",
                         start: LatentPair = None) -> ReconstructionResult:
    """Inferred-latent reconstruction error per image.

    sum255 totals squared differences on the 0..255 scale per image; mean01
    averages squared differences in [0, 1] over pixels. Pass start to score
    from known latents instead of a zero start.
    """
    if convention not in CONVENTIONS:
        raise ConfigError(f"convention must be one of {CONVENTIONS}")
    if len(dataset) == 0:
        raise DataError("cannot score an empty dataset")
    lat = infer_latents(dataset.images, params, steps=steps, step_size=step_size,
                        noise=noise, seed=seed, start=start)
    out = model_forward(lat, params)
    diff = (dataset.images - out).astype(np.float64)
    if convention == "sum255":
        per = (diff * 255.0).reshape(len(dataset), -1)
        per = (per * per).sum(axis=1)
    else:
        per = (diff * diff).reshape(len(dataset), -1).mean(axis=1)
    return ReconstructionResult(per_image=per, mean=float(per.mean()),
                                convention=convention)


def transfer_fine_tune(params: ModelParams, dataset, config: TrainConfig,
                       out_dir=None) -> TrainResult:
    """Adapt the appearance half to a new dataset; geometry stays bitwise
    fixed. Chains start fresh for the new examples."""
    return train(dataset, config, params=params, out_dir=out_dir,
                 freeze=frozenset({"geometric"}))


def zero_geometry(params: ModelParams) -> ModelParams:
    """Copy of params whose geometric net emits an all-zero field (the
    no-warp baseline)."""
    out = clone_params(params)
    for layer in out.geometric_weights:
        for k in layer:
            layer[k] = np.zeros_like(layer[k])
    return out


# ---------------------------------------------------------------------------
# warping external images
# ---------------------------------------------------------------------------

def apply_warp_external(image: Array, params: ModelParams, spec: SweepSpec) -> Array:
    """Drive an unrelated image through the learned displacement fields of a
    geometric sweep. The image must already be at model resolution; no
    implicit resampling happens here."""
    if spec.vector != "geometric":
        raise ConfigError("external warping sweeps the geometric vector")
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"expected one (h, w, c) image, got {image.shape}")
    size = params.image_size
    if image.shape[0] != size or image.shape[1] != size:
        raise ResolutionError(
            f"image is {image.shape[0]}x{image.shape[1]} but the model works at "
            f"{size}x{size}; resize it first"
        )
    lat = _sweep_latents(params, spec)
    fields = geometric_forward(lat.z_g, params)
    batch = np.broadcast_to(image, (len(lat.z_g),) + image.shape)
    return warp_apply(np.ascontiguousarray(batch), fields)
