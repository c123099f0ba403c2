"""Posterior inference of latents by alternating Langevin dynamics.

Given an observed image X, the unnormalized log posterior over a latent block
(with the other block held fixed) is

    log p(X, Z) = -||X - F(Z_a, Z_g)||^2 / (2 sigma^2) - ||Z_sel||^2 / 2 + const

and one Langevin update is

    Z' = Z + (delta^2 / 2) * d(log p)/dZ + delta * eps,   eps ~ N(0, I).

Each inference round takes one appearance step with Z_g fixed, then one
geometric step with Z_a fixed. Chains are persistent: a ChainStore keeps the
latest latents per training example, so the next iteration's short run starts
where the previous one stopped instead of from the prior.

Everything here works on a single example or an equal-length batch (latents
(n, d), images (n, h, w, c)), with per-example values/gradients in the batch
case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rngs
from .errors import ConfigError, DimensionError, NumericError
from .generators import LatentPair, ModelParams, model_backward_latents, model_forward_cached

Array = np.ndarray


@dataclass(frozen=True)
class LangevinConfig:
    step_size: float = 0.1
    steps: int = 10
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")


def log_joint(X: Array, latents: LatentPair, params: ModelParams, which: str):
    """Unnormalized log joint and its gradient w.r.t. the selected latent.

    Returns (value, grad). Additive constants are dropped; they cancel in
    gradients and in any comparison between states of the same model.
    """
    if which not in ("appearance", "geometric"):
        raise ConfigError(f"which must be appearance or geometric, got {which!r}")
    out, cache = model_forward_cached(latents, params)
    if X.shape != out.shape:
        raise DimensionError(f"observed {X.shape} vs generated {out.shape}")
    resid = X - out
    inv_var = 1.0 / (params.sigma * params.sigma)
    spatial = tuple(range(resid.ndim - 3, resid.ndim))
    recon = -0.5 * inv_var * (resid * resid).sum(axis=spatial)
    z_sel = latents.z_a if which == "appearance" else latents.z_g
    value = recon - 0.5 * (z_sel * z_sel).sum(axis=-1)
    if not np.all(np.isfinite(value)):
        raise NumericError("log_joint is not finite")
    gz_a, gz_g = model_backward_latents(params, cache, resid * inv_var)
    grad = (gz_a if which == "appearance" else gz_g) - z_sel
    if value.ndim == 0:
        value = float(value)
    return value, grad


def log_joint_value(X: Array, latents: LatentPair, params: ModelParams):
    """Full log joint (reconstruction plus both priors), value only."""
    out, _ = model_forward_cached(latents, params)
    if X.shape != out.shape:
        raise DimensionError(f"observed {X.shape} vs generated {out.shape}")
    resid = X - out
    spatial = tuple(range(resid.ndim - 3, resid.ndim))
    value = (
        -0.5 / (params.sigma * params.sigma) * (resid * resid).sum(axis=spatial)
        - 0.5 * (latents.z_a * latents.z_a).sum(axis=-1)
        - 0.5 * (latents.z_g * latents.z_g).sum(axis=-1)
    )
    if not np.all(np.isfinite(value)):
        raise NumericError("log_joint is not finite")
    return float(value) if value.ndim == 0 else value


def langevin_step(z: Array, grad: Array, config: LangevinConfig, rng) -> Array:
    if z.shape != grad.shape:
        raise DimensionError(f"latent {z.shape} vs gradient {grad.shape}")
    out = z + (0.5 * config.step_size * config.step_size) * grad
    if config.noise:
        eps = rng.standard_normal(z.shape).astype(z.dtype, copy=False)
        out = out + config.step_size * eps
    return out


def alternating_inference(X: Array, start: LatentPair, params: ModelParams,
                          config: LangevinConfig, rng=None) -> LatentPair:
    """config.steps rounds of (appearance step, geometric step)."""
    if rng is None:
        rng = rngs.stream(config.seed, "langevin")
    z_a, z_g = start.z_a, start.z_g
    for _ in range(config.steps):
        _, ga = log_joint(X, LatentPair(z_a, z_g), params, "appearance")
        z_a = langevin_step(z_a, ga, config, rng)
        _, gg = log_joint(X, LatentPair(z_a, z_g), params, "geometric")
        z_g = langevin_step(z_g, gg, config, rng)
    return LatentPair(z_a, z_g)


# ---------------------------------------------------------------------------
# persistent chains
# ---------------------------------------------------------------------------

@dataclass
class ChainStore:
    """Per-example latent chain states, with deterministic first-touch init.

    The initial draw for an example depends only on (seed, example id), not
    on access order, so warm starts survive checkpointing and reordering.
    """

    d_a: int
    d_g: int
    seed: int = 0
    dtype: str = "float32"
    states: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)


def chain_warm_start(store: ChainStore, example_id) -> LatentPair:
    if example_id not in store.states:
        r = rngs.stream(store.seed, "chain-init", rngs.id_index(example_id))
        dt = np.dtype(store.dtype)
        store.states[example_id] = LatentPair(
            r.standard_normal(store.d_a).astype(dt, copy=False),
            r.standard_normal(store.d_g).astype(dt, copy=False),
        )
    return store.states[example_id]


def warm_start_batch(store: ChainStore, ids) -> LatentPair:
    pairs = [chain_warm_start(store, i) for i in ids]
    return LatentPair(
        np.stack([p.z_a for p in pairs]), np.stack([p.z_g for p in pairs])
    )


def write_back(store: ChainStore, ids, latents: LatentPair):
    if latents.z_a.shape[0] != len(ids):
        raise DimensionError(
            f"{len(ids)} ids vs batch of {latents.z_a.shape[0]} latents"
        )
    for row, example_id in enumerate(ids):
        store.states[example_id] = LatentPair(latents.z_a[row], latents.z_g[row])
