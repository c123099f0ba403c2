"""Model training: alternating back-propagation, plus a VAE variant.

One ABP iteration does, in order:

1. inference back-propagation: for each batch example, a short alternating
   Langevin run over (Z_a, Z_g) warm-started from that example's persistent
   chain, written back afterwards;
2. learning back-propagation: a Monte Carlo estimate of the log-likelihood
   gradient at the sampled latents, followed by a gradient *ascent* step.

The VAE variant replaces Langevin inference with an encoder that outputs
factorized Gaussians q(Z_a|X) q(Z_g|X); reparameterized samples feed the same
decoder, and encoder and decoder ascend the evidence lower bound together.

All randomness is drawn from streams keyed by (seed, purpose, iteration), so
a run is reproducible and a resumed run is bit-identical to an uninterrupted
one. Training state is float32 end to end.

Metrics are returned as rows of (iteration, mse, log_joint_mean, wall_ms) and
appended to <out_dir>/metrics.csv when an output directory is given. mse is
the per-pixel mean squared reconstruction error in the [0, 1] convention; in
VAE mode the third column holds the mean ELBO instead of the mean log joint.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import rngs
from .errors import ConfigError, DataError, DimensionError, NumericError
from .generators import (
    ArchitectureConfig,
    LatentPair,
    ModelParams,
    appearance_backward,
    appearance_forward_cached,
    geometric_backward,
    geometric_forward_cached,
    init_params,
    model_backward,
    model_forward_cached,
)
from .inference import (
    ChainStore,
    LangevinConfig,
    alternating_inference,
    log_joint_value,
    warm_start_batch,
    write_back,
)
from .tensor_ops import LayerSpec, init_layer, layer_backward, layer_forward
from .warp import warp_apply, warp_backward

Array = np.ndarray

MODES = ("abp", "vae")
VAE_VARIANTS = ("full", "zero_disp", "appearance_only")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-4
    lr_decay_every: int = 0      # 0 keeps the rate constant
    lr_decay_factor: float = 0.5
    langevin: LangevinConfig = LangevinConfig()
    mode: str = "abp"
    seed: int = 0
    sigma: float = 0.3
    max_displacement: float = 8.0
    init_std: float = 0.02
    arch: ArchitectureConfig | None = None
    checkpoint_every: int = 0    # 0 saves only the final state
    adaptive: bool = False       # adaptive-moment updates instead of plain sgd
    vae_variant: str = "full"

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.sigma <= 0:
            raise ConfigError("learning_rate and sigma must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.vae_variant not in VAE_VARIANTS:
            raise ConfigError(f"vae_variant must be one of {VAE_VARIANTS}")

    def rate_at(self, iteration: int) -> float:
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (iteration // self.lr_decay_every)


# ---------------------------------------------------------------------------
# maximum-likelihood gradient and parameter updates
# ---------------------------------------------------------------------------

def mc_gradient(batch: Array, latents: LatentPair, params: ModelParams):
    """Monte Carlo log-likelihood gradient at fixed latents.

    batch is (n, h, w, 3) with one latent pair row per example. Returns
    (appearance grads, geometric grads) averaged over the batch, assembled in
    a fixed accumulation order.
    """
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise DimensionError(f"batch must be non-empty (n, h, w, c), got {batch.shape}")
    if latents.z_a.ndim != 2 or latents.z_a.shape[0] != batch.shape[0]:
        raise DimensionError(
            f"{batch.shape[0]} examples need matching latent rows, got {latents.z_a.shape}"
        )
    out, cache = model_forward_cached(latents, params)
    resid = batch - out
    upstream = resid * (1.0 / (params.sigma**2 * batch.shape[0]))
    _, _, app_grads, geo_grads = model_backward(params, cache, upstream)
    return app_grads, geo_grads


def sgd_step(params: ModelParams, gradient, rate: float, freeze=frozenset()) -> ModelParams:
    """Ascent update theta' = theta + rate * grad. Frozen sections are
    returned untouched (same arrays)."""
    app_grads, geo_grads = gradient

    def updated(weights, grads, frozen):
        if frozen:
            return weights
        return [
            {k: w[k] + rate * g[k] for k in w} for w, g in zip(weights, grads)
        ]

    return replace(
        params,
        appearance_weights=updated(params.appearance_weights, app_grads,
                                   "appearance" in freeze),
        geometric_weights=updated(params.geometric_weights, geo_grads,
                                  "geometric" in freeze),
    )


class _AdamState:
    """Moment accumulators for the optional adaptive mode (not checkpointed;
    a resumed adaptive run restarts its moments)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: ModelParams, gradient, rate: float, freeze=frozenset()):
        app_grads, geo_grads = gradient
        flat_grads = [(("appearance", i, k), g[k])
                      for i, g in enumerate(app_grads) for k in g]
        flat_grads += [(("geometric", i, k), g[k])
                       for i, g in enumerate(geo_grads) for k in g]
        if self.m is None:
            self.m = {key: np.zeros_like(g) for key, g in flat_grads}
            self.v = {key: np.zeros_like(g) for key, g in flat_grads}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        new = {"appearance": [dict(w) for w in params.appearance_weights],
               "geometric": [dict(w) for w in params.geometric_weights]}
        for (section, i, k), g in flat_grads:
            if section[:3] == "app" and "appearance" in freeze:
                continue
            if section[:3] == "geo" and "geometric" in freeze:
                continue
            key = (section, i, k)
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            mhat = self.m[key] / (1 - b1**self.t)
            vhat = self.v[key] / (1 - b2**self.t)
            w = new[section][i][k]
            new[section][i][k] = w + rate * mhat / (np.sqrt(vhat) + self.eps)
        return replace(params, appearance_weights=new["appearance"],
                       geometric_weights=new["geometric"])


# ---------------------------------------------------------------------------
# VAE encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderParams:
    """Mirror conv stack ending in a linear head of 2*(d_a + d_g) moments."""

    specs: list
    weights: list

    @property
    def head_dim(self):
        return self.specs[-1].out_shape[-1]

    def all_tensors(self):
        out = []
        for i, layer in enumerate(self.weights):
            for key in sorted(layer):
                out.append((f"encoder/{i}/{key}", layer[key]))
        return out


def build_encoder(params: ModelParams, rng, include_geometric=True, std=0.02,
                  dtype=np.float32) -> EncoderParams:
    """Encoder mirroring the appearance stack: each deconv becomes the conv
    that inverts its geometry, then one linear head emits all moments."""
    specs = []
    for spec in reversed(params.appearance_specs):
        if spec.kind != "deconv":
            continue
        specs.append(LayerSpec(
            "conv", spec.out_shape, spec.in_shape,
            kernel_size=spec.kernel_size, stride=spec.stride, activation="relu",
        ))
    feat_shape = specs[-1].out_shape if specs else params.appearance_specs[-1].out_shape
    d_g = params.d_g if include_geometric else 0
    head = 2 * (params.d_a + d_g)
    specs.append(LayerSpec("fc", feat_shape, (head,), activation="linear"))
    return EncoderParams(
        specs=specs,
        weights=[init_layer(s, rng, std=std, dtype=dtype) for s in specs],
    )


def encoder_moments(X: Array, encoder: EncoderParams, d_a: int, d_g: int):
    """(mu_a, logvar_a, mu_g, logvar_g, caches). d_g may be 0."""
    if encoder.head_dim != 2 * (d_a + d_g):
        raise DimensionError(
            f"encoder head {encoder.head_dim} does not fit d_a={d_a}, d_g={d_g}"
        )
    h = X
    caches = []
    for spec, w in zip(encoder.specs, encoder.weights):
        h, cache = layer_forward(h, spec, w)
        caches.append(cache)
    mu_a = h[:, :d_a]
    lv_a = h[:, d_a:2 * d_a]
    mu_g = h[:, 2 * d_a:2 * d_a + d_g]
    lv_g = h[:, 2 * d_a + d_g:]
    return mu_a, lv_a, mu_g, lv_g, caches


def encoder_backward(encoder: EncoderParams, caches, grad_head: Array):
    grad = grad_head
    wgrads = [None] * len(encoder.specs)
    for i in reversed(range(len(encoder.specs))):
        grad, wgrads[i] = layer_backward(encoder.specs[i], encoder.weights[i],
                                         caches[i], grad)
    return wgrads


def gaussian_kl(mu: Array, logvar: Array) -> Array:
    """KL(N(mu, e^logvar) || N(0, 1)) summed over dims, per example."""
    return 0.5 * (mu * mu + np.exp(logvar) - 1.0 - logvar).sum(axis=-1)


def reparameterize(mu: Array, logvar: Array, eps: Array) -> Array:
    return mu + np.exp(0.5 * logvar) * eps


def vae_train_step(batch: Array, params: ModelParams, encoder: EncoderParams,
                   config: TrainConfig, rng, rate=None):
    """One joint ascent step on the ELBO. Returns (params, encoder, stats).

    stats carries elbo (batch mean), recon mse, and the two KL means.
    """
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise DimensionError(f"batch must be non-empty (n, h, w, c), got {batch.shape}")
    n = batch.shape[0]
    rate = config.learning_rate if rate is None else rate
    variant = config.vae_variant
    d_a = params.d_a
    d_g = 0 if variant == "appearance_only" else params.d_g
    inv_var = 1.0 / params.sigma**2

    mu_a, lv_a, mu_g, lv_g, enc_caches = encoder_moments(batch, encoder, d_a, d_g)
    eps_a = rng.standard_normal(mu_a.shape).astype(mu_a.dtype, copy=False)
    eps_g = rng.standard_normal(mu_g.shape).astype(mu_a.dtype, copy=False)
    z_a = reparameterize(mu_a, lv_a, eps_a)
    z_g = reparameterize(mu_g, lv_g, eps_g)

    app_img, app_caches = appearance_forward_cached(z_a, params)
    use_warp = variant == "full"
    if use_warp:
        fld, geo_caches = geometric_forward_cached(z_g, params)
        out = warp_apply(app_img, fld)
    else:
        out = app_img

    resid = batch - out
    recon = -0.5 * inv_var * (resid * resid).sum(axis=(1, 2, 3))
    kl_a = gaussian_kl(mu_a, lv_a)
    kl_g = gaussian_kl(mu_g, lv_g)
    elbo = float((recon - kl_a - kl_g).mean())
    if not np.isfinite(elbo):
        raise NumericError("ELBO is not finite")

    # ascent gradients, every term divided by n for the batch mean
    upstream = resid * (inv_var / n)
    if use_warp:
        grad_src, grad_field = warp_backward(app_img, fld, upstream)
        gz_a, app_grads = appearance_backward(params, app_caches, grad_src)
        gz_g, geo_grads = geometric_backward(params, geo_caches, grad_field)
    else:
        gz_a, app_grads = appearance_backward(params, app_caches, upstream)
        gz_g = np.zeros_like(z_g)
        geo_grads = [{k: np.zeros_like(v) for k, v in w.items()}
                     for w in params.geometric_weights]

    g_mu_a = gz_a - mu_a / n
    g_lv_a = gz_a * (0.5 * np.exp(0.5 * lv_a) * eps_a) - 0.5 * (np.exp(lv_a) - 1.0) / n
    g_mu_g = gz_g - mu_g / n
    g_lv_g = gz_g * (0.5 * np.exp(0.5 * lv_g) * eps_g) - 0.5 * (np.exp(lv_g) - 1.0) / n
    grad_head = np.concatenate([g_mu_a, g_lv_a, g_mu_g, g_lv_g], axis=1)
    enc_grads = encoder_backward(encoder, enc_caches, grad_head)

    # without the warp there is no gradient path into the geometric net
    new_params = sgd_step(params, (app_grads, geo_grads), rate,
                          freeze=frozenset() if use_warp else {"geometric"})
    new_encoder = EncoderParams(
        specs=encoder.specs,
        weights=[{k: w[k] + rate * g[k] for k in w}
                 for w, g in zip(encoder.weights, enc_grads)],
    )
    stats = {
        "elbo": elbo,
        "mse": float((resid * resid).mean()),
        "kl_a": float(kl_a.mean()),
        "kl_g": float(kl_g.mean()),
    }
    return new_params, new_encoder, stats


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    store: ChainStore
    metrics: list
    encoder: EncoderParams | None = None


def _batch_indices(n, batch_size, rng):
    if batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)


def _metrics_row(X, latents, params):
    out, _ = model_forward_cached(latents, params)
    mse = float(((X - out) ** 2).mean())
    lj = log_joint_value(X, latents, params)
    return mse, float(np.mean(lj))


def abp_iteration(dataset, params, store, config: TrainConfig, iteration: int,
                  freeze=frozenset()):
    """One inference + learning step. Pure in (params, store, batch, seed):
    rerunning with identical inputs gives identical outputs and store state."""
    idx = _batch_indices(len(dataset), config.batch_size,
                         rngs.stream(config.seed, "batch", iteration))
    ids = [dataset.ids[i] for i in idx]
    X = dataset.images[idx]
    start = warm_start_batch(store, ids)
    lat = alternating_inference(
        X, start, params, config.langevin,
        rng=rngs.stream(config.seed, "mcmc", iteration),
    )
    write_back(store, ids, lat)
    mse, lj_mean = _metrics_row(X, lat, params)
    grads = mc_gradient(X, lat, params)
    new_params = sgd_step(params, grads, config.rate_at(iteration), freeze=freeze)
    return new_params, (mse, lj_mean)


class _MetricsWriter:
    HEADER = "iteration,mse,log_joint_mean,wall_ms\n"

    def __init__(self, out_dir, resume: bool):
        self.fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, "metrics.csv")
            if resume and os.path.exists(path):
                self.fh = open(path, "a")
            else:
                self.fh = open(path, "w")
                self.fh.write(self.HEADER)
                self.fh.flush()

    def write(self, row):
        if self.fh is not None:
            it, mse, third, wall = row
            self.fh.write(f"{it},{mse:.9e},{third:.9e},{wall:.3f}\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _default_arch_for(dataset, config: TrainConfig) -> ArchitectureConfig:
    if config.arch is not None:
        return config.arch
    size = dataset.image_size
    presets = {8: ArchitectureConfig.tiny8, 16: ArchitectureConfig.tiny16,
               32: ArchitectureConfig.tiny32, 64: ArchitectureConfig}
    if size not in presets:
        raise ConfigError(f"no default architecture for {size}x{size}; pass arch")
    return presets[size]()


def train(dataset, config: TrainConfig, params: ModelParams = None,
          store: ChainStore = None, out_dir=None, freeze=frozenset(),
          start_iteration=0, encoder: EncoderParams = None) -> TrainResult:
    """Run config.iterations of training (ABP or VAE by config.mode).

    Pass params/store/start_iteration from a loaded checkpoint to resume; the
    continuation is bit-identical to a never-interrupted run with the same
    seed. On a non-finite loss the current state is written to
    <out_dir>/diagnostic.ckpt and the error re-raised.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if params is None:
        arch = _default_arch_for(dataset, config)
        params = init_params(
            arch, rngs.stream(config.seed, "init"), std=config.init_std,
            sigma=config.sigma, max_displacement=config.max_displacement,
        )
    if store is None:
        store = ChainStore(d_a=params.d_a, d_g=params.d_g, seed=config.seed)
    if config.mode == "vae" and encoder is None:
        encoder = build_encoder(
            params, rngs.stream(config.seed, "encoder-init"),
            include_geometric=config.vae_variant != "appearance_only",
        )

    writer = _MetricsWriter(out_dir, resume=start_iteration > 0)
    metrics = []
    adam = _AdamState() if config.adaptive else None
    try:
        for t in range(start_iteration + 1, config.iterations + 1):
            tic = time.perf_counter()
            try:
                if config.mode == "abp":
                    if adam is None:
                        params, (mse, third) = abp_iteration(dataset, params, store,
                                                             config, t, freeze)
                    else:
                        params, (mse, third) = _abp_iteration_adam(
                            dataset, params, store, config, t, freeze, adam)
                else:
                    idx = _batch_indices(len(dataset), config.batch_size,
                                         rngs.stream(config.seed, "batch", t))
                    params, encoder, stats = vae_train_step(
                        dataset.images[idx], params, encoder, config,
                        rngs.stream(config.seed, "vae-eps", t),
                        rate=config.rate_at(t),
                    )
                    mse, third = stats["mse"], stats["elbo"]
            except NumericError:
                if out_dir is not None:
                    checkpoint_path = os.path.join(out_dir, "diagnostic.ckpt")
                    from .data_io import checkpoint_save

                    checkpoint_save(params, store, checkpoint_path, iteration=t - 1,
                                    seed=config.seed, mode=config.mode, encoder=encoder)
                raise
            wall_ms = (time.perf_counter() - tic) * 1000.0
            row = (t, mse, third, wall_ms)
            metrics.append(row)
            writer.write(row)
            if (out_dir is not None and config.checkpoint_every > 0
                    and t % config.checkpoint_every == 0):
                from .data_io import checkpoint_save

                checkpoint_save(params, store,
                                os.path.join(out_dir, f"ckpt-{t:06d}.ckpt"),
                                iteration=t, seed=config.seed, mode=config.mode,
                                encoder=encoder)
    finally:
        writer.close()
    if out_dir is not None:
        from .data_io import checkpoint_save

        checkpoint_save(params, store, os.path.join(out_dir, "final.ckpt"),
                        iteration=config.iterations, seed=config.seed,
                        mode=config.mode, encoder=encoder)
    return TrainResult(params, store, metrics, encoder)


def _abp_iteration_adam(dataset, params, store, config, iteration, freeze, adam):
    idx = _batch_indices(len(dataset), config.batch_size,
                         rngs.stream(config.seed, "batch", iteration))
    ids = [dataset.ids[i] for i in idx]
    X = dataset.images[idx]
    start = warm_start_batch(store, ids)
    lat = alternating_inference(
        X, start, params, config.langevin,
        rng=rngs.stream(config.seed, "mcmc", iteration),
    )
    write_back(store, ids, lat)
    mse, lj_mean = _metrics_row(X, lat, params)
    grads = mc_gradient(X, lat, params)
    new_params = adam.step(params, grads, config.rate_at(iteration), freeze=freeze)
    return new_params, (mse, lj_mean)
