"""Command-line workflow around training, inference, and the analyses.

Every invocation prints one JSON line first: the fully resolved flag values
for the run (defaults included), which is enough to reproduce it. Artifacts
land under --out, or under $DEFGEN_OUT when the flag is omitted.

Exit codes: 0 success, 1 usage or bad value, 2 data/file problems, 3 numeric
failure during computation.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import analysis, data_io
from .errors import ConfigError, DataError, DimensionError, NumericError
from .generators import ArchitectureConfig
from .inference import LangevinConfig
from .training import TrainConfig, train

PRESETS = {8: ArchitectureConfig.tiny8, 16: ArchitectureConfig.tiny16,
           32: ArchitectureConfig.tiny32, 64: ArchitectureConfig}

VECTOR_ALIASES = {"app": "appearance", "appearance": "appearance",
                  "geo": "geometric", "geometric": "geometric"}


def _add_common(p):
    p.add_argument("--out", default=None,
                   help="output directory (default: $DEFGEN_OUT or ./out)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0,
                   help="BLAS thread cap, recorded in the config echo; "
                        "0 leaves the library default")


def _add_inference_flags(p, steps=300):
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--no-noise", action="store_true",
                   help="plain gradient ascent instead of Langevin updates")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="defgen",
        description="Deformable generator: train, sample, and analyze.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model by alternating back-propagation")
    p.add_argument("--data", required=True, help="directory of lossless images")
    p.add_argument("--size", type=int, default=64, help="training resolution")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-decay-every", type=int, default=0)
    p.add_argument("--lr-decay-factor", type=float, default=0.5)
    p.add_argument("--langevin-steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--mode", choices=["abp", "vae"], default="abp")
    p.add_argument("--vae-variant",
                   choices=["full", "zero_disp", "appearance_only"], default="full")
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--max-disp", type=float, default=8.0)
    p.add_argument("--init-std", type=float, default=0.02)
    p.add_argument("--alpha", type=float, default=0.625)
    p.add_argument("--gamma", type=float, default=10.0,
                   help="sweep half-width recorded for downstream visualization")
    p.add_argument("--d-a", type=int, default=0, help="0 keeps the preset value")
    p.add_argument("--d-g", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_common(p)

    p = sub.add_parser("synth", help="generate the synthetic labeled dataset")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    _add_common(p)

    p = sub.add_parser("infer", help="posterior latents for a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    _add_inference_flags(p)
    _add_common(p)

    p = sub.add_parser("interpolate", help="sweep one latent dimension")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vector", choices=sorted(VECTOR_ALIASES), default="app")
    p.add_argument("--dim", type=int, default=0)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--sweep-steps", type=int, default=10)
    _add_common(p)

    p = sub.add_parser("swap", help="recombine appearance and geometry of two examples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--a", type=int, default=0, help="index of the appearance donor")
    p.add_argument("--b", type=int, default=1, help="index of the geometry donor")
    _add_inference_flags(p)
    _add_common(p)

    p = sub.add_parser("covariance", help="latent responses to a labeled factor")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--factors", required=True, help="factor table csv")
    p.add_argument("--factor", required=True, help="factor column name")
    _add_inference_flags(p)
    _add_common(p)

    p = sub.add_parser("reconstruct", help="reconstruction error on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--convention", choices=["sum255", "mean01"], default="sum255")
    _add_inference_flags(p)
    _add_common(p)

    p = sub.add_parser("transfer", help="fine-tune appearance with frozen geometry")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--langevin-steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=0.1)
    _add_common(p)

    p = sub.add_parser("warp-apply", help="drive an external image through the warp")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="file at model resolution")
    p.add_argument("--dim", type=int, default=0)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--sweep-steps", type=int, default=10)
    _add_common(p)

    return parser


def _resolve_run(args):
    if args.out is None:
        args.out = os.environ.get("DEFGEN_OUT", "out")
    if args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    echo = dict(sorted(vars(args).items()))
    print(json.dumps(echo, sort_keys=True, default=str))
    os.makedirs(args.out, exist_ok=True)


def _save_png(image, path):
    data_io.emit_grid(image[None], 1, path)


def _load_for_model(args, params):
    return data_io.load_image_dir(args.data, params.image_size)


def _langevin(args):
    return dict(steps=args.steps, step_size=args.step_size,
                noise=not args.no_noise, seed=args.seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args):
    dataset = data_io.load_image_dir(args.data, args.size)
    config = TrainConfig(
        iterations=args.iters, batch_size=args.batch, learning_rate=args.lr,
        lr_decay_every=args.lr_decay_every, lr_decay_factor=args.lr_decay_factor,
        langevin=LangevinConfig(step_size=args.step_size,
                                steps=args.langevin_steps, seed=args.seed),
        mode=args.mode, seed=args.seed, sigma=args.sigma,
        max_displacement=args.max_disp, init_std=args.init_std,
        arch=_architecture(args), checkpoint_every=args.checkpoint_every,
        adaptive=args.adaptive, vae_variant=args.vae_variant,
    )
    params = store = encoder = None
    start = 0
    if args.resume:
        loaded = data_io.checkpoint_load_full(args.resume)
        params, store, encoder = loaded.params, loaded.store, loaded.encoder
        start = int(loaded.header.get("iteration", 0))
    result = train(dataset, config, params=params, store=store, out_dir=args.out,
                   start_iteration=start, encoder=encoder)
    if result.metrics:
        last = result.metrics[-1]
        print(f"iteration={last[0]} mse={last[1]:.6g}")
    else:
        print("iteration=0 (no updates run)")
    return 0


def _architecture(args):
    if args.size not in PRESETS:
        raise ConfigError(
            f"no architecture preset for size {args.size}; supported: "
            f"{sorted(PRESETS)}")
    arch = PRESETS[args.size]()
    updates = {"alpha": args.alpha}
    if args.d_a:
        updates["d_a"] = args.d_a
    if args.d_g:
        updates["d_g"] = args.d_g
    from dataclasses import replace

    return replace(arch, **updates)


def cmd_synth(args):
    dataset = data_io.synth_generate(args.count, args.size, seed=args.seed)
    img_dir = os.path.join(args.out, "images")
    os.makedirs(img_dir, exist_ok=True)
    for i, ex_id in enumerate(dataset.ids):
        _save_png(dataset.images[i], os.path.join(img_dir, f"{ex_id}.png"))
    data_io.factors_save(dataset.factors, dataset.ids,
                         os.path.join(args.out, "factors.csv"))
    print(f"wrote {len(dataset)} images to {img_dir}")
    return 0


def cmd_infer(args):
    params, _ = data_io.checkpoint_load(args.ckpt)
    dataset = _load_for_model(args, params)
    lat = analysis.infer_latents(dataset.images, params, **_langevin(args))
    path = os.path.join(args.out, "latents.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"]
                        + [f"za{i}" for i in range(params.d_a)]
                        + [f"zg{i}" for i in range(params.d_g)])
        for i, ex_id in enumerate(dataset.ids):
            writer.writerow([ex_id] + [repr(float(v)) for v in lat.z_a[i]]
                            + [repr(float(v)) for v in lat.z_g[i]])
    from .generators import model_forward

    recon = model_forward(lat, params)
    data_io.emit_grid(recon, min(8, len(dataset)),
                      os.path.join(args.out, "reconstructions.png"))
    mse = float(((dataset.images - recon) ** 2).mean())
    print(f"n={len(dataset)} recon_mse={mse:.6g}")
    return 0


def cmd_interpolate(args):
    params, _ = data_io.checkpoint_load(args.ckpt)
    spec = analysis.SweepSpec(vector=VECTOR_ALIASES[args.vector], dim=args.dim,
                              gamma=args.gamma, steps=args.sweep_steps)
    seq = analysis.interpolate_dimension(params, spec)
    path = os.path.join(args.out, "interpolate.png")
    data_io.emit_grid(seq, len(seq), path)
    print(f"wrote {len(seq)} frames to {path}")
    return 0


def cmd_swap(args):
    params, _ = data_io.checkpoint_load(args.ckpt)
    dataset = _load_for_model(args, params)
    for idx in (args.a, args.b):
        if not 0 <= idx < len(dataset):
            raise DataError(f"example index {idx} outside dataset of {len(dataset)}")
    pair = dataset.images[[args.a, args.b]]
    lat = analysis.infer_latents(pair, params, **_langevin(args))
    ab = analysis.recombine_latents(params, lat.z_a[0], lat.z_g[1])
    ba = analysis.recombine_latents(params, lat.z_a[1], lat.z_g[0])
    grid = np.stack([pair[0], pair[1], ab, ba])
    path = os.path.join(args.out, "swap.png")
    data_io.emit_grid(grid, 4, path)
    print(f"wrote A, B, A-appearance/B-geometry, B-appearance/A-geometry to {path}")
    return 0


def cmd_covariance(args):
    params, _ = data_io.checkpoint_load(args.ckpt)
    dataset = _load_for_model(args, params)
    ids, table = data_io.factors_load(args.factors)
    order = {ex_id: i for i, ex_id in enumerate(ids)}
    try:
        rows = [order[os.path.splitext(ex_id)[0]] for ex_id in dataset.ids]
    except KeyError as exc:
        raise DataError(f"factor table has no row for image {exc}") from exc
    dataset = data_io.Dataset(dataset.images, dataset.ids, table.subset(rows))
    res = analysis.covariance_response(params, dataset, args.factor,
                                       **_langevin(args))
    path = os.path.join(args.out, "covariance.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vector", "dim", "response"])
        for i, r in enumerate(res.r_g):
            writer.writerow(["geometric", i, repr(float(r))])
        for i, r in enumerate(res.r_a):
            writer.writerow(["appearance", i, repr(float(r))])
    print(f"max_r_g={res.r_g.max():.6g} max_r_a={res.r_a.max():.6g}")
    return 0


def cmd_reconstruct(args):
    params, _ = data_io.checkpoint_load(args.ckpt)
    dataset = _load_for_model(args, params)
    res = analysis.reconstruction_error(params, dataset,
                                        convention=args.convention,
                                        **_langevin(args))
    path = os.path.join(args.out, "reconstruction.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "error"])
        for ex_id, err in zip(dataset.ids, res.per_image):
            writer.writerow([ex_id, repr(float(err))])
    print(f"mean_error={res.mean:.6g} convention={res.convention}")
    return 0


def cmd_transfer(args):
    params, _ = data_io.checkpoint_load(args.ckpt)
    dataset = _load_for_model(args, params)
    config = TrainConfig(
        iterations=args.iters, batch_size=args.batch, learning_rate=args.lr,
        langevin=LangevinConfig(step_size=args.step_size,
                                steps=args.langevin_steps, seed=args.seed),
        seed=args.seed, sigma=params.sigma,
        max_displacement=params.max_displacement,
    )
    result = analysis.transfer_fine_tune(params, dataset, config,
                                         out_dir=args.out)
    if result.metrics:
        print(f"iteration={result.metrics[-1][0]} mse={result.metrics[-1][1]:.6g}")
    else:
        print("iteration=0 (no updates run)")
    return 0


def cmd_warp_apply(args):
    params, _ = data_io.checkpoint_load(args.ckpt)
    image = data_io.load_image(args.image)
    spec = analysis.SweepSpec(vector="geometric", dim=args.dim,
                              gamma=args.gamma, steps=args.sweep_steps)
    seq = analysis.apply_warp_external(image, params, spec)
    path = os.path.join(args.out, "warp.png")
    data_io.emit_grid(seq, len(seq), path)
    print(f"wrote {len(seq)} frames to {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "synth": cmd_synth,
    "infer": cmd_infer,
    "interpolate": cmd_interpolate,
    "swap": cmd_swap,
    "covariance": cmd_covariance,
    "reconstruct": cmd_reconstruct,
    "transfer": cmd_transfer,
    "warp-apply": cmd_warp_apply,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses status 2 for usage problems and 0 for --help
        return 0 if exc.code == 0 else 1
    try:
        _resolve_run(args)
        return COMMANDS[args.command](args)
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
