"""Datasets, synthetic factor-labeled data, checkpoints, and image grids.

The synthetic generator draws one anti-aliased shape (ellipse or rectangle)
per image on a black background. Appearance factors are hue and brightness;
geometric factors are translation (tx along columns, ty along rows), scale,
and rotation. Every factor is logged per example, which is what makes the
disentanglement analyses measurable without external data.

Checkpoint binary layout (all integers little-endian):

    magic b"DGN1"
    u32 header length, then that many bytes of UTF-8 JSON
    tensor records: u16 name length, name, u8 ndim, ndim * u32 dims,
                    float32 data
    u32 crc32 of everything between the header and the checksum

The JSON header carries the model description (layer specs, sigma,
max-displacement, architecture config when present), training position
(iteration, seed, mode), and the chain-store metadata.
"""

from __future__ import annotations

import colorsys
import csv
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import rngs
from .errors import (
    CheckpointChecksumError,
    CheckpointMagicError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    DimensionError,
)
from .generators import ArchitectureConfig, LatentPair, ModelParams
from .inference import ChainStore
from .tensor_ops import LayerSpec
from .warp import bilinear_sample

Array = np.ndarray

MAGIC = b"DGN1"
FORMAT_VERSION = 1

LOSSLESS_SUFFIXES = {".png", ".bmp", ".ppm", ".pgm", ".tif", ".tiff"}


# ---------------------------------------------------------------------------
# dataset containers
# ---------------------------------------------------------------------------

@dataclass
class FactorTable:
    """Per-example ground-truth factor values, keyed by factor name."""

    values: dict

    def __post_init__(self):
        lengths = {len(v) for v in self.values.values()}
        if len(lengths) > 1:
            raise DimensionError(f"factor columns disagree in length: {lengths}")

    def __len__(self):
        return len(next(iter(self.values.values()))) if self.values else 0

    def levels(self, name) -> Array:
        return np.unique(np.asarray(self.values[name], dtype=np.float64))

    def level_indices(self, name):
        """[(level, indices of examples at that level)] sorted by level."""
        col = np.asarray(self.values[name], dtype=np.float64)
        return [(lvl, np.flatnonzero(col == lvl)) for lvl in self.levels(name)]

    def subset(self, indices) -> "FactorTable":
        return FactorTable({k: np.asarray(v)[indices] for k, v in self.values.items()})


def unit_factor_vector(levels) -> Array:
    """Factor level values scaled to unit norm (the probe direction v)."""
    v = np.asarray(levels, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0:
        raise DataError("factor levels are all zero; direction is undefined")
    return v / n


@dataclass
class Dataset:
    images: Array  # (n, D, D, 3) in [0, 1]
    ids: list
    factors: FactorTable | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DimensionError(f"images must be (n, D, D, 3), got {self.images.shape}")
        if len(self.ids) != self.images.shape[0]:
            raise DimensionError(
                f"{len(self.ids)} ids for {self.images.shape[0]} images"
            )
        if len(set(self.ids)) != len(self.ids):
            raise DataError("example ids are not unique")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.images[idx],
            [self.ids[i] for i in idx],
            None if self.factors is None else self.factors.subset(idx),
        )


# ---------------------------------------------------------------------------
# image directory ingestion
# ---------------------------------------------------------------------------

def _resample_square(img: Array, target: int) -> Array:
    size = img.shape[0]
    if size == target:
        return img
    coords = (np.arange(target, dtype=np.float64) + 0.5) * (size / target) - 0.5
    u = np.repeat(coords[:, None], target, axis=1)
    v = np.repeat(coords[None, :], target, axis=0)
    return bilinear_sample(img, (u, v))


def _center_crop_square(img: Array) -> Array:
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return img[top:top + side, left:left + side]


def load_image_dir(path, target_size: int) -> Dataset:
    """Decode a directory of lossless raster images into a normalized dataset.

    Files are taken in lexicographic order; each is center-cropped square,
    resampled to target_size with the package's own bilinear sampler, and
    scaled to [0, 1].
    """
    import os

    if not os.path.isdir(path):
        raise DataError(f"not a directory: {path}")
    names = sorted(n for n in os.listdir(path) if not n.startswith("."))
    if not names:
        raise DataError(f"no files in {path}")
    images, ids = [], []
    for name in names:
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        suffix = os.path.splitext(name)[1].lower()
        if suffix not in LOSSLESS_SUFFIXES:
            raise DataError(
                f"{name}: only lossless raster inputs are accepted ({sorted(LOSSLESS_SUFFIXES)})"
            )
        try:
            with Image.open(full) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except Exception as exc:
            raise DataError(f"{name}: cannot decode ({exc})") from exc
        resized = _resample_square(_center_crop_square(arr), target_size)
        images.append(resized.astype(np.float32))
        ids.append(name)
    if not images:
        raise DataError(f"no usable images in {path}")
    return Dataset(np.stack(images), ids)


def load_image(path) -> Array:
    """Decode one lossless raster file at its native size, scaled to [0, 1].
    No cropping or resampling happens here."""
    import os

    name = os.path.basename(path)
    suffix = os.path.splitext(name)[1].lower()
    if suffix not in LOSSLESS_SUFFIXES:
        raise DataError(
            f"{name}: only lossless raster inputs are accepted ({sorted(LOSSLESS_SUFFIXES)})"
        )
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise DataError(f"{name}: cannot decode ({exc})") from exc
    return arr.astype(np.float32)


def factors_save(table: FactorTable, ids, path):
    """Factor table as delimited text: one id column, one column per factor."""
    names = sorted(table.values)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + names)
        for i, ex_id in enumerate(ids):
            writer.writerow([ex_id] + [repr(float(table.values[n][i])) for n in names])


def factors_load(path) -> "tuple[list, FactorTable]":
    """(ids, FactorTable) back from factors_save output."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["id"]:
        raise DataError(f"{path}: expected an id-led factor table header")
    names = rows[0][1:]
    ids = [r[0] for r in rows[1:]]
    values = {
        n: np.array([float(r[1 + j]) for r in rows[1:]])
        for j, n in enumerate(names)
    }
    return ids, FactorTable(values)


# ---------------------------------------------------------------------------
# synthetic factor-labeled data
# ---------------------------------------------------------------------------

DEFAULT_FACTOR_RANGES = {
    "hue": (0.0, 360.0),
    "brightness": (0.6, 1.0),
    "tx": None,   # filled from image size: +-size/8
    "ty": None,
    "scale": (0.8, 1.2),
    "rotation": (-30.0, 30.0),
    "shape": ("ellipse",),
}

_SHAPE_CODES = {"ellipse": 0.0, "rectangle": 1.0}


def _draw_factor(rng, spec):
    if isinstance(spec, (tuple, list, np.ndarray)) and len(spec) == 2 \
            and all(isinstance(s, (int, float)) for s in spec):
        return float(rng.uniform(spec[0], spec[1]))
    if isinstance(spec, (tuple, list, np.ndarray)):
        return spec[int(rng.integers(len(spec)))]
    return spec  # fixed value


def render_shape(image_size: int, hue, brightness, tx, ty, scale, rotation,
                 shape="ellipse", supersample=4) -> Array:
    """One anti-aliased filled shape on black, float64 in [0, 1].

    tx shifts along axis 1, ty along axis 0; rotation is degrees
    counter-clockwise; scale multiplies the base half-extents
    (0.28, 0.20) * image_size.
    """
    if shape not in _SHAPE_CODES:
        raise ConfigError(f"unknown shape kind {shape!r}")
    s = image_size
    ss = supersample
    # subpixel centers
    g = (np.arange(s * ss) + 0.5) / ss - 0.5
    ys, xs = np.meshgrid(g, g)  # xs varies along axis 0 (rows)
    cx = (s - 1) / 2.0 + ty
    cy = (s - 1) / 2.0 + tx
    rx, ry = 0.28 * s * scale, 0.20 * s * scale
    th = math.radians(rotation)
    px = (xs - cx) * math.cos(th) - (ys - cy) * math.sin(th)
    py = (xs - cx) * math.sin(th) + (ys - cy) * math.cos(th)
    if shape == "ellipse":
        inside = (px / rx) ** 2 + (py / ry) ** 2 <= 1.0
    else:
        inside = (np.abs(px) <= rx) & (np.abs(py) <= ry)
    alpha = inside.reshape(s, ss, s, ss).mean(axis=(1, 3))
    rgb = colorsys.hsv_to_rgb((hue % 360.0) / 360.0, 0.9, brightness)
    return alpha[..., None] * np.asarray(rgb, dtype=np.float64)


def synth_generate(count: int, image_size: int, factor_ranges=None, seed=0) -> Dataset:
    """Dataset of `count` single-shape images with a full FactorTable.

    factor_ranges overrides any of hue/brightness/tx/ty/scale/rotation/shape.
    A 2-tuple of numbers is a uniform range, a longer sequence is a discrete
    set sampled uniformly, and a scalar pins the factor.
    """
    if count < 1:
        raise ConfigError("count must be positive")
    ranges = dict(DEFAULT_FACTOR_RANGES)
    span = image_size / 8.0
    ranges["tx"] = (-span, span)
    ranges["ty"] = (-span, span)
    if factor_ranges:
        for k, v in factor_ranges.items():
            if k not in ranges:
                raise ConfigError(f"unknown factor {k!r}")
            ranges[k] = v
    rng = rngs.stream(seed, "synth")
    images = np.empty((count, image_size, image_size, 3), dtype=np.float32)
    log = {k: [] for k in ("hue", "brightness", "tx", "ty", "scale", "rotation", "shape")}
    for i in range(count):
        draw = {k: _draw_factor(rng, ranges[k]) for k in log}
        images[i] = render_shape(image_size, draw["hue"], draw["brightness"],
                                 draw["tx"], draw["ty"], draw["scale"],
                                 draw["rotation"], draw["shape"])
        for k in log:
            log[k].append(_SHAPE_CODES[draw[k]] if k == "shape" else float(draw[k]))
    factors = FactorTable({k: np.asarray(v) for k, v in log.items()})
    ids = [f"synth-{i:05d}" for i in range(count)]
    return Dataset(images, ids, factors)


# measurement oracles for the synthetic benchmark -----------------------------

def measure_centroid(image: Array):
    """(row, col) intensity centroid of the foreground mask."""
    mass = image.max(axis=-1)
    total = mass.sum()
    if total <= 0:
        raise DataError("image has no foreground to locate")
    rows = np.arange(image.shape[0])
    cols = np.arange(image.shape[1])
    return (
        float((mass.sum(axis=1) * rows).sum() / total),
        float((mass.sum(axis=0) * cols).sum() / total),
    )


def measure_hue(image: Array, min_level=0.15):
    """Hue (degrees) of the mean foreground color."""
    mask = image.max(axis=-1) > min_level
    if not mask.any():
        raise DataError("image has no foreground to measure")
    mean_rgb = image[mask].mean(axis=0)
    peak = mean_rgb.max()
    if peak <= 0:
        raise DataError("foreground is black")
    h, _, _ = colorsys.rgb_to_hsv(*(mean_rgb / peak))
    return float(h * 360.0)


def hue_distance(h1, h2):
    d = abs(float(h1) - float(h2)) % 360.0
    return min(d, 360.0 - d)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def _spec_to_dict(spec: LayerSpec):
    return {
        "kind": spec.kind,
        "in_shape": list(spec.in_shape),
        "out_shape": list(spec.out_shape),
        "kernel_size": spec.kernel_size,
        "stride": spec.stride,
        "activation": spec.activation,
    }


def _spec_from_dict(d) -> LayerSpec:
    return LayerSpec(
        kind=d["kind"],
        in_shape=tuple(d["in_shape"]),
        out_shape=tuple(d["out_shape"]),
        kernel_size=d["kernel_size"],
        stride=d["stride"],
        activation=d["activation"],
    )


def _write_record(buf, name: str, arr: Array):
    data = np.ascontiguousarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(data.tobytes())


def _read_records(payload: bytes):
    out = {}
    off = 0
    n = len(payload)
    while off < n:
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", payload, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        off += 4 * count
        out[name] = arr.reshape(shape).copy()
    return out


def checkpoint_save(params: ModelParams, store: ChainStore | None, path,
                    iteration=0, seed=0, mode="abp", encoder=None, extra=None):
    """Serialize params (and optionally chains and a VAE encoder) to `path`.

    Arrays are stored as little-endian float32; wider dtypes are downcast and
    the header says so. Returns the path.
    """
    tensors = list(params.all_tensors())
    if encoder is not None:
        tensors += encoder.all_tensors()
    chain_ids = []
    if store is not None:
        chain_ids = sorted(store.states, key=str)
        for cid in chain_ids:
            pair = store.states[cid]
            tensors.append((f"chain/{cid}/z_a", pair.z_a))
            tensors.append((f"chain/{cid}/z_g", pair.z_g))
    header = {
        "version": FORMAT_VERSION,
        "sigma": params.sigma,
        "max_displacement": params.max_displacement,
        "d_a": params.d_a,
        "d_g": params.d_g,
        "iteration": int(iteration),
        "seed": int(seed),
        "mode": mode,
        "appearance_specs": [_spec_to_dict(s) for s in params.appearance_specs],
        "geometric_specs": [_spec_to_dict(s) for s in params.geometric_specs],
        "config": None if params.config is None else {
            "image_size": params.config.image_size,
            "d_a": params.config.d_a,
            "d_g": params.config.d_g,
            "geometric_widths": list(params.config.geometric_widths),
            "kernel_sizes": list(params.config.kernel_sizes),
            "alpha": params.config.alpha,
            "base_size": params.config.base_size,
            "out_channels": params.config.out_channels,
        },
        "store": None if store is None else {
            "seed": store.seed, "dtype": str(store.dtype),
            "d_a": store.d_a, "d_g": store.d_g,
        },
        "encoder_specs": None if encoder is None
        else [_spec_to_dict(s) for s in encoder.specs],
        "downcast": any(t.dtype != np.float32 for _, t in tensors),
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    for name, arr in tensors:
        _write_record(buf, name, arr)
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))
    return path


@dataclass
class LoadedCheckpoint:
    params: ModelParams
    store: ChainStore | None
    encoder: object | None
    header: dict


def checkpoint_load_full(path) -> LoadedCheckpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 8:
        raise CheckpointChecksumError(f"{path}: truncated header")
    (header_len,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + header_len
    if len(blob) < header_end + 4:
        raise CheckpointChecksumError(f"{path}: truncated file")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except Exception as exc:
        raise CheckpointChecksumError(f"{path}: unreadable header ({exc})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('version')}, expected {FORMAT_VERSION}"
        )
    payload = blob[header_end:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointChecksumError(f"{path}: payload checksum mismatch")
    try:
        records = _read_records(payload)
    except struct.error as exc:
        raise CheckpointChecksumError(f"{path}: malformed tensor records") from exc

    app_specs = [_spec_from_dict(d) for d in header["appearance_specs"]]
    geo_specs = [_spec_from_dict(d) for d in header["geometric_specs"]]

    def collect(prefix, specs):
        layers = []
        for i, spec in enumerate(specs):
            keys = ("weight", "bias") if spec.kind == "fc" else ("kernel",)
            layers.append({k: records[f"{prefix}/{i}/{k}"] for k in keys})
        return layers

    config = None
    if header.get("config"):
        c = header["config"]
        config = ArchitectureConfig(
            image_size=c["image_size"], d_a=c["d_a"], d_g=c["d_g"],
            geometric_widths=tuple(c["geometric_widths"]),
            kernel_sizes=tuple(c["kernel_sizes"]), alpha=c["alpha"],
            base_size=c["base_size"], out_channels=c["out_channels"],
        )
    params = ModelParams(
        appearance_specs=app_specs,
        geometric_specs=geo_specs,
        appearance_weights=collect("appearance", app_specs),
        geometric_weights=collect("geometric", geo_specs),
        sigma=header["sigma"],
        max_displacement=header["max_displacement"],
        config=config,
    )
    store = None
    if header.get("store") is not None:
        s = header["store"]
        store = ChainStore(d_a=s["d_a"], d_g=s["d_g"], seed=s["seed"], dtype=s["dtype"])
        for name in records:
            if name.startswith("chain/") and name.endswith("/z_a"):
                cid = name[len("chain/"):-len("/z_a")]
                store.states[cid] = LatentPair(
                    records[name], records[f"chain/{cid}/z_g"]
                )
    encoder = None
    if header.get("encoder_specs"):
        from .training import EncoderParams

        enc_specs = [_spec_from_dict(d) for d in header["encoder_specs"]]
        encoder = EncoderParams(specs=enc_specs, weights=collect("encoder", enc_specs))
    return LoadedCheckpoint(params, store, encoder, header)


def checkpoint_load(path):
    """(params, store) from a checkpoint file; see checkpoint_load_full."""
    loaded = checkpoint_load_full(path)
    return loaded.params, loaded.store


# ---------------------------------------------------------------------------
# image grid emission
# ---------------------------------------------------------------------------

def quantize_unit(images: Array) -> Array:
    """[0,1] floats to uint8, round half up at scale 255."""
    return np.floor(np.clip(images, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def emit_grid(images, columns: int, path):
    """Tile images row-major into one 8-bit RGB PNG."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise DataError("emit_grid needs at least one (h, w, 3) image")
    if columns < 1:
        raise ConfigError("columns must be positive")
    n, h, w, c = arr.shape
    rows = -(-n // columns)
    canvas = np.zeros((rows * h, columns * w, c), dtype=np.uint8)
    quant = quantize_unit(arr)
    for i in range(n):
        r, col = divmod(i, columns)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = quant[i]
    Image.fromarray(canvas, mode="RGB").save(path, format="PNG")
    return path
