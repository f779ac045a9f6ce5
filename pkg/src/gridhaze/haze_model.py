"""Haze formation model and data synthesis.

Implements the scattering model I = J*t + A*(1-t) with t = exp(-beta*d),
its inversion, procedural depth/texture generators, the hand-crafted
pre-processing bank (white balance, contrast stretch, gamma, gray), a
parametric domain-shift proxy, and paired-dataset generation with a JSONL
manifest plus PNG storage.

Images are numpy arrays shaped (..., C, H, W) with values in [0, 1];
single images are (C, H, W) and batches (B, C, H, W). Transmission and
depth maps are (H, W).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import InputError, ParameterError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

DEPTH_KINDS = ("linear_ramp", "radial", "smooth_noise")
DOMAINS = ("synthetic", "translated")

DEFAULT_D_MAX = 5.0
DEFAULT_BETA_RANGE = (0.4, 1.6)
DEFAULT_A_RANGE = (0.7, 1.0)
DEFAULT_T_MIN = 0.05


@dataclass
class DepthMap:
    """Relative scene depth in meters, non-negative, shape (H, W)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"depth map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("depth map contains non-finite values")
        if np.any(self.values < 0):
            raise InputError("depth map contains negative values")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class HazeParams:
    """Scattering coefficient and global airlight intensity."""

    beta: float
    A: float

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if not (0.5 <= self.A <= 1.0):
            raise ParameterError(f"A must lie in [0.5, 1.0], got {self.A}")


@dataclass
class DomainShiftParams:
    """Parametric stand-in for restyling synthetic haze toward real haze.

    beta_scale_per_channel rescales each channel's distance from the white
    point (values > 1 thin the haze in that channel), color_cast is an
    additive per-channel offset, gamma_jitter a global power transform, and
    noise_sigma the std-dev of additive Gaussian noise.
    """

    beta_scale_per_channel: tuple[float, float, float] = (1.15, 1.0, 0.9)
    color_cast: tuple[float, float, float] = (0.03, 0.0, -0.02)
    gamma_jitter: float = 1.1
    noise_sigma: float = 0.01

    def __post_init__(self):
        scales = np.asarray(self.beta_scale_per_channel, dtype=np.float64)
        cast = np.asarray(self.color_cast, dtype=np.float64)
        if scales.shape != (3,) or np.any(scales <= 0) or not np.all(np.isfinite(scales)):
            raise ParameterError("beta_scale_per_channel must be 3 positive finite reals")
        if cast.shape != (3,) or np.any(np.abs(cast) > 0.1):
            raise ParameterError("color_cast entries must lie in [-0.1, 0.1]")
        if not (np.isfinite(self.gamma_jitter) and self.gamma_jitter > 0):
            raise ParameterError("gamma_jitter must be positive")
        if not (0 <= self.noise_sigma <= 0.05):
            raise ParameterError("noise_sigma must lie in [0, 0.05]")

    @classmethod
    def identity(cls):
        return cls((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1.0, 0.0)


@dataclass
class HazeSample:
    """A paired record: clear image, hazy image, and the haze parameters."""

    clear: np.ndarray
    hazy: np.ndarray
    t: np.ndarray
    A: float
    depth: DepthMap | None = None
    beta: float | None = None
    domain: str = "synthetic"
    seed: int | None = None
    sample_id: str = ""

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise InputError(f"unknown domain {self.domain!r}")
        if self.clear.shape != self.hazy.shape:
            raise InputError("clear and hazy images must share a shape")
        if self.clear.shape[-2:] != self.t.shape:
            raise InputError("t map spatial shape must match the images")


def _check_image(img, name="image"):
    img = np.asarray(img)
    if img.ndim not in (3, 4):
        raise InputError(f"{name} must be (C, H, W) or (B, C, H, W), got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InputError(f"{name} contains non-finite values")
    return img


def transmission(depth, beta):
    """Transmission map t = exp(-beta * d), elementwise over the depth grid."""
    if not (np.isfinite(beta) and beta > 0):
        raise ParameterError(f"beta must be positive, got {beta}")
    d = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise InputError("depth contains non-finite values")
    return np.exp(-beta * d)


def apply_asm(clear, t, A):
    """Composite haze onto a clear image: I_c = J_c * t + A * (1 - t)."""
    clear = _check_image(clear, "clear")
    t = np.asarray(t)
    if t.shape != clear.shape[-2:]:
        raise InputError(f"t shape {t.shape} does not match image spatial shape {clear.shape[-2:]}")
    t = t.astype(clear.dtype, copy=False)
    return clear * t + A * (1.0 - t)


def invert_asm(hazy, t, A, t_min=DEFAULT_T_MIN):
    """Recover the clear image: J_c = (I_c - A*(1-t')) / t', t' = max(t, t_min).

    The result is clamped to [0, 1]; t_min guards the division where the
    transmission vanishes.
    """
    if not (0 < t_min < 1):
        raise ParameterError(f"t_min must lie in (0, 1), got {t_min}")
    hazy = _check_image(hazy, "hazy")
    t = np.asarray(t)
    if t.shape != hazy.shape[-2:]:
        raise InputError(f"t shape {t.shape} does not match image spatial shape {hazy.shape[-2:]}")
    tp = np.maximum(t, t_min).astype(hazy.dtype, copy=False)
    out = (hazy - A * (1.0 - tp)) / tp
    return np.clip(out, 0.0, 1.0)


def synth_depth(kind, height, width, seed=0, d_max=DEFAULT_D_MAX):
    """Procedural depth map, deterministic per (kind, seed), values in [0, d_max]."""
    if height < 8 or width < 8:
        raise InputError(f"depth grids must be at least 8x8, got {height}x{width}")
    if kind == "linear_ramp":
        ramp = np.linspace(0.0, d_max, height)
        values = np.repeat(ramp[:, None], width, axis=1)
    elif kind == "radial":
        yy, xx = np.mgrid[0:height, 0:width]
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        r = np.hypot(yy - cy, xx - cx)
        values = d_max * r / r.max()
    elif kind == "smooth_noise":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        values = _smooth_noise(rng, height, width, octaves=3)
        values = d_max * (values - values.min()) / max(np.ptp(values), 1e-12)
    else:
        raise ParameterError(f"unknown depth kind {kind!r}")
    return DepthMap(values)


def _smooth_noise(rng, height, width, octaves=3, base=4):
    """Sum of bilinearly upsampled random grids at doubling frequencies."""
    out = np.zeros((height, width))
    amp = 1.0
    for o in range(octaves):
        res = base * (2**o)
        coarse = rng.random((res + 1, res + 1))
        out += amp * _bilinear_resize(coarse, height, width)
        amp *= 0.5
    return out


def _bilinear_resize(grid, height, width):
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, height)
    xs = np.linspace(0, gw - 1, width)
    y0 = np.clip(ys.astype(int), 0, gh - 2)
    x0 = np.clip(xs.astype(int), 0, gw - 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + c * wy * (1 - wx) + d * wy * wx


def procedural_clear_image(height, width, seed=0):
    """Deterministic multi-frequency smooth-noise RGB texture in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chans = []
    for _ in range(3):
        ch = _smooth_noise(rng, height, width, octaves=4)
        ch = (ch - ch.min()) / max(np.ptp(ch), 1e-12)
        chans.append(ch)
    img = np.stack(chans).astype(np.float32)
    # mild global tint keeps channels correlated like natural photographs
    tint = 0.6 + 0.4 * rng.random(3)
    return np.clip(img * tint[:, None, None] + 0.05, 0.0, 1.0).astype(np.float32)


def translate_domain(hazy, params, seed=0):
    """Restyle a hazy image with the parametric domain-shift proxy.

    Applies, in order: per-channel haze re-weighting anchored at the white
    point, additive color cast, gamma jitter, seeded Gaussian noise; the
    output is clamped to [0, 1]. Identity parameters return the input
    unchanged.
    """
    hazy = _check_image(hazy, "hazy")
    scales = np.asarray(params.beta_scale_per_channel, dtype=hazy.dtype)
    cast = np.asarray(params.color_cast, dtype=hazy.dtype)
    cshape = (-1, 1, 1)
    out = hazy
    # each stage is skipped at its identity setting so that identity
    # parameters return the input bit-for-bit
    if np.any(scales != 1.0):
        out = 1.0 - (1.0 - out) * scales.reshape(cshape)
    if np.any(cast != 0.0):
        out = out + cast.reshape(cshape)
    if params.gamma_jitter != 1.0:
        out = np.clip(out, 0.0, 1.0) ** params.gamma_jitter
    if params.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape).astype(hazy.dtype)
    if out is hazy:
        return hazy
    return np.clip(out, 0.0, 1.0).astype(hazy.dtype, copy=False)


# ---------------------------------------------------------------------------
# Hand-crafted pre-processing bank
# ---------------------------------------------------------------------------


def white_balance(img):
    """Gray-world balance: scale each channel to the global mean luminance."""
    img = _check_image(img)
    _require_rgb(img)
    w = np.asarray(LUMA_WEIGHTS, dtype=img.dtype).reshape(-1, 1, 1)
    lum_mean = (img * w).sum(axis=-3, keepdims=True).mean(axis=(-2, -1), keepdims=True)
    ch_mean = img.mean(axis=(-2, -1), keepdims=True)
    scale = np.where(ch_mean > 1e-8, lum_mean / np.maximum(ch_mean, 1e-8), 1.0)
    return np.clip(img * scale, 0.0, 1.0)


def contrast_enhance(img):
    """Linear stretch around the global mean: out = clamp(m + 2*(in - m))."""
    img = _check_image(img)
    m = img.mean(axis=(-3, -2, -1), keepdims=True)
    return np.clip(m + 2.0 * (img - m), 0.0, 1.0)


def gamma_correct(img, gamma):
    """Pointwise power transform out = in ** gamma."""
    if not (np.isfinite(gamma) and gamma > 0):
        raise ParameterError(f"gamma must be positive, got {gamma}")
    img = _check_image(img)
    return np.clip(img, 0.0, 1.0) ** gamma


def gray_scale(img):
    """Single-channel luminance using 0.299/0.587/0.114 weights."""
    img = _check_image(img)
    _require_rgb(img)
    w = np.asarray(LUMA_WEIGHTS, dtype=img.dtype).reshape(-1, 1, 1)
    return np.clip((img * w).sum(axis=-3, keepdims=True), 0.0, 1.0)


def _require_rgb(img):
    if img.shape[-3] != 3:
        raise InputError(f"expected a 3-channel image, got {img.shape[-3]} channels")


def derive_inputs(hazy):
    """Stack the 16-channel hand-crafted input bank from a hazy RGB image.

    Channel layout: [0-2] hazy RGB, [3-5] white balanced, [6-8] contrast
    enhanced, [9-11] gamma 1.5, [12-14] gamma 2.5, [15] gray-scale. Every
    channel stays in [0, 1].
    """
    hazy = _check_image(hazy, "hazy")
    _require_rgb(hazy)
    parts = [
        np.clip(hazy, 0.0, 1.0),
        white_balance(hazy),
        contrast_enhance(hazy),
        gamma_correct(hazy, 1.5),
        gamma_correct(hazy, 2.5),
        gray_scale(hazy),
    ]
    return np.concatenate(parts, axis=-3)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    """Everything make_dataset needs besides n and the seed."""

    beta_range: tuple[float, float] = DEFAULT_BETA_RANGE
    A_range: tuple[float, float] = DEFAULT_A_RANGE
    size: tuple[int, int] = (64, 64)
    d_max: float = DEFAULT_D_MAX
    depth_kind: str = "smooth_noise"
    image_dir: str | None = None
    domain_shift: DomainShiftParams | None = None

    def __post_init__(self):
        lo, hi = self.beta_range
        if not (0 < lo <= hi):
            raise ParameterError(f"invalid beta range {self.beta_range}")
        lo, hi = self.A_range
        if not (0.5 <= lo <= hi <= 1.0):
            raise ParameterError(f"A range must sit inside [0.5, 1.0], got {self.A_range}")
        if self.depth_kind not in DEPTH_KINDS:
            raise ParameterError(f"unknown depth kind {self.depth_kind!r}")


def _clear_image_paths(image_dir):
    names = sorted(
        f for f in os.listdir(image_dir) if f.lower().endswith((".png", ".jpg", ".jpeg"))
    )
    if not names:
        raise InputError(f"image directory {image_dir!r} contains no images")
    return [os.path.join(image_dir, f) for f in names]


def _make_sample(index, child_seed, cfg):
    rng = np.random.default_rng(np.random.SeedSequence(child_seed))
    h, w = cfg.size
    beta = float(rng.uniform(*cfg.beta_range))
    A = float(rng.uniform(*cfg.A_range))
    depth_seed = int(rng.integers(0, 2**31 - 1))
    depth = synth_depth(cfg.depth_kind, h, w, seed=depth_seed, d_max=cfg.d_max)
    if cfg.image_dir is not None:
        paths = _clear_image_paths(cfg.image_dir)
        clear = load_image_png(paths[index % len(paths)])
        if clear.shape[-2:] != (h, w):
            clear = _center_crop_or_tile(clear, h, w)
    else:
        clear = procedural_clear_image(h, w, seed=int(rng.integers(0, 2**31 - 1)))
    t = transmission(depth, beta).astype(np.float32)
    hazy = apply_asm(clear, t, np.float32(A))
    domain = "synthetic"
    if cfg.domain_shift is not None:
        hazy = translate_domain(hazy, cfg.domain_shift, seed=int(rng.integers(0, 2**31 - 1)))
        domain = "translated"
    return HazeSample(
        clear=clear,
        hazy=hazy.astype(np.float32),
        t=t,
        A=A,
        depth=depth,
        beta=beta,
        domain=domain,
        seed=child_seed,
        sample_id=f"{index:05d}",
    )


def _center_crop_or_tile(img, h, w):
    c, ih, iw = img.shape
    if ih < h or iw < w:
        reps = (1, -(-h // ih), -(-w // iw))
        img = np.tile(img, reps)
        ih, iw = img.shape[1:]
    y0 = (ih - h) // 2
    x0 = (iw - w) // 2
    return img[:, y0 : y0 + h, x0 : x0 + w]


def make_dataset(n, seed=0, config=None, workers=1, **kwargs):
    """Generate n paired samples, bit-reproducible from (n, seed, config).

    Per-sample seeds are spawned from one root sequence, so results are
    identical whether samples are generated serially or across workers.
    Keyword arguments are forwarded to DatasetConfig for convenience.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    cfg = config if config is not None else DatasetConfig(**kwargs)
    root = np.random.SeedSequence(seed)
    child_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_make_sample, range(n), child_seeds, [cfg] * n))
    else:
        samples = [_make_sample(i, s, cfg) for i, s in zip(range(n), child_seeds)]
    return samples


def split_dataset(samples, val_fraction=0.1):
    """Deterministic train/val split by sample index (every k-th held out)."""
    if val_fraction <= 0:
        return list(samples), []
    stride = max(2, round(1.0 / val_fraction))
    val = [s for i, s in enumerate(samples) if i % stride == stride - 1]
    train = [s for i, s in enumerate(samples) if i % stride != stride - 1]
    return train, val


# ---------------------------------------------------------------------------
# Disk format: PNG images + JSONL manifest
# ---------------------------------------------------------------------------


def save_image_png(img, path):
    """Write a (C, H, W) float image in [0, 1] as an 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise InputError(f"expected (C, H, W), got shape {img.shape}")
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def load_image_png(path):
    """Read a PNG as a (C, H, W) float32 image in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(arr, (2, 0, 1))


def save_tmap_png(t, path):
    """Write a transmission map as a lossless 16-bit grayscale PNG."""
    arr = np.clip(np.rint(np.asarray(t) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_tmap_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float32)
    return arr / 65535.0


def save_dataset(samples, out_dir):
    """Write samples under out_dir: clear/, hazy/, t/ PNGs plus manifest.jsonl."""
    for sub in ("clear", "hazy", "t"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for i, s in enumerate(samples):
            sid = s.sample_id or f"{i:05d}"
            rel = {
                "clear": f"clear/{sid}.png",
                "hazy": f"hazy/{sid}.png",
                "t": f"t/{sid}.png",
            }
            save_image_png(s.clear, os.path.join(out_dir, rel["clear"]))
            save_image_png(s.hazy, os.path.join(out_dir, rel["hazy"]))
            save_tmap_png(s.t, os.path.join(out_dir, rel["t"]))
            record = {
                "id": sid,
                **rel,
                "beta": s.beta,
                "A": s.A,
                "domain": s.domain,
                "seed": s.seed,
            }
            fh.write(json.dumps(record) + "\n")
    return manifest_path


def load_dataset(data_dir):
    """Read a dataset directory written by save_dataset."""
    manifest_path = os.path.join(data_dir, "manifest.jsonl")
    if not os.path.isfile(manifest_path):
        raise InputError(f"no manifest.jsonl under {data_dir!r}")
    samples = []
    with open(manifest_path) as fh:
        for line in fh:
            rec = json.loads(line)
            samples.append(
                HazeSample(
                    clear=load_image_png(os.path.join(data_dir, rec["clear"])),
                    hazy=load_image_png(os.path.join(data_dir, rec["hazy"])),
                    t=load_tmap_png(os.path.join(data_dir, rec["t"])),
                    A=rec["A"],
                    beta=rec["beta"],
                    domain=rec["domain"],
                    seed=rec["seed"],
                    sample_id=rec["id"],
                )
            )
    return samples
