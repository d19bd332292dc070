"""Dataset I/O and synthetic data.

Images travel as 8-bit netpbm files: P6 PPM for 3-channel images, P5/P2 PGM
for grayscale images and masks. Binary masks are 0/255; multi-class masks
store label indices directly. The synthetic generator produces either
noisy anti-aliased ellipse blobs (binary) or smooth non-crossing horizontal
bands (4-class layer maps) and is bit-reproducible from its seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .autodiff import _resize_axis
from .errors import ConfigError, DataError, FormatError


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8
    id: str


# ---------------------------------------------------------------------------
# netpbm


def _next_token(blob: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(blob)
    while pos < n:
        c = blob[pos : pos + 1]
        if c == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
        pos += 1
    return blob[start:pos], pos


def _parse_int(blob: bytes, pos: int, what: str) -> Tuple[int, int]:
    tok, newpos = _next_token(blob, pos)
    try:
        return int(tok), newpos
    except ValueError:
        raise FormatError(f"bad {what} {tok!r} at byte {pos}") from None


def read_netpbm(path) -> np.ndarray:
    """Read P2/P5 PGM (-> H x W) or P6 PPM (-> H x W x 3), 8-bit only."""
    blob = Path(path).read_bytes()
    try:
        magic, pos = _next_token(blob, 0)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if magic not in (b"P2", b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r} at byte 0")
    try:
        width, pos = _parse_int(blob, pos, "width")
        height, pos = _parse_int(blob, pos, "height")
        maxval, pos = _parse_int(blob, pos, "maxval")
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: maxval {maxval} unsupported (8-bit only)")

    if magic == b"P2":
        count = width * height
        vals = []
        for _ in range(count):
            v, pos = _parse_int(blob, pos, "pixel")
            vals.append(v)
        arr = np.array(vals, dtype=np.uint8).reshape(height, width)
        return arr

    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    count = width * height * channels
    if len(blob) - pos < count:
        raise FormatError(
            f"{path}: raster truncated at byte {pos} (need {count} bytes, have {len(blob) - pos})"
        )
    arr = np.frombuffer(blob, dtype=np.uint8, count=count, offset=pos)
    if magic == b"P6":
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"PGM writer needs H x W, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"PPM writer needs H x W x 3, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# folder loading


def _validate_mask(mask: np.ndarray, num_classes: int, name: str) -> None:
    if num_classes == 1:
        bad = (mask != 0) & (mask != 255)
    else:
        bad = mask >= num_classes
    if bad.any():
        idx = np.unravel_index(int(np.argmax(bad)), mask.shape)
        raise DataError(
            f"mask {name!r}: invalid value {int(mask[idx])} at pixel {idx} "
            f"({'binary 0/255 expected' if num_classes == 1 else f'labels < {num_classes} expected'})"
        )


def load_folder(root, num_classes: int = 1) -> List[Sample]:
    """Load images/ + masks/ pairs matched by basename, sorted by id.

    Unpaired files are reported together in one error; masks are validated
    against the configured class count.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root}: expected images/ and masks/ subdirectories")
    images = {p.stem: p for p in img_dir.iterdir() if p.suffix in (".ppm", ".pgm")}
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix in (".ppm", ".pgm")}
    missing = [f"no mask for image {s!r}" for s in sorted(images.keys() - masks.keys())]
    missing += [f"no image for mask {s!r}" for s in sorted(masks.keys() - images.keys())]
    if missing:
        raise DataError(f"{root}: unpaired files: " + "; ".join(missing))

    samples = []
    for stem in sorted(images):
        img = read_netpbm(images[stem])
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        mask = read_netpbm(masks[stem])
        if mask.ndim != 2:
            raise DataError(f"mask {stem!r} must be single-channel, got shape {mask.shape}")
        if img.shape[:2] != mask.shape:
            raise DataError(f"{stem!r}: image {img.shape[:2]} and mask {mask.shape} sizes differ")
        _validate_mask(mask, num_classes, stem)
        samples.append(Sample(image=img, mask=mask, id=stem))
    return samples


# ---------------------------------------------------------------------------
# resizing helpers (plain arrays; the autodiff op covers tensors)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of an H x W or H x W x C array."""
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[:2]
    r0, r1, rf = _resize_axis(h, out_h)
    c0, c1, cf = _resize_axis(w, out_w)
    rfb = rf.reshape((-1,) + (1,) * (a.ndim - 1))
    tmp = a[r0] + rfb * (a[r1] - a[r0])
    cfb = cf.reshape((1, -1) + (1,) * (a.ndim - 2))
    return tmp[:, c0] + cfb * (tmp[:, c1] - tmp[:, c0])


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    a = np.asarray(arr)
    h, w = a.shape[:2]
    rows = np.clip(np.rint((np.arange(out_h) + 0.5) * (h / out_h) - 0.5).astype(int), 0, h - 1)
    cols = np.clip(np.rint((np.arange(out_w) + 0.5) * (w / out_w) - 0.5).astype(int), 0, w - 1)
    return a[rows][:, cols]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    canvas: Tuple[int, int] = (64, 64)
    blob_count: Tuple[int, int] = (1, 4)
    blob_radius: Tuple[float, float] = (3.0, 14.0)
    contrast: float = 60.0
    noise_sigma: float = 25.0
    topology: str = "blobs"  # or "layers"

    def __post_init__(self):
        if self.topology not in ("blobs", "layers"):
            raise ConfigError(f"topology must be 'blobs' or 'layers', got {self.topology!r}")
        if self.blob_radius[0] > self.blob_radius[1] or self.blob_radius[0] <= 0:
            raise ConfigError(f"bad blob_radius range {self.blob_radius}")
        if self.blob_radius[1] * 2 >= min(self.canvas):
            raise ConfigError(
                f"blob radius {self.blob_radius[1]} does not fit canvas {self.canvas}"
            )
        if self.blob_count[0] < 1 or self.blob_count[0] > self.blob_count[1]:
            raise ConfigError(f"bad blob_count range {self.blob_count}")


def _blob_sample(spec: SyntheticSpec, rng: np.random.Generator, idx: int) -> Sample:
    h, w = spec.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coverage = np.zeros((h, w))
    count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    for _ in range(count):
        rx = rng.uniform(*spec.blob_radius)
        ry = rng.uniform(*spec.blob_radius)
        margin = max(rx, ry) + 1
        cx = rng.uniform(margin, w - margin)
        cy = rng.uniform(margin, h - margin)
        theta = rng.uniform(0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        q = np.sqrt(u * u + v * v)
        cov = np.clip(0.5 + (1.0 - q) * min(rx, ry), 0.0, 1.0)
        coverage = np.maximum(coverage, cov)
    mask = np.where(coverage >= 0.5, 255, 0).astype(np.uint8)
    gray = 90.0 + spec.contrast * coverage + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    img = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    return Sample(image=np.repeat(img[:, :, None], 3, axis=2), mask=mask, id=f"sample_{idx:04d}")


def _smooth_curve(rng: np.random.Generator, width: int, amplitude: float) -> np.ndarray:
    raw = rng.normal(0.0, 1.0, size=width)
    win = max(3, width // 8)
    kernel = np.ones(win) / win
    smooth = np.convolve(np.concatenate([raw[::-1], raw, raw[::-1]]), kernel, mode="same")
    smooth = smooth[width : 2 * width]
    peak = np.abs(smooth).max()
    return smooth / peak * amplitude if peak > 0 else smooth


def _layer_sample(spec: SyntheticSpec, rng: np.random.Generator, idx: int) -> Sample:
    h, w = spec.canvas
    bases = np.array([0.25, 0.5, 0.75]) * h + rng.uniform(-0.06 * h, 0.06 * h, size=3)
    limit_low, limit_high, gap = 2.0, h - 3.0, 2.0
    bounds = []
    prev = limit_low - gap
    for b in np.sort(bases):
        curve = b + _smooth_curve(rng, w, amplitude=0.05 * h)
        curve = np.maximum(curve, prev + gap)
        curve = np.clip(curve, limit_low, limit_high)
        curve = np.maximum(curve, prev + gap)  # re-apply after the clip
        bounds.append(curve)
        prev = curve
    rows = np.arange(h)[:, None]
    labels = np.zeros((h, w), dtype=np.uint8)
    for b in bounds:
        labels += (rows >= b[None, :]).astype(np.uint8)
    shades = np.array([50.0, 100.0, 150.0, 200.0])
    gray = shades[labels] + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    img = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    return Sample(image=np.repeat(img[:, :, None], 3, axis=2), mask=labels, id=f"sample_{idx:04d}")


def synth_samples(spec: SyntheticSpec, seed: int, n: int) -> List[Sample]:
    """Generate n samples in memory; sample i depends only on (seed, i)."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        out.append(_blob_sample(spec, rng, i) if spec.topology == "blobs" else _layer_sample(spec, rng, i))
    return out


def synth_generate(spec: SyntheticSpec, seed: int, n: int, out_dir) -> List[str]:
    """Write a generated dataset to out_dir/images and out_dir/masks."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for s in synth_samples(spec, seed, n):
        write_ppm(out_dir / "images" / f"{s.id}.ppm", s.image)
        write_pgm(out_dir / "masks" / f"{s.id}.pgm", s.mask)
        ids.append(s.id)
    return ids


# ---------------------------------------------------------------------------
# augmentation


def _rotate(arr: np.ndarray, angle_deg: float, order: str) -> np.ndarray:
    """Rotate about the image center; out-of-frame samples read as 0."""
    h, w = arr.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.deg2rad(angle_deg)
    cos, sin = np.cos(rad), np.sin(rad)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = cos * (xx - cx) + sin * (yy - cy) + cx
    sy = -sin * (xx - cx) + cos * (yy - cy) + cy
    if order == "nearest":
        ix = np.rint(sx).astype(int)
        iy = np.rint(sy).astype(int)
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.zeros_like(arr)
        out[valid] = arr[iy[valid], ix[valid]]
        return out
    squeeze = arr.ndim == 2
    values = arr.astype(np.float64).reshape(h, w, -1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    acc = np.zeros_like(values)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ix = np.clip(x0 + dx, 0, w - 1)
        iy = np.clip(y0 + dy, 0, h - 1)
        inside = (x0 + dx >= 0) & (x0 + dx < w) & (y0 + dy >= 0) & (y0 + dy < h)
        acc += (wgt * inside)[:, :, None] * values[iy, ix]
    out = np.clip(np.rint(acc), 0, 255).astype(arr.dtype)
    return out[:, :, 0] if squeeze else out


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """50% horizontal flip plus a rotation by a whole degree in [-15, 15].

    The image is resampled bilinearly, the mask nearest-neighbor, with the
    identical transform, so labels stay valid and stay aligned.
    """
    image, mask = sample.image, sample.mask
    if rng.random() < 0.5:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
    angle = int(rng.integers(-15, 16))
    if angle != 0:
        image = _rotate(image, angle, "bilinear")
        mask = _rotate(mask, angle, "nearest")
    return Sample(image=image, mask=mask, id=sample.id)


# ---------------------------------------------------------------------------
# cross-validation folds


def kfold(n: int, k: int, seed: int) -> List[List[int]]:
    """Deterministic shuffle into k near-equal disjoint index folds."""
    if not 2 <= k <= n:
        raise ConfigError(f"kfold needs 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng([seed, 0xF01D]).permutation(n)
    base, extra = divmod(n, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append([int(x) for x in perm[start : start + size]])
        start += size
    return folds
