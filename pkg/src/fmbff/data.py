"""Synthetic dataset generation, augmentation, splits, and PGM/PPM file I/O.

Native formats are binary PPM (P6, maxval 255) for images and binary PGM
(P5, maxval 255) for masks; both are dependency-free to parse and allow
bit-exact golden files.  Directory convention:

    <root>/images/<id>.ppm
    <root>/masks/<id>_mask.pgm
    <root>/manifest.txt          (newline-delimited ids)
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

ROTATION_STEP = 30
BRIGHTNESS_FACTORS = (1.0, 0.8, 1.2)


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W, float32 in [0, 1]
    mask: np.ndarray  # 1 x H x W, float32 in {0, 1}
    id: str

    def validate(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValidationError(
                f"image {self.image.shape} and mask {self.mask.shape} extents differ"
            )
        values = np.unique(self.mask)
        if not np.all(np.isin(values, (0.0, 1.0))):
            raise ValidationError(f"mask is not binary (values {values[:5]}...)")


@dataclass
class SplitPlan:
    train_ids: list
    val_ids: list
    folds: list | None = None


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_noise(rng, h, w, passes=3):
    field = rng.random((h, w))
    for _ in range(passes):
        acc = field.copy()
        acc[1:] += field[:-1]
        acc[:-1] += field[1:]
        acc[:, 1:] += field[:, :-1]
        acc[:, :-1] += field[:, 1:]
        field = acc / 5.0
    field -= field.min()
    span = field.max()
    return field / span if span > 0 else field


def _one_sample(rng, h, w, sample_id):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    background = 0.35 + 0.12 * _smooth_noise(rng, h, w)
    image = np.stack([background] * 3)
    image += rng.normal(0.0, 0.015, size=(3, h, w))
    mask = np.zeros((h, w), dtype=bool)

    for _ in range(int(rng.integers(1, 4))):
        cy = rng.uniform(0.25 * h, 0.75 * h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        ry = rng.uniform(0.10 * h, 0.30 * h)
        rx = rng.uniform(0.10 * w, 0.30 * w)
        angle = rng.uniform(0, math.pi)
        contrast = rng.uniform(0.25, 0.45) * (1 if rng.random() < 0.5 else -1)
        ca, sa = math.cos(angle), math.sin(angle)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        dist = (u / rx) ** 2 + (v / ry) ** 2
        inside = dist <= 1.0
        soft = np.clip((1.2 - dist) / 0.4, 0.0, 1.0)  # soft edge band
        image += contrast * soft[None, :, :]
        mask |= inside

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask[None].astype(np.float32), id=sample_id)


def generate_synthetic(n, size=(64, 64), seed=0):
    """Deterministic lesion-analog blobs on a textured low-contrast background.

    Regenerates a sample until its foreground fraction lies in [0.02, 0.6].
    """
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    h, w = size
    samples = []
    for i in range(n):
        for attempt in range(64):
            rng = np.random.default_rng([int(seed), i, attempt])
            sample = _one_sample(rng, h, w, f"synth{i:04d}")
            frac = float(sample.mask.mean())
            if 0.02 <= frac <= 0.6:
                samples.append(sample)
                break
        else:  # pragma: no cover - generator parameters keep this unreachable
            raise RuntimeError(f"could not synthesize sample {i} in 64 attempts")
    return samples


# ---------------------------------------------------------------------------
# augmentation


def _rotate_bilinear(img, angle_deg, fill=0.0):
    c, h, w = img.shape
    theta = math.radians(angle_deg)
    ca, sa = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: rotate output coordinates back into the source frame
    sx = (xx - cx) * ca + (yy - cy) * sa + cx
    sy = -(xx - cx) * sa + (yy - cy) * ca + cy
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    acc = np.zeros((c, h, w), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ys, xs = y0 + dy, x0 + dx
        valid = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        ysc = np.clip(ys, 0, h - 1)
        xsc = np.clip(xs, 0, w - 1)
        # out-of-frame taps contribute the fill value
        wv = np.where(valid, wgt, 0.0)
        acc += img[:, ysc, xsc] * wv[None] + fill * (wgt - wv)[None]
    return acc.astype(img.dtype)


def _rotate_nearest(img, angle_deg, fill=0.0):
    c, h, w = img.shape
    theta = math.radians(angle_deg)
    ca, sa = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = (xx - cx) * ca + (yy - cy) * sa + cx
    sy = -(xx - cx) * sa + (yy - cy) * ca + cy
    xs = np.rint(sx).astype(int)
    ys = np.rint(sy).astype(int)
    valid = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    out = np.full((c, h, w), fill, dtype=img.dtype)
    out[:, valid] = img[:, ys[valid], xs[valid]]
    return out


def _rot90_exact(arr, quarter_turns):
    return np.ascontiguousarray(np.rot90(arr, k=quarter_turns, axes=(1, 2)))


def augment(sample: Sample, rotation_deg, brightness) -> Sample:
    """Rotate (bilinear image / nearest mask) and scale brightness with clamp.

    Multiples of 90 degrees are index-exact; out-of-frame regions fill with
    zero (image) and background (mask).
    """
    if rotation_deg % ROTATION_STEP != 0 or not 0 <= rotation_deg < 360:
        raise ConfigurationError(
            f"rotation must be a multiple of {ROTATION_STEP} in [0, 360), got {rotation_deg}"
        )
    if brightness not in BRIGHTNESS_FACTORS:
        raise ConfigurationError(
            f"brightness must be one of {BRIGHTNESS_FACTORS}, got {brightness}"
        )
    if rotation_deg % 90 == 0:
        k = rotation_deg // 90
        image = _rot90_exact(sample.image, k)
        mask = _rot90_exact(sample.mask, k)
    else:
        image = _rotate_bilinear(sample.image, rotation_deg)
        mask = _rotate_nearest(sample.mask, rotation_deg)
    image = np.clip(image * brightness, 0.0, 1.0).astype(np.float32)
    new_id = f"{sample.id}_r{rotation_deg:03d}_b{brightness:.1f}"
    if rotation_deg == 0 and brightness == 1.0:
        image, mask = sample.image.copy(), sample.mask.copy()
        new_id = sample.id
    return Sample(image=image, mask=mask.astype(np.float32), id=new_id)


def expand_augmentations(sample: Sample):
    """All 12 rotations x 3 brightness variants of one source sample."""
    out = []
    for rot in range(0, 360, ROTATION_STEP):
        for factor in BRIGHTNESS_FACTORS:
            out.append(augment(sample, rot, factor))
    return out


# ---------------------------------------------------------------------------
# splits


def split(ids, ratio=0.8, seed=0) -> SplitPlan:
    ids = list(ids)
    if not ids:
        raise ConfigurationError("split over an empty id list")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    cut = int(round(len(ids) * ratio))
    return SplitPlan(train_ids=order[:cut], val_ids=order[cut:])


def kfold(ids, k=5, seed=0) -> SplitPlan:
    ids = list(ids)
    if not ids:
        raise ConfigurationError("kfold over an empty id list")
    if k > len(ids):
        raise ConfigurationError(f"k={k} exceeds dataset size {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    base, extra = divmod(len(order), k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(order[start : start + size])
        start += size
    return SplitPlan(train_ids=[], val_ids=[], folds=folds)


# ---------------------------------------------------------------------------
# PGM / PPM I/O


def _read_netpbm(path, magic_expected):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            if blob[pos : pos + 1].isspace():
                pos += 1
            elif blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated header", offset=start)
        return blob[start:pos]

    magic = token()
    if magic != magic_expected:
        raise ParseError(
            f"{path}: bad magic {magic!r}, expected {magic_expected!r}", offset=0
        )
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric header field", offset=pos) from exc
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic_expected == b"P6" else 1
    expected = width * height * channels
    payload = blob[pos : pos + expected]
    if len(payload) != expected:
        raise ParseError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}",
            offset=pos + len(payload),
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return data


def write_image(path, image):
    """Write a 3xHxW float image in [0,1] as binary PPM (P6, maxval 255)."""
    c, h, w = image.shape
    if c != 3:
        raise ValidationError(f"PPM image must have 3 channels, got {c}")
    quantized = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def read_image(path):
    """Read a PPM (or PNG, when Pillow is available) into 3xHxW floats."""
    if str(path).lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - Pillow normally present
            raise ParseError(f"{path}: PNG support requires Pillow") from exc
        arr = np.asarray(Image.open(path).convert("RGB"))
        return (arr.transpose(2, 0, 1) / 255.0).astype(np.float32)
    data = _read_netpbm(path, b"P6")
    return (data.transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_mask(path, mask):
    """Write a 1xHxW binary (or probability) map as binary PGM (P5)."""
    c, h, w = mask.shape
    if c != 1:
        raise ValidationError(f"PGM mask must have 1 channel, got {c}")
    quantized = np.rint(np.clip(mask[0], 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_mask(path):
    """Read a PGM mask, thresholding gray levels above 127 to foreground."""
    data = _read_netpbm(path, b"P5")
    return (data[:, :, 0] > 127).astype(np.float32)[None]


def read_gray(path):
    """Read a PGM file as un-thresholded floats in [0, 1]."""
    data = _read_netpbm(path, b"P5")
    return (data[:, :, 0] / 255.0).astype(np.float32)[None]


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(root, samples):
    images = os.path.join(root, "images")
    masks = os.path.join(root, "masks")
    os.makedirs(images, exist_ok=True)
    os.makedirs(masks, exist_ok=True)
    for s in samples:
        write_image(os.path.join(images, f"{s.id}.ppm"), s.image)
        write_mask(os.path.join(masks, f"{s.id}_mask.pgm"), s.mask)
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("".join(f"{s.id}\n" for s in samples))


def load_dataset(root):
    manifest = os.path.join(root, "manifest.txt")
    if os.path.exists(manifest):
        with open(manifest) as fh:
            ids = [line.strip() for line in fh if line.strip()]
    else:
        ids = sorted(
            os.path.splitext(name)[0]
            for name in os.listdir(os.path.join(root, "images"))
            if name.endswith(".ppm")
        )
    samples = []
    for sid in ids:
        image = read_image(os.path.join(root, "images", f"{sid}.ppm"))
        mask = read_mask(os.path.join(root, "masks", f"{sid}_mask.pgm"))
        sample = Sample(image=image, mask=mask, id=sid)
        sample.validate()
        samples.append(sample)
    return samples
