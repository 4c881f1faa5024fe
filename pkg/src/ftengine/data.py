"""Dataset ingestion, preprocessing, augmentation, and deterministic batching.

Images ride through the pipeline as raw 0-255 float tensors (H, W, 3) and
are normalized to [0, 1] only when batched. The on-disk format is binary
PPM (P6, maxval 255) under one subdirectory per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BatchTooLargeError,
    DatasetDecodeError,
    EmptyDatasetError,
    InvalidHyperparameterError,
    PixelRangeError,
    TruncatedFileError,
    UnsupportedFormatError,
)
from .tensor import Tensor


@dataclass
class AugmentPolicy:
    horizontal_flip_prob: float = 0.5
    rotation_max_deg: float = 15.0
    crop_fraction: float = 0.9
    enabled: bool = True

    def validate(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise InvalidHyperparameterError("horizontal_flip_prob must be in [0, 1]")
        if self.rotation_max_deg < 0:
            raise InvalidHyperparameterError("rotation_max_deg must be >= 0")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise InvalidHyperparameterError("crop_fraction must be in (0, 1]")
        return self


NO_AUGMENT = AugmentPolicy(enabled=False)


@dataclass
class Dataset:
    items: list  # (image Tensor HxWx3 raw 0-255, label index)
    class_names: list
    ids: list | None = None
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)


# ---------------------------------------------------------------------------
# PPM codec


def _read_header_tokens(data, count):
    """Return `count` whitespace-separated tokens after the magic, honoring
    '#' comments, plus the offset of the pixel payload."""
    pos = 2  # past the 2-byte magic
    tokens = []
    while len(tokens) < count:
        if pos >= len(data):
            raise TruncatedFileError("PPM header ended early")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise TruncatedFileError("unterminated PPM comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise TruncatedFileError("missing whitespace after PPM maxval")
    return tokens, pos + 1


def decode_ppm(data):
    """Binary PPM (P6, maxval 255) -> raw (H, W, 3) tensor of 0-255 values."""
    magic = data[:2]
    if magic != b"P6":
        raise UnsupportedFormatError(f"expected P6, got {magic!r}")
    tokens, offset = _read_header_tokens(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise UnsupportedFormatError(f"bad PPM header tokens {tokens}") from e
    if maxval != 255:
        raise UnsupportedFormatError(f"only maxval 255 supported, got {maxval}")
    if width < 1 or height < 1:
        raise UnsupportedFormatError(f"bad PPM dimensions {width}x{height}")
    need = width * height * 3
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise TruncatedFileError(
            f"PPM payload holds {len(payload)} bytes, header promises {need}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Tensor(arr.astype(np.float32))


def encode_ppm(image):
    """Raw 0-255 (H, W, 3) tensor -> binary PPM bytes."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise UnsupportedFormatError(f"PPM needs (H, W, 3), got {arr.shape}")
    h, w, _ = arr.shape
    pixels = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


# ---------------------------------------------------------------------------
# preprocessing


def normalize(image):
    """Divide raw 0-255 values by 255; rejects out-of-range input."""
    arr = image.data
    if arr.min() < 0 or arr.max() > 255:
        raise PixelRangeError(
            f"raw pixel values must lie in [0, 255], got [{arr.min()}, {arr.max()}]"
        )
    return Tensor((arr / np.float32(255.0)).astype(np.float32))


def bilinear_resize(arr, out_h, out_w):
    """Half-pixel-center bilinear resampling of an (H, W, C) array."""
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _sample_bilinear(arr, yy, xx)


def _sample_bilinear(arr, yy, xx):
    """Gather arr at fractional (yy, xx) grids with edge replication."""
    h, w = arr.shape[:2]
    yy = np.clip(yy, 0, h - 1)
    xx = np.clip(xx, 0, w - 1)
    y0 = np.floor(yy).astype(np.intp)
    x0 = np.floor(xx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (yy - y0)[..., None]
    wx = (xx - x0)[..., None]
    top = arr[y0, x0] * (1 - wx) + arr[y0, x1] * wx
    bot = arr[y1, x0] * (1 - wx) + arr[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _rotate(arr, degrees):
    h, w = arr.shape[:2]
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos, sin = np.cos(theta), np.sin(theta)
    # inverse rotation of the destination grid into source coordinates
    src_y = cos * ys + sin * xs + cy
    src_x = -sin * ys + cos * xs + cx
    return _sample_bilinear(arr, src_y, src_x)


def augment(image, policy, rng):
    """Flip / rotate / crop-and-resize in that order; shape preserved and
    values stay inside the input's [min, max] envelope."""
    if policy is None or not policy.enabled:
        return image
    policy.validate()
    arr = image.data.astype(np.float32)
    lo, hi = float(arr.min()), float(arr.max())
    h, w = arr.shape[:2]

    if rng.random() < policy.horizontal_flip_prob:
        arr = arr[:, ::-1]
    if policy.rotation_max_deg > 0:
        angle = rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg)
        arr = _rotate(arr, angle)
    if policy.crop_fraction < 1.0:
        ch = max(1, int(round(h * policy.crop_fraction)))
        cw = max(1, int(round(w * policy.crop_fraction)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        arr = bilinear_resize(arr[top : top + ch, left : left + cw], h, w)
    return Tensor(np.clip(arr, lo, hi).astype(np.float32))


# ---------------------------------------------------------------------------
# ingestion and batching


def load_dataset(root, input_hw):
    """Walk <root>/<class>/*.ppm into a Dataset, resizing to input_hw.

    Class names are the sorted subdirectory names; items are ordered by
    (class, filename) so two loads of one tree are identical.
    """
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    items, ids, failures = [], [], []
    class_names = []
    for d in class_dirs:
        files = sorted(p for p in d.iterdir() if p.suffix == ".ppm")
        if not files:
            continue
        label = len(class_names)
        class_names.append(d.name)
        for p in files:
            try:
                img = decode_ppm(p.read_bytes())
            except (UnsupportedFormatError, TruncatedFileError) as e:
                failures.append((f"{d.name}/{p.name}", e))
                continue
            arr = img.data
            if arr.shape[:2] != tuple(input_hw):
                arr = bilinear_resize(arr, input_hw[0], input_hw[1])
            items.append((Tensor(arr.astype(np.float32)), label))
            ids.append(f"{d.name}/{p.name}")
    if failures:
        raise DatasetDecodeError(failures)
    if not items:
        raise EmptyDatasetError(f"no PPM images under {root}")
    warnings = []
    if len(class_names) == 1:
        warnings.append(f"single-class dataset: only {class_names[0]!r} found")
    return Dataset(items=items, class_names=class_names, ids=ids, warnings=warnings)


def one_hot(labels, num_classes):
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def batch_iterator(ds, b_size, shuffle, rng, policy=None):
    """Yield floor(N / b_size) full batches of (normalized images, one-hot
    labels); the remainder is dropped. Shuffle order and augmentation draws
    come from the supplied generator, so a seed fixes the whole stream."""
    n = len(ds.items)
    if b_size < 1:
        raise InvalidHyperparameterError(f"b_size must be >= 1, got {b_size}")
    if b_size > n:
        raise BatchTooLargeError(f"b_size {b_size} exceeds dataset size {n}")
    order = rng.permutation(n) if shuffle else np.arange(n)
    num_classes = len(ds.class_names)
    for start in range(0, n - b_size + 1, b_size):
        idx = order[start : start + b_size]
        images = []
        labels = []
        for i in idx:
            img, label = ds.items[i]
            img = augment(img, policy, rng)
            images.append(normalize(img).data)
            labels.append(label)
        yield Tensor(np.stack(images)), Tensor(one_hot(labels, num_classes))
