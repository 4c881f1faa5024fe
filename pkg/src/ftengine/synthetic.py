"""Seeded generator of textured-blob image families.

Each class is a parameter vector (colors, blob geometry, stripe texture);
inter-class parameter spacing shrinks linearly as similarity approaches 1,
so similarity 0.8 yields the "hard to tell apart" regime while per-image
jitter, clutter, and lighting stay constant. Output is byte-deterministic
for a given (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import encode_ppm
from .errors import InvalidHyperparameterError
from .tensor import Tensor

# family centers and the full-range spans scaled by (1 - similarity)
_FG_BASE = np.array([0.60, 0.42, 0.36])
_FG_SPAN = np.array([0.45, -0.40, 0.30])
_BG_BASE = np.array([0.30, 0.38, 0.50])
_BG_SPAN = np.array([-0.25, 0.22, -0.30])


@dataclass
class SynthSpec:
    classes: int = 2
    per_class: int = 500
    size: tuple = (32, 32)
    similarity: float = 0.8

    def validate(self):
        if self.classes < 1:
            raise InvalidHyperparameterError("classes must be >= 1")
        if self.per_class < 1:
            raise InvalidHyperparameterError("per_class must be >= 1")
        if self.size[0] < 16 or self.size[1] < 16:
            raise InvalidHyperparameterError(f"size must be >= 16x16, got {self.size}")
        if not 0.0 <= self.similarity <= 1.0:
            raise InvalidHyperparameterError("similarity must be in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d):
        spec = cls(
            classes=int(d.get("classes", 2)),
            per_class=int(d.get("per_class", 500)),
            size=tuple(d.get("size", (32, 32))),
            similarity=float(d.get("similarity", 0.8)),
        )
        return spec.validate()


def class_parameters(spec):
    """Per-class generative parameters; spacing scales with (1 - similarity)."""
    spread = 1.0 - spec.similarity
    params = []
    for c in range(spec.classes):
        t = (c / (spec.classes - 1) - 0.5) if spec.classes > 1 else 0.0
        s = t * spread
        params.append(
            {
                "fg": _FG_BASE + s * _FG_SPAN,
                "bg": _BG_BASE + s * _BG_SPAN,
                "blobs": 3.0 + s * 4.0,
                "radius": 0.20 + s * 0.14,  # fraction of min(H, W)
                "freq": 6.0 + s * 7.0,  # stripe cycles across the image
                "angle": 0.6 + s * 1.4,  # stripe orientation, radians
            }
        )
    return params


def render_image(params, size, rng):
    """One sample of a class family: lit background, striped soft blobs,
    clutter, noise. Returns float RGB in [0, 1]."""
    h, w = size
    ys, xs = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")

    fg = np.clip(params["fg"] + rng.normal(0, 0.035, 3), 0, 1)
    bg = np.clip(params["bg"] + rng.normal(0, 0.035, 3), 0, 1)
    n_blobs = max(1, int(round(params["blobs"] + rng.normal(0, 0.3))))
    radius = params["radius"] * (1 + rng.normal(0, 0.10))
    freq = params["freq"] * (1 + rng.normal(0, 0.08))
    angle = params["angle"] + rng.normal(0, 0.10)

    img = np.empty((h, w, 3))
    img[:] = bg
    img += (ys - 0.5)[..., None] * rng.uniform(-0.12, 0.12)  # lighting gradient

    # background clutter: faint soft dots, shared across classes
    for _ in range(4):
        cy, cx = rng.uniform(0, 1, 2)
        rr = rng.uniform(0.03, 0.08)
        d2 = (ys - cy) ** 2 + (xs - cx) ** 2
        img += np.exp(-d2 / (2 * rr**2))[..., None] * rng.uniform(-0.08, 0.08)

    stripes = 0.5 + 0.5 * np.sin(
        2 * np.pi * freq * (np.cos(angle) * xs + np.sin(angle) * ys)
        + rng.uniform(0, 2 * np.pi)
    )
    texture = fg * (0.65 + 0.35 * stripes[..., None])

    for _ in range(n_blobs):
        cy = rng.uniform(0.25, 0.75)
        cx = rng.uniform(0.25, 0.75)
        rr = radius * rng.uniform(0.75, 1.25)
        d = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
        mask = 1.0 / (1.0 + np.exp((d - rr) / 0.02))  # soft disk edge
        img = img * (1 - mask[..., None]) + texture * mask[..., None]

    img *= 1 + rng.uniform(-0.10, 0.10)  # global brightness jitter
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1)


def generate_synthetic(spec, seed, out_dir):
    """Write spec.classes x spec.per_class PPM files under out_dir, one
    subdirectory per class. Byte-deterministic for a given seed."""
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    spec.validate()
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    pad = max(2, len(str(spec.classes - 1)))
    for c, params in enumerate(class_parameters(spec)):
        cdir = out_dir / f"class{c:0{pad}d}"
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(spec.per_class):
            img = render_image(params, spec.size, rng)
            raw = Tensor((img * 255.0).astype(np.float32))
            (cdir / f"img{i:05d}.ppm").write_bytes(encode_ppm(raw))
