"""Procedural two-modality phantom datasets for desk-scale experiments.

Modality A images are smoothed collections of random ellipses; modality B is
a monotone, invertible intensity remap of A, so an exact translation between
the modalities exists and the inverse-consistency objectives are satisfiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import Image2D, write_manifest, save_image

TANH_GAIN = 2.0
_TANH_SCALE = math.tanh(TANH_GAIN)


def default_modality_map(values: np.ndarray) -> np.ndarray:
    """Monotone intensity transfer [-1,1] -> [-1,1]: rescaled tanh."""
    return np.tanh(TANH_GAIN * values) / _TANH_SCALE


def default_modality_map_inverse(values: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(values * _TANH_SCALE, -1 + 1e-9, 1 - 1e-9)) / TANH_GAIN


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    n_samples: int = 16
    complexity: int = 5  # ellipses per image
    seed: int = 0
    smoothing_sigma: float = 1.5


def render_phantom(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """One modality-A image: background -1, overlapping soft ellipses."""
    n = spec.image_size
    img = np.full((n, n), -1.0, dtype=np.float64)
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(spec.complexity):
        cy, cx = rng.uniform(0.2 * n, 0.8 * n, size=2)
        ry = rng.uniform(0.08 * n, 0.3 * n)
        rx = rng.uniform(0.08 * n, 0.3 * n)
        theta = rng.uniform(0, math.pi)
        level = rng.uniform(-0.3, 1.0)
        u = (yy - cy) * math.cos(theta) + (xx - cx) * math.sin(theta)
        v = -(yy - cy) * math.sin(theta) + (xx - cx) * math.cos(theta)
        inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
        img[inside] = level
    img = ndimage.gaussian_filter(img, spec.smoothing_sigma)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def generate_phantom_dataset(spec: PhantomSpec, out_dir: str | Path, split: str = "train") -> Path:
    """Write aligned (A, B) pairs as raw float32 plus a manifest; returns the
    manifest path. Deterministic per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    pairs = []
    for i in range(spec.n_samples):
        a = render_phantom(spec, rng)
        b = default_modality_map(a).astype(np.float32)
        sid = f"phantom_{i:05d}"
        src_name, tgt_name = f"{sid}_A.raw", f"{sid}_B.raw"
        save_image(Image2D(a), out_dir / src_name)
        save_image(Image2D(b), out_dir / tgt_name)
        pairs.append({"id": sid, "source": src_name, "target": tgt_name, "aligned_target": None})
    return write_manifest(
        out_dir / "manifest.json",
        pairs,
        modality_names=("A", "B"),
        split=split,
        normalization={"A": (-1.0, 1.0), "B": (-1.0, 1.0)},
    )
