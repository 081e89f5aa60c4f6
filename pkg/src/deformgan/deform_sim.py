"""Controlled elastic misalignment simulator with six graded severity levels.

A coarse control-point grid receives random per-node offsets whose magnitudes
are bounded by the level's [lo, hi] range; bicubic upsampling produces the
dense displacement field applied to the target image of each pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .imaging import Image2D, PairedSample
from .warp import warp_image

# spacing is fixed at (40, 40); magnitude ranges grow one pixel per level
LEVEL_SPACING = (40, 40)
LEVEL_MAGNITUDES = [(1.0, 2.0), (2.0, 3.0), (3.0, 4.0), (4.0, 5.0), (5.0, 6.0), (6.0, 7.0)]

# Catmull-Rom overshoot: 1.25 per axis, so < 1.5625 worst case in 2D; the
# dense field is clamped to this documented bound
BICUBIC_OVERSHOOT_BOUND = 1.5


@dataclass(frozen=True)
class ElasticSpec:
    control_spacing: tuple[int, int]
    magnitude_range: tuple[float, float]
    level_name: str = "custom"
    seed: int = 0

    def __post_init__(self):
        sy, sx = self.control_spacing
        lo, hi = self.magnitude_range
        if sy < 2 or sx < 2:
            raise ValueError("control_spacing components must be >= 2")
        if not (0 <= lo <= hi):
            raise ValueError(f"need 0 <= lo <= hi, got [{lo}, {hi}]")


def level_spec(level: int, seed: int = 0) -> ElasticSpec:
    """Spec for graded severity level 1..6 (spacing (40, 40), magnitude [level, level+1])."""
    if not 1 <= level <= 6:
        raise ValueError(f"level must be in 1..6, got {level}")
    return ElasticSpec(
        control_spacing=LEVEL_SPACING,
        magnitude_range=LEVEL_MAGNITUDES[level - 1],
        level_name=f"NA-{level}",
        seed=seed,
    )


def sample_node_offsets(spec: ElasticSpec, n_nodes: int, rng: np.random.Generator) -> np.ndarray:
    """Per-node, per-axis offsets sign * U(lo, hi) with equiprobable sign."""
    lo, hi = spec.magnitude_range
    mag = rng.uniform(lo, hi, size=(2, n_nodes))
    sign = rng.choice([-1.0, 1.0], size=(2, n_nodes))
    return (sign * mag).astype(np.float64)


def _catmull_rom_axis(values: np.ndarray, positions: np.ndarray, axis: int) -> np.ndarray:
    """Catmull-Rom cubic interpolation of ``values`` along ``axis`` at the
    fractional node ``positions``; edge nodes are replicated."""
    values = np.moveaxis(values, axis, 0)
    n = values.shape[0]
    i0 = np.floor(positions).astype(int)
    i0 = np.clip(i0, 0, n - 1)
    t = positions - i0
    idx = np.stack([np.clip(i0 + k, 0, n - 1) for k in (-1, 0, 1, 2)], axis=0)
    # cardinal spline weights with tension a = -0.5
    w = np.stack(
        [
            -0.5 * t * (1 - t) ** 2,
            1 + t * t * (1.5 * t - 2.5),
            t * (0.5 + t * (2 - 1.5 * t)),
            -0.5 * t * t * (1 - t),
        ],
        axis=0,
    )
    shape = (4, len(positions)) + (1,) * (values.ndim - 1)
    out = (values[idx] * w.reshape(shape)).sum(axis=0)
    return np.moveaxis(out, 0, axis)


def sample_elastic_field(
    spec: ElasticSpec, height: int, width: int, rng: np.random.Generator
) -> np.ndarray:
    """Dense (2, H, W) displacement field from a coarse random control grid.

    Separable bicubic upsampling of the node offsets can overshoot the node
    magnitude; the result is clamped to hi * BICUBIC_OVERSHOOT_BOUND.
    """
    sy, sx = spec.control_spacing
    if height < sy or width < sx:
        raise ValueError(f"image {height}x{width} smaller than one control cell {sy}x{sx}")
    ny = math.ceil(height / sy) + 1
    nx = math.ceil(width / sx) + 1
    offsets = sample_node_offsets(spec, ny * nx, rng).reshape(2, ny, nx)
    hi = spec.magnitude_range[1]
    if hi == 0:
        return np.zeros((2, height, width), dtype=np.float32)
    # node (i, j) sits at pixel (i*sy, j*sx); sample dense pixels in node units
    rows = np.arange(height, dtype=np.float64) / sy
    cols = np.arange(width, dtype=np.float64) / sx
    field = _catmull_rom_axis(offsets, rows, axis=1)
    field = _catmull_rom_axis(field, cols, axis=2)
    bound = hi * BICUBIC_OVERSHOOT_BOUND
    return np.clip(field, -bound, bound).astype(np.float32)


def apply_misalignment(
    pair: PairedSample, spec: ElasticSpec, rng: np.random.Generator
) -> tuple[PairedSample, np.ndarray]:
    """Warp the target modality by a sampled elastic field; the source stays fixed.

    Returns the misaligned pair (aligned_target set to the original target)
    together with the field, which callers persist for diagnostics.
    """
    field = sample_elastic_field(spec, pair.target.height, pair.target.width, rng)
    warped = warp_image(
        torch.from_numpy(pair.target.values), torch.from_numpy(field)
    ).numpy()
    return (
        PairedSample(
            source=pair.source,
            target=Image2D(warped, intensity_scale=pair.target.intensity_scale),
            sample_id=pair.sample_id,
            aligned_target=pair.target,
        ),
        field,
    )
