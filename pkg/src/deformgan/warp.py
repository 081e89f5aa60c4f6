"""Differentiable backward warping of images by dense displacement fields.

Convention: a field ``d`` has shape (2, H, W) with channel 0 the row (dy) and
channel 1 the column (dx) displacement in pixel units. The warped output at
pixel p is the bilinear sample of the input at ``p + d(p)`` (backward warping);
sample coordinates outside the image clamp to the border.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def _as_batched(image: torch.Tensor, field: torch.Tensor):
    """Promote (H,W)/(2,H,W) or (C,H,W) inputs to (N,C,H,W)/(N,2,H,W)."""
    squeeze = 0
    if image.dim() == 2:
        image = image[None, None]
        squeeze = 2
    elif image.dim() == 3:
        image = image[None]
        squeeze = 1
    elif image.dim() != 4:
        raise ValueError(f"image must be 2D, 3D or 4D, got {image.dim()}D")
    if field.dim() == 3:
        field = field[None]
    elif field.dim() != 4:
        raise ValueError(f"field must be (2,H,W) or (N,2,H,W), got {field.dim()}D")
    if field.shape[1] != 2:
        raise ValueError(f"field needs 2 channels (dy, dx), got {field.shape[1]}")
    if image.shape[-2:] != field.shape[-2:]:
        raise ValueError(f"image {tuple(image.shape[-2:])} and field {tuple(field.shape[-2:])} shapes differ")
    if field.shape[0] == 1 and image.shape[0] > 1:
        field = field.expand(image.shape[0], -1, -1, -1)
    return image, field, squeeze


def _base_grid(h: int, w: int, dtype, device) -> torch.Tensor:
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gy, gx], dim=0)  # (2, H, W)


def warp_image(image: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Resample ``image`` along ``field`` displacements (differentiable in both).

    Bilinear sampling is done by explicit gathers so that integer sample
    coordinates reproduce input pixels bit-exactly (the zero field is an
    exact identity).
    """
    image, field, squeeze = _as_batched(image, field)
    n, c, h, w = image.shape
    base = _base_grid(h, w, field.dtype, field.device)
    coords = base[None] + field  # (N, 2, H, W) absolute sample positions
    ys = coords[:, 0].clamp(0, h - 1)
    xs = coords[:, 1].clamp(0, w - 1)
    y0 = ys.floor().clamp(0, h - 2 if h > 1 else 0)
    x0 = xs.floor().clamp(0, w - 2 if w > 1 else 0)
    wy = (ys - y0).unsqueeze(1)
    wx = (xs - x0).unsqueeze(1)
    y0l = y0.long()
    x0l = x0.long()
    flat = image.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    y1l = (y0l + 1).clamp(max=h - 1)
    x1l = (x0l + 1).clamp(max=w - 1)
    top = gather(y0l, x0l) * (1 - wx) + gather(y0l, x1l) * wx
    bot = gather(y1l, x0l) * (1 - wx) + gather(y1l, x1l) * wx
    out = top * (1 - wy) + bot * wy
    if squeeze == 2:
        return out[0, 0]
    if squeeze == 1:
        return out[0]
    return out


def chain_warp(image: torch.Tensor, first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Two sequential resamplings; ``first`` is applied first, then ``second``."""
    return warp_image(warp_image(image, first), second)


def compose_fields(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Single field equivalent to warping by ``first`` then ``second``.

    c(p) = second(p) + first(p + second(p)), with the inner lookup bilinear.
    Exact for constant fields; used as a test utility, not in the training path.
    """
    return second + warp_image(first, second)


def spatial_gradient(field: torch.Tensor) -> torch.Tensor:
    """Forward finite differences of each displacement component along each axis.

    Returns shape (..., 2, 2, H, W) indexed [component, axis]; the trailing
    row/column difference is defined by replication (zero gradient there).
    """
    if field.dim() == 3:
        out = spatial_gradient(field[None])
        return out[0]
    if field.dim() != 4 or field.shape[1] != 2:
        raise ValueError(f"expected field of shape (N,2,H,W), got {tuple(field.shape)}")
    h, w = field.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError("spatial_gradient needs at least 2 pixels per axis")
    dy = torch.zeros_like(field)
    dx = torch.zeros_like(field)
    dy[..., :-1, :] = field[..., 1:, :] - field[..., :-1, :]
    dx[..., :, :-1] = field[..., :, 1:] - field[..., :, :-1]
    return torch.stack([dy, dx], dim=2)  # (N, 2 comp, 2 axis, H, W)


# ---------------------------------------------------------------------------
# field serialization: raw float32, dy plane then dx plane, with JSON sidecar


def save_field(field: torch.Tensor | np.ndarray, path: str | Path) -> None:
    path = Path(path)
    arr = field.detach().cpu().numpy() if isinstance(field, torch.Tensor) else np.asarray(field)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"expected field of shape (2,H,W), got {arr.shape}")
    arr.astype("<f4").tofile(path)
    sidecar = {"height": int(arr.shape[1]), "width": int(arr.shape[2])}
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def load_field(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    h, w = int(sidecar["height"]), int(sidecar["width"])
    return np.fromfile(path, dtype="<f4").reshape(2, h, w)
