"""Domain image types, dataset manifests, normalization and foreground masking.

Images are single-channel float32 grids normalized to [-1, 1]. Two on-disk
pixel formats are accepted, auto-detected by extension:

* ``.png``  -- single-channel 16-bit PNG, linear mapping [-1, 1] -> [0, 65535]
* ``.raw``  -- flat row-major float32 binary with a ``.json`` sidecar giving
  ``{"height": H, "width": W}`` (lossless round-trips for tests)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MIN_SIDE = 8
DEFAULT_BACKGROUND_LEVEL = -1.0
DEFAULT_BACKGROUND_TOL = 1e-3


class DatasetError(Exception):
    """Raised when a manifest or its referenced files fail validation."""


@dataclass(frozen=True)
class Image2D:
    """Single-channel intensity grid with values nominally in [-1, 1].

    ``intensity_scale`` records the physical-unit interval mapped onto
    [-1, 1] at load time so metrics can report in physical units.
    """

    values: np.ndarray
    intensity_scale: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"expected a 2D grid, got shape {v.shape}")
        if v.shape[0] < MIN_SIDE or v.shape[1] < MIN_SIDE:
            raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def normalize(raw: np.ndarray, lo_phys: float, hi_phys: float) -> Image2D:
    """Affine map lo_phys -> -1, hi_phys -> +1, clamping values outside the range."""
    if hi_phys <= lo_phys:
        raise ValueError(f"hi_phys must exceed lo_phys, got [{lo_phys}, {hi_phys}]")
    raw = np.asarray(raw, dtype=np.float32)
    scaled = 2.0 * (raw - lo_phys) / (hi_phys - lo_phys) - 1.0
    return Image2D(np.clip(scaled, -1.0, 1.0), intensity_scale=(float(lo_phys), float(hi_phys)))


def denormalize(image: Image2D) -> np.ndarray:
    """Map normalized values back to physical units via ``intensity_scale``."""
    lo, hi = image.intensity_scale
    return (image.values + 1.0) * 0.5 * (hi - lo) + lo


def foreground_mask(
    reference: Image2D,
    background_level: float = DEFAULT_BACKGROUND_LEVEL,
    tolerance: float = DEFAULT_BACKGROUND_TOL,
) -> np.ndarray:
    """Boolean mask of pixels whose reference intensity differs from background.

    Computed on the reference/ground-truth image only, so every method is
    scored on the same pixel set.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    return np.abs(reference.values - background_level) > tolerance


# ---------------------------------------------------------------------------
# pixel I/O


def save_image(image: Image2D, path: str | Path) -> None:
    path = Path(path)
    if path.suffix == ".png":
        quant = np.round((image.values + 1.0) * 0.5 * 65535.0).astype(np.uint16)
        PILImage.fromarray(quant).save(path)
    elif path.suffix == ".raw":
        image.values.astype("<f4").tofile(path)
        sidecar = {"height": image.height, "width": image.width}
        path.with_suffix(".json").write_text(json.dumps(sidecar))
    else:
        raise ValueError(f"unsupported image extension: {path.suffix}")


def load_image(path: str | Path, intensity_scale: tuple[float, float] = (-1.0, 1.0)) -> Image2D:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"image file not found: {path}")
    if path.suffix == ".png":
        arr = np.asarray(PILImage.open(path), dtype=np.float32)
        values = arr / 65535.0 * 2.0 - 1.0
    elif path.suffix == ".raw":
        sidecar = json.loads(path.with_suffix(".json").read_text())
        h, w = int(sidecar["height"]), int(sidecar["width"])
        values = np.fromfile(path, dtype="<f4").reshape(h, w)
    else:
        raise ValueError(f"unsupported image extension: {path.suffix}")
    return Image2D(values, intensity_scale=intensity_scale)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class PairedSample:
    """In-memory pair: source modality, (possibly misaligned) target, and the
    aligned ground-truth target when it exists (simulated/evaluation data only)."""

    source: Image2D
    target: Image2D
    sample_id: str
    aligned_target: Image2D | None = None

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ValueError(
                f"sample {self.sample_id}: source {self.source.shape} and "
                f"target {self.target.shape} shapes differ"
            )
        if self.aligned_target is not None and self.aligned_target.shape != self.source.shape:
            raise ValueError(f"sample {self.sample_id}: aligned_target shape mismatch")


@dataclass(frozen=True)
class PairRecord:
    sample_id: str
    source_path: Path
    target_path: Path
    aligned_target_path: Path | None = None


@dataclass
class DatasetManifest:
    """Validated index of paired samples (paths, not pixels)."""

    pairs: list[PairRecord]
    modality_names: tuple[str, str]
    split: str = "train"
    normalization: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.pairs)

    def _scale(self, modality: str) -> tuple[float, float]:
        lo, hi = self.normalization.get(modality, (-1.0, 1.0))
        return float(lo), float(hi)

    def load_pair(self, record: PairRecord) -> PairedSample:
        src = load_image(record.source_path, self._scale(self.modality_names[0]))
        tgt = load_image(record.target_path, self._scale(self.modality_names[1]))
        aligned = None
        if record.aligned_target_path is not None:
            aligned = load_image(record.aligned_target_path, self._scale(self.modality_names[1]))
        try:
            return PairedSample(src, tgt, record.sample_id, aligned_target=aligned)
        except ValueError as exc:
            raise DatasetError(str(exc)) from exc

    def validate_pixels(self) -> None:
        """Eagerly load every pair to check files decode with matching shapes."""
        for rec in self.pairs:
            self.load_pair(rec)


def load_dataset(manifest_path: str | Path) -> DatasetManifest:
    """Parse and validate a ``manifest.json``; pixel loading stays lazy."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    data = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    modalities = tuple(data["modalities"])
    records = []
    seen = set()
    for entry in data["pairs"]:
        sid = entry["id"]
        if sid in seen:
            raise DatasetError(f"duplicate sample_id in manifest: {sid}")
        seen.add(sid)
        src = root / entry["source"]
        tgt = root / entry["target"]
        aligned = entry.get("aligned_target")
        for p in (src, tgt):
            if not p.exists():
                raise DatasetError(f"missing file for sample {sid}: {p}")
        aligned_path = None
        if aligned is not None:
            aligned_path = root / aligned
            if not aligned_path.exists():
                raise DatasetError(f"missing file for sample {sid}: {aligned_path}")
        records.append(PairRecord(sid, src, tgt, aligned_path))
    return DatasetManifest(
        pairs=records,
        modality_names=modalities,  # type: ignore[arg-type]
        split=data.get("split", "train"),
        normalization={k: tuple(v) for k, v in data.get("normalization", {}).items()},
        root=root,
    )


def write_manifest(
    manifest_path: str | Path,
    pairs: list[dict],
    modality_names: tuple[str, str],
    split: str = "train",
    normalization: dict | None = None,
) -> Path:
    """Write a manifest.json. ``pairs`` entries hold paths relative to the manifest."""
    manifest_path = Path(manifest_path)
    payload = {
        "modalities": list(modality_names),
        "split": split,
        "normalization": {k: list(v) for k, v in (normalization or {}).items()},
        "pairs": pairs,
    }
    manifest_path.write_text(json.dumps(payload, indent=2))
    return manifest_path
