"""Dataset construction: ingest labelled sources, slice into power-of-two
square tiles, balance categories, downscale, and the two perturbation
transforms used by the metric benchmark.

Tiles are always verbatim crops of their parent image; anything too small to
yield a tile is reported, never padded.
"""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import images
from .rng import stream

LITHOLOGIES = ("plutonic", "volcanic", "metamorphic", "sedimentary")
POLARIZATIONS = ("XPL", "PPL", "unknown")
TILE_SIZES = (32, 64, 128, 256, 512)
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


@dataclass
class SourceImage:
    path: str
    width: int
    height: int
    lithology: str
    polarization: str
    source: str

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DatasetError(f"{self.path}: non-positive dimensions")
        if self.lithology not in LITHOLOGIES:
            raise DatasetError(f"{self.path}: unknown lithology {self.lithology!r}")
        if self.polarization not in POLARIZATIONS:
            raise DatasetError(f"{self.path}: unknown polarization {self.polarization!r}")


@dataclass
class TileRecord:
    path: str
    source: str
    lithology: str
    polarization: str


@dataclass
class DatasetManifest:
    tile_size: int
    records: list[TileRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.tile_size not in TILE_SIZES:
            raise DatasetError(f"tile_size {self.tile_size} not in {TILE_SIZES}")

    def counts(self) -> dict[str, int]:
        out = {lith: 0 for lith in LITHOLOGIES}
        for rec in self.records:
            out[rec.lithology] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "tile_size": self.tile_size,
            "counts": self.counts(),
            "records": [vars(r).copy() for r in self.records],
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"manifest version {doc.get('version')} unsupported")
        return cls(tile_size=doc["tile_size"],
                   records=[TileRecord(**r) for r in doc["records"]])


@dataclass
class IngestReport:
    ingested: list[SourceImage] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (path, reason)


def ingest(directory, labels_path) -> IngestReport:
    """Scan a directory of PNG/JPEG files against a label sidecar.

    The sidecar is a JSON object mapping filename glob patterns to
    {lithology, polarization, source}; first matching pattern wins.
    Unreadable or unlabeled files end up in the skipped report.
    """
    directory = Path(directory)
    rules = json.loads(Path(labels_path).read_text())
    report = IngestReport()
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise EmptyDatasetError(f"no images found in {directory}")
    for path in paths:
        label = None
        for pattern, meta in rules.items():
            if fnmatch.fnmatch(path.name, pattern):
                label = meta
                break
        if label is None:
            report.skipped.append((str(path), "no label rule matches"))
            continue
        try:
            with Image.open(path) as im:
                width, height = im.size
        except Exception as exc:
            report.skipped.append((str(path), f"unreadable: {exc}"))
            continue
        try:
            report.ingested.append(SourceImage(
                path=str(path), width=width, height=height,
                lithology=label["lithology"],
                polarization=label.get("polarization", "unknown"),
                source=label.get("source", "unknown")))
        except (KeyError, DatasetError) as exc:
            report.skipped.append((str(path), f"bad label: {exc}"))
    return report


def tile_anchors(width: int, height: int, tile_size: int, strategy: str):
    """Top-left corners of the tiles a strategy yields, de-duplicated."""
    s = tile_size
    if min(width, height) < s:
        raise DatasetError(f"image {width}x{height} smaller than tile {s}")
    if strategy == "five_point":
        anchors = [
            (0, 0), (width - s, 0), (0, height - s), (width - s, height - s),
            ((width - s) // 2, (height - s) // 2),
        ]
        seen, out = set(), []
        for a in anchors:
            if a not in seen:
                seen.add(a)
                out.append(a)
        return out
    if strategy == "grid":
        return [(ix * s, iy * s)
                for iy in range(height // s) for ix in range(width // s)]
    raise DatasetError(f"unknown slicing strategy {strategy!r}")


def slice_image(pixels: np.ndarray, tile_size: int, strategy: str) -> list[np.ndarray]:
    """Cut tiles out of an HWC array; every tile is a verbatim crop."""
    h, w = pixels.shape[:2]
    return [pixels[y:y + tile_size, x:x + tile_size].copy()
            for x, y in tile_anchors(w, h, tile_size, strategy)]


@dataclass
class SliceReport:
    manifest: DatasetManifest
    skipped: list[tuple[str, str]] = field(default_factory=list)


def slice_sources(sources: list[SourceImage], tile_size: int, strategy: str,
                  out_dir) -> SliceReport:
    """Slice every source into tiles on disk and assemble a manifest.

    Output ordering is fixed by (source path, tile index) so parallel
    slicing cannot reorder the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(tile_size=tile_size)
    report = SliceReport(manifest=manifest)
    for src in sorted(sources, key=lambda s: s.path):
        if min(src.width, src.height) < tile_size:
            report.skipped.append((src.path, f"smaller than tile size {tile_size}"))
            continue
        pixels = images.load_image(src.path)
        stem = Path(src.path).stem
        for idx, tile in enumerate(slice_image(pixels, tile_size, strategy)):
            tile_path = out_dir / f"{stem}_t{idx:03d}.png"
            images.save_image(tile, tile_path)
            manifest.records.append(TileRecord(
                path=str(tile_path), source=src.path,
                lithology=src.lithology, polarization=src.polarization))
    return report


def balance(manifest: DatasetManifest, target: int, seed: int = 0,
            oversample: bool = False) -> DatasetManifest:
    """Seeded uniform per-category resampling to ``target`` records each.

    Downsamples by default; growing a category needs oversample=True.
    Re-running on its own output with the same seed is a no-op.
    """
    by_cat: dict[str, list[TileRecord]] = {lith: [] for lith in LITHOLOGIES}
    for rec in manifest.records:
        by_cat[rec.lithology].append(rec)
    out = DatasetManifest(tile_size=manifest.tile_size)
    for lith in LITHOLOGIES:
        recs = by_cat[lith]
        if not recs:
            raise DatasetError(f"category {lith!r} absent from manifest")
        recs = sorted(recs, key=lambda r: r.path)
        if len(recs) >= target:
            idx = stream(seed, "balance", lith).choice(len(recs), size=target,
                                                       replace=False)
            picked = [recs[i] for i in sorted(idx)]
        elif oversample:
            extra = stream(seed, "balance", lith).choice(
                len(recs), size=target - len(recs), replace=True)
            picked = recs + [recs[i] for i in sorted(extra)]
        else:
            raise DatasetError(
                f"category {lith!r} has {len(recs)} < target {target}; "
                "enable oversampling to grow it")
        out.records.extend(picked)
    return out


def downscale(manifest: DatasetManifest, new_size: int, out_dir) -> DatasetManifest:
    """Area-average every tile down to a smaller power-of-two size."""
    if new_size > manifest.tile_size:
        raise DatasetError(
            f"upscaling {manifest.tile_size} -> {new_size} is out of scope")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = DatasetManifest(tile_size=new_size)
    factor = manifest.tile_size // new_size
    for rec in manifest.records:
        pixels = images.load_image(rec.path)
        if factor > 1:
            h, w, c = pixels.shape
            pixels = pixels.reshape(new_size, factor, new_size, factor, c).mean(axis=(1, 3))
        dest = out_dir / Path(rec.path).name
        images.save_image(pixels, dest)
        out.records.append(TileRecord(path=str(dest), source=rec.source,
                                      lithology=rec.lithology,
                                      polarization=rec.polarization))
    return out


# ---------------------------------------------------------------------------
# perturbation transforms

@dataclass
class PerturbationSpec:
    kind: str  # "median_filter" | "salt_pepper"
    parameter: float
    seed: int = 0

    def __post_init__(self):
        if self.kind == "median_filter":
            k = int(self.parameter)
            if k < 1 or k % 2 == 0:
                raise DatasetError(f"median kernel must be odd and >= 1, got {self.parameter}")
        elif self.kind == "salt_pepper":
            if not 0.0 <= self.parameter <= 1.0:
                raise DatasetError(f"salt/pepper ratio must be in [0,1], got {self.parameter}")
        else:
            raise DatasetError(f"unknown perturbation kind {self.kind!r}")

    def apply(self, image: np.ndarray, index: int = 0) -> np.ndarray:
        """Perturb one image; ``index`` decorrelates noise across a set."""
        if self.kind == "median_filter":
            return median_filter(image, int(self.parameter))
        return salt_pepper(image, float(self.parameter),
                           seed=self.seed * 1_000_003 + index)


def median_filter(image: np.ndarray, kernel: int) -> np.ndarray:
    """Per-channel k x k median with edge-replicated padding."""
    if kernel % 2 == 0 or kernel < 1:
        raise DatasetError(f"median kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return image.copy()
    pad = kernel // 2
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(0, 1))
    return np.median(win, axis=(-2, -1)).astype(image.dtype)


def salt_pepper(image: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Replace each pixel with probability ``ratio`` by black or white."""
    if not 0.0 <= ratio <= 1.0:
        raise DatasetError(f"ratio must be in [0,1], got {ratio}")
    rng = stream(seed, "salt_pepper")
    h, w = image.shape[:2]
    hit = rng.random((h, w)) < ratio
    salt = rng.random((h, w)) < 0.5
    out = image.copy()
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out
