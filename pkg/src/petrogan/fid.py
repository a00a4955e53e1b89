"""Fréchet distance between Gaussian summaries of feature-embedded image sets.

The bundled extractor is a fixed, seed-keyed strided convolutional network:
its weights never train, so distances are reproducible everywhere, but they
are only comparable between reports carrying the same extractor id. Feature
accumulation and all matrix work run in float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .dataset import DatasetManifest, PerturbationSpec
from .images import load_image, to_native
from .linalg import SymMatrix, sqrtm_psd
from .rng import stream

DESK_EXTRACTOR_ID = "deskconv4-f192-seed42"
_DESK_CHANNELS = (3, 24, 48, 96, 192)
_DESK_SEED = 42

STATS_MAGIC = b"PFST"
STATS_VERSION = 1
WEIGHTS_MAGIC = b"PEXT"
WEIGHTS_VERSION = 1


class ExtractorMismatchError(ValueError):
    """Two Gaussian summaries come from different feature extractors."""


class InsufficientSamplesError(ValueError):
    pass


class StatsFormatError(ValueError):
    pass


class FeatureExtractor:
    """Deterministic map from [0,1] HWC images to F-dimensional features.

    Four 3x3 stride-2 convolutions with leaky-rectifier activations and a
    global average pool. Weights come either from the fixed seed (desk
    extractor) or from an external weight file.
    """

    def __init__(self, identifier: str, kernels: list[np.ndarray]):
        self.identifier = identifier
        self.kernels = [np.asarray(k, dtype=np.float32) for k in kernels]
        self.dim = self.kernels[-1].shape[0]

    @classmethod
    def desk(cls) -> "FeatureExtractor":
        rng = stream(_DESK_SEED, "desk-extractor")
        kernels = []
        for cin, cout in zip(_DESK_CHANNELS[:-1], _DESK_CHANNELS[1:]):
            std = np.sqrt(2.0 / (cin * 9))
            kernels.append(rng.standard_normal((cout, cin, 3, 3)) * std)
        return cls(DESK_EXTRACTOR_ID, kernels)

    # weight file: magic, u32 version, u32 header length, JSON header
    # {"identifier", "shapes"}, then raw little-endian float32 kernel blocks.
    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        raw = Path(path).read_bytes()
        if raw[:4] != WEIGHTS_MAGIC:
            raise StatsFormatError(f"{path}: not an extractor weight file")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != WEIGHTS_VERSION:
            raise StatsFormatError(f"{path}: weight format version {version} unsupported")
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        offset = 12 + hlen
        kernels = []
        for shape in header["shapes"]:
            count = int(np.prod(shape))
            block = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            kernels.append(block.reshape(shape).copy())
            offset += 4 * count
        return cls(header["identifier"], kernels)

    def save(self, path) -> None:
        header = json.dumps({
            "identifier": self.identifier,
            "shapes": [list(k.shape) for k in self.kernels],
        }, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(WEIGHTS_MAGIC)
            fh.write(struct.pack("<II", WEIGHTS_VERSION, len(header)))
            fh.write(header)
            for k in self.kernels:
                fh.write(k.astype("<f4").tobytes())

    def forward_var(self, x: Var) -> Var:
        """Feature map on a native NCHW Var batch (differentiable)."""
        for k in self.kernels:
            x = ad.leaky_relu(ad.conv2d(x, Var(k), stride=2), 0.2)
        return ad.reduce_mean(x, axis=(2, 3))

    def extract(self, images, batch_size: int = 64) -> np.ndarray:
        """Features for an iterable of [0,1] HWC images, shape (N, F) float64."""
        feats, batch = [], []

        def flush():
            if not batch:
                return
            native = np.stack([to_native(im) for im in batch])
            feats.append(self.forward_var(Var(native)).value.astype(np.float64))
            batch.clear()

        for im in images:
            batch.append(im)
            if len(batch) == batch_size:
                flush()
        flush()
        if not feats:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.concatenate(feats, axis=0)


@dataclass
class GaussianStats:
    """Mean / covariance / count summary of a feature-embedded image set."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int
    extractor_id: str

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = SymMatrix(self.sigma).entries
        if self.n < 2:
            raise InsufficientSamplesError(f"need at least 2 samples, got {self.n}")

    @classmethod
    def from_features(cls, feats: np.ndarray, extractor_id: str) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] < 2:
            raise InsufficientSamplesError(
                f"need at least 2 samples, got {feats.shape[0]}")
        mu = feats.mean(axis=0)
        centered = feats - mu
        sigma = centered.T @ centered / (feats.shape[0] - 1)
        return cls(mu=mu, sigma=sigma, n=feats.shape[0], extractor_id=extractor_id)

    def merge(self, other: "GaussianStats") -> "GaussianStats":
        """Pooled summary equal to computing stats over the union of samples."""
        if other.extractor_id != self.extractor_id:
            raise ExtractorMismatchError(
                f"cannot merge {self.extractor_id} with {other.extractor_id}")
        na, nb = self.n, other.n
        n = na + nb
        mu = (na * self.mu + nb * other.mu) / n
        d = self.mu - other.mu
        sigma = ((na - 1) * self.sigma + (nb - 1) * other.sigma
                 + (na * nb / n) * np.outer(d, d)) / (n - 1)
        return GaussianStats(mu=mu, sigma=sigma, n=n, extractor_id=self.extractor_id)

    # -- binary cache -------------------------------------------------------

    def save(self, path) -> None:
        mu = self.mu.astype("<f8").tobytes()
        sigma = self.sigma.astype("<f8").tobytes()
        header = json.dumps({
            "extractor_id": self.extractor_id,
            "dim": int(self.mu.shape[0]),
            "n": int(self.n),
            "crc32": zlib.crc32(mu + sigma),
        }, sort_keys=True).encode("utf-8")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(STATS_MAGIC)
            fh.write(struct.pack("<II", STATS_VERSION, len(header)))
            fh.write(header)
            fh.write(mu)
            fh.write(sigma)

    @classmethod
    def load(cls, path) -> "GaussianStats":
        raw = Path(path).read_bytes()
        if raw[:4] != STATS_MAGIC:
            raise StatsFormatError(f"{path}: not a stats cache file")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != STATS_VERSION:
            raise StatsFormatError(f"{path}: stats version {version} unsupported")
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        f = header["dim"]
        offset = 12 + hlen
        mu = np.frombuffer(raw, dtype="<f8", count=f, offset=offset).copy()
        sigma = np.frombuffer(raw, dtype="<f8", count=f * f,
                              offset=offset + 8 * f).reshape(f, f).copy()
        if zlib.crc32(mu.astype("<f8").tobytes() + sigma.astype("<f8").tobytes()) \
                != header["crc32"]:
            raise StatsFormatError(f"{path}: checksum mismatch")
        return cls(mu=mu, sigma=sigma, n=header["n"],
                   extractor_id=header["extractor_id"])


@dataclass
class FidReport:
    value: float
    mean_term: float
    trace_term: float
    extractor_id_a: str
    extractor_id_b: str
    n_a: int
    n_b: int
    clamp: float = 0.0  # magnitude removed from a slightly negative trace term


def frechet_distance(a: GaussianStats, b: GaussianStats) -> FidReport:
    """Squared Fréchet distance between two Gaussian summaries.

    The cross term uses the PSD square root of sqrt(Sa) @ Sb @ sqrt(Sa),
    which is symmetric by construction; tiny negative totals from rounding
    are clamped to zero and recorded.
    """
    if a.extractor_id != b.extractor_id:
        raise ExtractorMismatchError(
            f"stats built by {a.extractor_id!r} vs {b.extractor_id!r}")
    if a.mu.shape != b.mu.shape:
        raise ExtractorMismatchError(
            f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    mean_term = float(diff @ diff)
    root_a = sqrtm_psd(SymMatrix(a.sigma))
    inner = root_a @ b.sigma @ root_a
    cross = sqrtm_psd(SymMatrix((inner + inner.T) / 2.0))
    trace_term = float(np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    clamp = 0.0
    if trace_term < 0.0:
        clamp = -trace_term
        trace_term = 0.0
    return FidReport(value=mean_term + trace_term, mean_term=mean_term,
                     trace_term=trace_term, extractor_id_a=a.extractor_id,
                     extractor_id_b=b.extractor_id, n_a=a.n, n_b=b.n, clamp=clamp)


# ---------------------------------------------------------------------------
# image collection and the end-to-end pipeline

def iter_images(source):
    """Yield [0,1] HWC arrays from a directory, manifest, or array collection."""
    if isinstance(source, DatasetManifest):
        for rec in source.records:
            yield load_image(rec.path)
        return
    if isinstance(source, (str, Path)):
        paths = sorted(p for p in Path(source).iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        for p in paths:
            yield load_image(p)
        return
    for im in source:
        yield np.asarray(im, dtype=np.float32)


def source_fingerprint(source) -> str | None:
    """Content hash for cacheable sources (directories and manifests)."""
    if isinstance(source, DatasetManifest):
        paths = [Path(r.path) for r in source.records]
    elif isinstance(source, (str, Path)):
        paths = sorted(p for p in Path(source).iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    else:
        return None
    h = hashlib.blake2s()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def extract_stats(source, extractor: FeatureExtractor,
                  limit: int | None = None) -> GaussianStats:
    feats = []
    count = 0
    for im in iter_images(source):
        feats.append(im)
        count += 1
        if limit is not None and count >= limit:
            break
    return GaussianStats.from_features(extractor.extract(feats),
                                       extractor.identifier)


def cached_stats(source, extractor: FeatureExtractor, cache_dir,
                 limit: int | None = None) -> GaussianStats:
    """Stats for a source, memoised on disk by (content hash, extractor id)."""
    fp = source_fingerprint(source)
    if fp is None or cache_dir is None:
        return extract_stats(source, extractor, limit)
    key = hashlib.blake2s(
        f"{fp}:{extractor.identifier}:{limit}".encode()).hexdigest()[:24]
    path = Path(cache_dir) / f"stats_{key}.bin"
    if path.exists():
        try:
            stats = GaussianStats.load(path)
            if stats.extractor_id == extractor.identifier:
                return stats
            warnings.warn(f"stats cache {path} was built by {stats.extractor_id}; "
                          "recomputing")
        except StatsFormatError as exc:
            warnings.warn(f"stats cache unreadable ({exc}); recomputing")
    stats = extract_stats(source, extractor, limit)
    stats.save(path)
    return stats


def fid(real_source, fake_source, extractor: FeatureExtractor | None = None,
        n_samples: int | None = None, cache_dir=None) -> FidReport:
    """Fréchet distance between a real image source and a generated one.

    ``fake_source`` is a directory, manifest, image collection, or a callable
    sampler(n) yielding images (used when scoring a model checkpoint).
    """
    extractor = extractor or FeatureExtractor.desk()
    real = cached_stats(real_source, extractor, cache_dir)
    if callable(fake_source):
        if n_samples is None:
            raise ValueError("n_samples is required when sampling from a model")
        fake = GaussianStats.from_features(
            extractor.extract(fake_source(n_samples)), extractor.identifier)
    else:
        fake = extract_stats(fake_source, extractor, n_samples)
    return frechet_distance(real, fake)


@dataclass
class PerturbationResult:
    parameter: float
    fid: float


@dataclass
class PerturbationReport:
    kind: str
    rungs: list[PerturbationResult]
    non_monotonic: list[int]  # indices i where rung i ranks below rung i-1

    def is_monotonic(self) -> bool:
        return not self.non_monotonic


def perturbation_benchmark(source, ladder: list[PerturbationSpec],
                           extractor: FeatureExtractor | None = None,
                           cache_dir=None) -> PerturbationReport:
    """Score progressively stronger corruptions of a set against the originals."""
    if not ladder:
        raise ValueError("ladder must contain at least one perturbation")
    params = [spec.parameter for spec in ladder]
    if any(b <= a for a, b in zip(params, params[1:])):
        raise ValueError("ladder parameters must strictly increase in severity")
    extractor = extractor or FeatureExtractor.desk()
    originals = list(iter_images(source))
    base = cached_stats(source, extractor, cache_dir) if cache_dir else \
        GaussianStats.from_features(extractor.extract(originals), extractor.identifier)
    rungs = []
    for spec in ladder:
        perturbed = (spec.apply(im, index=i) for i, im in enumerate(originals))
        stats = GaussianStats.from_features(extractor.extract(perturbed),
                                            extractor.identifier)
        rungs.append(PerturbationResult(parameter=spec.parameter,
                                        fid=frechet_distance(base, stats).value))
    bad = [i for i in range(1, len(rungs)) if rungs[i].fid < rungs[i - 1].fid]
    return PerturbationReport(kind=ladder[0].kind, rungs=rungs, non_monotonic=bad)
