"""Shared fixtures: procedural texture corpora and small trained models."""

from __future__ import annotations

import numpy as np
import pytest

from petrogan.rng import stream


def texture_image(seed: int, size: int = 32) -> np.ndarray:
    """Colored multi-grating texture with fine speckle, [0,1] HWC float32.

    The speckle matters: it gives the metric something to lose under median
    filtering, the way thin-section micrographs lose crystal detail.
    """
    rng = stream(seed, "texture")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.tile(rng.random(3) * 0.4 + 0.3, (size, size, 1))
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 7.0)
        phase = rng.uniform(0, 2 * np.pi)
        color = (rng.random(3) - 0.5) * rng.uniform(0.2, 0.6)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                      + phase)
        img = img + wave[:, :, None] * color[None, None, :]
    img = img + rng.normal(0.0, 0.06, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def noise_image(seed: int, size: int = 32) -> np.ndarray:
    return stream(seed, "uniform-noise").random((size, size, 3)).astype(np.float32)


def texture_set(n: int, size: int = 32, seed_base: int = 0) -> list[np.ndarray]:
    return [texture_image(seed_base + i, size) for i in range(n)]


@pytest.fixture(scope="session")
def texture_dir_200(tmp_path_factory):
    """Fixed 200-image texture corpus on disk (64x64)."""
    from petrogan.images import save_image
    root = tmp_path_factory.mktemp("corpus200")
    for i in range(200):
        save_image(texture_image(i, 64), root / f"tex_{i:04d}.png")
    return root


@pytest.fixture(scope="session")
def tiny_manifest_32(tmp_path_factory):
    """Small on-disk tile manifest (48 tiles at 32x32) for fast loop tests."""
    from petrogan.dataset import DatasetManifest, TileRecord
    from petrogan.images import save_image
    root = tmp_path_factory.mktemp("tiles32")
    manifest = DatasetManifest(tile_size=32)
    liths = ("plutonic", "volcanic", "metamorphic", "sedimentary")
    for i in range(48):
        path = root / f"tile_{i:03d}.png"
        save_image(texture_image(500 + i, 32), path)
        manifest.records.append(TileRecord(path=str(path), source="synthetic",
                                           lithology=liths[i % 4],
                                           polarization="XPL"))
    return manifest


@pytest.fixture(scope="session")
def small_generator():
    """Tiny random-init generator + style average, shared across tests."""
    from petrogan.gan import GanConfig, Generator
    cfg = GanConfig(resolution=32, latent_dim=32, style_dim=32,
                    mapping_layers=3, base_channels=64, max_channels=64)
    g = Generator(cfg, seed=11)
    return g, g.w_average(n=4000, seed=11)


@pytest.fixture(scope="session")
def small_checkpoint(small_generator, tmp_path_factory):
    from petrogan.gan import AdaState, Discriminator
    from petrogan.trainer import Checkpoint
    g, w_avg = small_generator
    d = Discriminator(g.cfg, seed=12)
    ck = Checkpoint(gan_config=g.cfg, g_params=g.params.state_dict(),
                    d_params=d.params.state_dict(), w_avg=w_avg,
                    ada=AdaState())
    path = tmp_path_factory.mktemp("ckpt") / "small.bin"
    ck.save(path)
    return path
