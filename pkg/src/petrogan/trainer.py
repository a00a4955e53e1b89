"""Adversarial training driven by a kimg budget.

One loop owner alternates discriminator and generator Adam steps; every
eval-cadence kimg it scores the generator against the training set, renders
a fixed-seed snapshot grid, and checkpoints. The returned model is the one
with the lowest logged distance. Losses are the non-saturating logistic pair
with an R1 gradient penalty on real batches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .dataset import DatasetManifest
from .fid import FeatureExtractor, GaussianStats, frechet_distance
from .gan import (AdaState, Discriminator, GanConfig, Generator, ada_update,
                  augment_batch, draw_transforms, latent_for_seed)
from .images import from_native, load_image, make_grid, save_image, to_native
from .optim import AdamState, adam_step
from .rng import stream

CKPT_MAGIC = b"PGAN"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, kimg: float, losses: dict):
        super().__init__(f"{message} at {kimg:.3f} kimg: {losses}")
        self.kimg = kimg
        self.losses = losses


# ---------------------------------------------------------------------------
# losses

def g_loss(fake_scores: Var) -> Var:
    """Non-saturating generator loss: mean softplus(-score on fakes)."""
    return ad.reduce_mean(ad.softplus(ad.neg(fake_scores)))


def d_loss(real_scores: Var, fake_scores: Var, real_images: Var | None = None,
           gamma: float = 0.0, tape: Tape | None = None,
           r1_trace: list | None = None) -> Var:
    """Discriminator loss with optional R1 penalty on the real batch.

    value = mean softplus(-real) + mean softplus(fake)
            + gamma/2 * mean ||d(score)/d(image)||^2.

    The penalty needs ``tape`` and ``real_images`` to measure the input
    gradient. With ``r1_trace`` (from Discriminator.forward) the penalty also
    carries its exact parameter gradient; without it the term is value-only.
    """
    loss = ad.add(ad.reduce_mean(ad.softplus(ad.neg(real_scores))),
                  ad.reduce_mean(ad.softplus(fake_scores)))
    if gamma and real_images is not None and tape is not None:
        n = real_images.value.shape[0]
        g_img = tape.gradient(ad.reduce_sum(real_scores), [real_images])[0]
        if r1_trace is not None:
            t: Var = Var(g_img)
            for fn in r1_trace:
                t = fn(t)
            s = ad.reduce_sum(t)  # value: sum of squared per-image gradients
            pen = ad.add(ad.mul(s, np.float32(gamma / n)),
                         Var(np.float32(-gamma / (2 * n) * float(s.value))))
        else:
            pen = Var(np.float32(gamma / (2 * n) *
                                 float((g_img.astype(np.float64) ** 2).sum())))
        loss = ad.add(loss, pen)
    return loss


def detect_convergence(fid_log, window: int = 5, min_improve: float = 0.5) -> bool:
    """True once the best of the last ``window`` scores stops beating the
    prior best by at least ``min_improve``."""
    vals = [v[1] if isinstance(v, (tuple, list)) else float(v) for v in fid_log]
    if len(vals) <= window:
        return False
    return (min(vals[:-window]) - min(vals[-window:])) < min_improve


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    gan_config: GanConfig
    g_params: dict[str, np.ndarray]
    d_params: dict[str, np.ndarray]
    w_avg: np.ndarray
    ada: AdaState
    kimg: float = 0.0
    fid_log: list = field(default_factory=list)
    best: tuple | None = None
    train_config: dict | None = None

    def build_generator(self) -> Generator:
        g = Generator(self.gan_config)
        g.params.load_state_dict(self.g_params)
        return g

    def build_discriminator(self) -> Discriminator:
        d = Discriminator(self.gan_config)
        d.params.load_state_dict(self.d_params)
        return d

    def save(self, path) -> None:
        blocks: list[tuple[str, np.ndarray]] = []
        for name, arr in self.g_params.items():
            blocks.append((f"g.{name}", arr))
        for name, arr in self.d_params.items():
            blocks.append((f"d.{name}", arr))
        blocks.append(("w_avg", self.w_avg))
        manifest, offset = [], 0
        for name, arr in blocks:
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += 4 * int(np.prod(arr.shape)) if arr.shape else 4
        header = json.dumps({
            "gan_config": self.gan_config.to_dict(),
            "ada": self.ada.to_dict(),
            "kimg": self.kimg,
            "fid_log": [[float(k), float(v)] for k, v in self.fid_log],
            "best": list(self.best) if self.best else None,
            "train_config": self.train_config,
            "params": manifest,
        }, sort_keys=True).encode("utf-8")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
            fh.write(header)
            for _, arr in blocks:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:4] != CKPT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
        if len(raw) < 12:
            raise CheckpointFormatError(f"{path}: truncated header")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(
                f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        try:
            header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
        data_start = 12 + hlen
        g_params, d_params, w_avg = {}, {}, None
        for entry in header["params"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = data_start + entry["offset"]
            if start + 4 * count > len(raw):
                raise CheckpointFormatError(f"{path}: truncated parameter block "
                                            f"{entry['name']}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
            arr = arr.reshape(entry["shape"]).copy()
            name = entry["name"]
            if name == "w_avg":
                w_avg = arr
            elif name.startswith("g."):
                g_params[name[2:]] = arr
            elif name.startswith("d."):
                d_params[name[2:]] = arr
        if w_avg is None:
            raise CheckpointFormatError(f"{path}: missing style average block")
        return cls(gan_config=GanConfig(**header["gan_config"]),
                   g_params=g_params, d_params=d_params, w_avg=w_avg,
                   ada=AdaState(**header["ada"]), kimg=header["kimg"],
                   fid_log=[tuple(e) for e in header["fid_log"]],
                   best=tuple(header["best"]) if header["best"] else None,
                   train_config=header.get("train_config"))


def snapshot_checkpoint(g: Generator, d: Discriminator, w_avg: np.ndarray,
                        ada: AdaState, kimg: float, fid_log, best,
                        train_config: dict | None) -> Checkpoint:
    return Checkpoint(gan_config=g.cfg, g_params=g.params.state_dict(),
                      d_params=d.params.state_dict(), w_avg=w_avg.copy(),
                      ada=AdaState(**ada.to_dict()), kimg=kimg,
                      fid_log=list(fid_log), best=best, train_config=train_config)


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    resolution: int = 32
    batch_size: int = 16
    g_lr: float = 2e-3
    d_lr: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    r1_gamma: float = 1.0
    kimg_budget: float = 200.0
    eval_cadence_kimg: float = 40.0
    fid_samples: int = 2000
    grid_rows: int = 3
    grid_cols: int = 3
    ada_enabled: bool = True
    seed: int = 0
    latent_dim: int = 64
    style_dim: int = 64
    mapping_layers: int = 8
    base_channels: int = 128
    stop_on_converged: bool = False
    convergence_window: int = 5
    convergence_delta: float = 0.5

    def __post_init__(self):
        if self.kimg_budget < 0:
            raise ValueError("kimg budget must be >= 0")
        if self.kimg_budget > 0 and self.eval_cadence_kimg > self.kimg_budget:
            raise ValueError("eval cadence must not exceed the kimg budget")

    def gan_config(self) -> GanConfig:
        return GanConfig(resolution=self.resolution, latent_dim=self.latent_dim,
                         style_dim=self.style_dim, mapping_layers=self.mapping_layers,
                         base_channels=self.base_channels)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainResult:
    checkpoint: Checkpoint          # lowest logged score
    final_checkpoint: Checkpoint
    fid_log: list
    grids: list                     # (kimg, HWC grid image)
    converged: bool = False


class _TileStore:
    """Training tiles as native NCHW float32, preloaded at desk scale."""

    def __init__(self, manifest: DatasetManifest):
        if not manifest.records:
            raise ValueError("manifest is empty")
        self.images = np.stack([
            to_native(load_image(rec.path)) for rec in manifest.records])

    def __len__(self):
        return self.images.shape[0]

    def batch(self, idx: np.ndarray) -> np.ndarray:
        return self.images[idx]


def sample_images(generator: Generator, n: int, seed: int = 0,
                  batch_size: int = 64):
    """Yield n generated [0,1] HWC images (plain styles, seeded noise)."""
    dz = generator.cfg.latent_dim
    done, bi = 0, 0
    while done < n:
        b = min(batch_size, n - done)
        z = stream(seed, "sample-z", bi).standard_normal((b, dz)).astype(np.float32)
        w = generator.map_latents(z, trainable=False)
        native = generator.synthesize_native(
            w, noise_seed=_noise_key(seed, bi), trainable=False)
        for img in from_native(native.value):
            yield img
        done += b
        bi += 1


def _noise_key(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) & 0x7FFFFFFF


def render_grid(generator: Generator, rows: int, cols: int,
                seeds=None) -> np.ndarray:
    """Contact sheet of fixed-seed renders (seeds 0..rows*cols-1 by default)."""
    if seeds is None:
        seeds = list(range(rows * cols))
    imgs = [generator.synthesize(
        generator.map_latents(latent_for_seed(s, generator.cfg.latent_dim)[None],
                              trainable=False).value[0], noise_seed=s)
        for s in seeds]
    return make_grid(imgs, rows, cols)


def train(config: TrainConfig, manifest: DatasetManifest,
          init: Checkpoint | None = None, out_dir=None,
          extractor: FeatureExtractor | None = None,
          log_fn=None) -> TrainResult:
    """Run the adversarial loop for the configured kimg budget."""
    if manifest.tile_size != config.resolution:
        raise ValueError(f"manifest tile size {manifest.tile_size} != "
                         f"configured resolution {config.resolution}")
    out_dir = Path(out_dir) if out_dir else None
    log = log_fn or (lambda msg: None)

    if init is not None:
        if init.gan_config.resolution != config.resolution:
            raise ValueError("checkpoint resolution does not match config")
        g = init.build_generator()
        d = init.build_discriminator()
        ada = AdaState(**init.ada.to_dict())
    else:
        gcfg = config.gan_config()
        g = Generator(gcfg, seed=config.seed)
        d = Discriminator(gcfg, seed=config.seed + 1)
        ada = AdaState()
    if not config.ada_enabled:
        ada.p = 0.0

    budget_images = int(round(config.kimg_budget * 1000))
    train_cfg_echo = config.to_dict()
    if budget_images == 0:
        w_avg = init.w_avg if init is not None else g.w_average(seed=config.seed)
        ck = snapshot_checkpoint(g, d, np.asarray(w_avg), ada, 0.0, [], None,
                                 train_cfg_echo)
        return TrainResult(checkpoint=ck, final_checkpoint=ck, fid_log=[], grids=[])

    tiles = _TileStore(manifest)
    extractor = extractor or FeatureExtractor.desk()
    real_feats = extractor.extract(
        from_native(tiles.images[i]) for i in range(len(tiles)))
    real_stats = GaussianStats.from_features(real_feats, extractor.identifier)

    g_names = list(g.params.vars)
    d_names = list(d.params.vars)
    g_opt = AdamState(learning_rate=config.g_lr, beta1=config.adam_beta1,
                      beta2=config.adam_beta2)
    d_opt = AdamState(learning_rate=config.d_lr, beta1=config.adam_beta1,
                      beta2=config.adam_beta2)

    rng_order = stream(config.seed, "batch-order")
    rng_aug = stream(config.seed, "augment-draws")
    images_seen = 0
    step = 0
    fid_log: list[tuple[float, float]] = []
    grids: list[tuple[float, np.ndarray]] = []
    best: tuple[float, float] | None = None
    best_ckpt: Checkpoint | None = None
    converged = False
    next_eval = 1
    order: np.ndarray = rng_order.permutation(len(tiles))
    cursor = 0

    def next_batch(n: int) -> np.ndarray:
        nonlocal order, cursor
        idx = []
        while len(idx) < n:
            if cursor >= len(order):
                order = rng_order.permutation(len(tiles))
                cursor = 0
            idx.append(order[cursor])
            cursor += 1
        return tiles.batch(np.array(idx))

    while images_seen < budget_images:
        b = min(config.batch_size, budget_images - images_seen)
        reals = next_batch(b)

        # discriminator step
        t_real = draw_transforms(b, ada.p, config.resolution, rng_aug)
        t_fake = draw_transforms(b, ada.p, config.resolution, rng_aug)
        reals_aug = augment_batch(Var(reals), t_real).value
        z = stream(config.seed, "d-z", step).standard_normal(
            (b, g.cfg.latent_dim)).astype(np.float32)
        fake = g.synthesize_native(g.map_latents(z, trainable=False),
                                   noise_seed=_noise_key(config.seed, step),
                                   trainable=False).value
        fake_aug = augment_batch(Var(fake), t_fake).value
        with Tape() as tape:
            x_in = ad.leaf(reals_aug, track=True)
            real_scores, trace = d.forward(x_in, want_trace=config.r1_gamma > 0)
            fake_scores, _ = d.forward(Var(fake_aug))
            loss_d = d_loss(real_scores, fake_scores, x_in, config.r1_gamma,
                            tape, trace)
            d_grads = tape.gradient(loss_d, [d.params.vars[n] for n in d_names])
        adam_step(d_opt, d.params.vars, dict(zip(d_names, d_grads)))
        if config.ada_enabled:
            ada_update(ada, real_scores.value)

        # generator step
        t_g = draw_transforms(b, ada.p, config.resolution, rng_aug)
        z = stream(config.seed, "g-z", step).standard_normal(
            (b, g.cfg.latent_dim)).astype(np.float32)
        with Tape() as tape:
            w = g.map_latents(z, trainable=True)
            fake = g.synthesize_native(w, noise_seed=_noise_key(config.seed + 1, step),
                                       trainable=True)
            scores, _ = d.forward(augment_batch(fake, t_g), trainable=False)
            loss_g = g_loss(scores)
            g_grads = tape.gradient(loss_g, [g.params.vars[n] for n in g_names])
        adam_step(g_opt, g.params.vars, dict(zip(g_names, g_grads)))

        if not (np.isfinite(loss_d.value) and np.isfinite(loss_g.value)):
            raise TrainingDivergedError(
                "non-finite loss", images_seen / 1000,
                {"d_loss": float(loss_d.value), "g_loss": float(loss_g.value)})

        images_seen += b
        step += 1

        while (config.eval_cadence_kimg > 0
               and images_seen >= round(next_eval * config.eval_cadence_kimg * 1000)
               and round(next_eval * config.eval_cadence_kimg * 1000) <= budget_images):
            at_kimg = next_eval * config.eval_cadence_kimg
            report = frechet_distance(real_stats, GaussianStats.from_features(
                extractor.extract(sample_images(g, config.fid_samples,
                                                seed=config.seed + next_eval)),
                extractor.identifier))
            fid_log.append((at_kimg, report.value))
            grid = render_grid(g, config.grid_rows, config.grid_cols)
            grids.append((at_kimg, grid))
            w_avg = g.w_average(seed=config.seed)
            if best is None or report.value < best[1]:
                best = (at_kimg, report.value)
                best_ckpt = snapshot_checkpoint(g, d, w_avg, ada, at_kimg,
                                                fid_log, best, train_cfg_echo)
            if out_dir:
                save_image(grid, out_dir / "snapshots" / f"grid_{at_kimg:08.1f}.png")
                snapshot_checkpoint(g, d, w_avg, ada, at_kimg, fid_log, best,
                                    train_cfg_echo).save(
                    out_dir / f"ckpt_{at_kimg:08.1f}.bin")
                _write_fid_csv(out_dir / "fid_log.csv", fid_log)
            log(f"kimg {at_kimg:g}: fid {report.value:.3f} (ada p={ada.p:.3f})")
            next_eval += 1
            if config.stop_on_converged and detect_convergence(
                    fid_log, config.convergence_window, config.convergence_delta):
                converged = True
                break
        if converged:
            break

    w_avg = g.w_average(seed=config.seed)
    final = snapshot_checkpoint(g, d, w_avg, ada, images_seen / 1000,
                                fid_log, best, train_cfg_echo)
    if best_ckpt is None:
        best_ckpt = final
    if out_dir:
        final.save(out_dir / "ckpt_final.bin")
        best_ckpt.save(out_dir / "ckpt_best.bin")
        _write_fid_csv(out_dir / "fid_log.csv", fid_log)
    return TrainResult(checkpoint=best_ckpt, final_checkpoint=final,
                       fid_log=fid_log, grids=grids, converged=converged)


def _write_fid_csv(path, fid_log) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = ["kimg,fid"] + [f"{k:g},{v:.6f}" for k, v in fid_log]
    Path(path).write_text("\n".join(lines) + "\n")
