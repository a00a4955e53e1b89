"""Style-space tools: truncation, interpolation, mixing, image-to-latent
projection, and closed-form factorization of the style-affine weights into
steerable directions.

Everything operates on an immutable generator snapshot and is pure given its
inputs, so concurrent use is safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .fid import FeatureExtractor
from .gan import Generator, latent_for_seed
from .images import from_native
from .linalg import jacobi_eigh
from .optim import AdamState, adam_step


# ---------------------------------------------------------------------------
# truncation / interpolation / mixing

@dataclass
class TruncationParams:
    psi: float
    w_avg: np.ndarray
    cutoff: int | None = None  # slots < cutoff are truncated; None = all


def truncate(w, params: TruncationParams):
    """Pull styles toward the average: w' = w_avg + psi * (w - w_avg).

    Accepts a single vector or a per-layer list; with a cutoff, list entries
    at slots >= cutoff pass through untouched.
    """
    w_avg = np.asarray(params.w_avg, dtype=np.float32)

    def _one(vec):
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape[-1] != w_avg.shape[-1]:
            raise ValueError(f"style dim {vec.shape[-1]} != average dim {w_avg.shape[-1]}")
        if params.psi == 1.0:
            return vec.copy()
        return w_avg + np.float32(params.psi) * (vec - w_avg)

    if isinstance(w, (list, tuple)):
        cut = len(w) if params.cutoff is None else params.cutoff
        return [(_one(v) if i < cut else np.asarray(v, dtype=np.float32).copy())
                for i, v in enumerate(w)]
    return _one(w)


def interpolate(w1, w2, t: float) -> np.ndarray:
    """Straight-line blend in style space; t=0 gives w1, t=1 gives w2."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation position must be in [0,1], got {t}")
    w1 = np.asarray(w1, dtype=np.float32)
    w2 = np.asarray(w2, dtype=np.float32)
    if t == 0.0:
        return w1.copy()
    if t == 1.0:
        return w2.copy()
    return (1.0 - np.float32(t)) * w1 + np.float32(t) * w2


def style_mix(w_a, w_b, crossover: int, num_slots: int) -> list[np.ndarray]:
    """Per-layer styles taking w_a below the crossover slot and w_b from it on."""
    if not 0 <= crossover <= num_slots:
        raise ValueError(f"crossover must be in [0, {num_slots}], got {crossover}")
    w_a = np.asarray(w_a, dtype=np.float32)
    w_b = np.asarray(w_b, dtype=np.float32)
    return [w_a.copy() if i < crossover else w_b.copy() for i in range(num_slots)]


# ---------------------------------------------------------------------------
# closed-form factorization of style-affine weights

@dataclass
class SefaBasis:
    layer_range: tuple[int, int]
    directions: np.ndarray   # (k, style_dim), rows orthonormal
    eigenvalues: np.ndarray  # (k,), non-increasing

    def to_dict(self) -> dict:
        return {"layer_range": list(self.layer_range),
                "eigenvalues": self.eigenvalues.tolist(),
                "directions": self.directions.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SefaBasis":
        doc = json.loads(Path(path).read_text())
        return cls(layer_range=tuple(doc["layer_range"]),
                   directions=np.asarray(doc["directions"], dtype=np.float64),
                   eigenvalues=np.asarray(doc["eigenvalues"], dtype=np.float64))


def sefa(generator: Generator, k: int, layer_range: tuple[int, int] | None = None) -> SefaBasis:
    """Top-k right singular directions of the stacked style-affine maps.

    Layers are stacked row-wise after scaling each map to unit Frobenius norm
    (so wide layers do not dominate by size alone); the reported magnitude of
    a direction is its raw (unnormalized) amplification, and directions are
    ordered by it. Entirely closed-form: no latent samples are involved.
    """
    if k > generator.cfg.style_dim:
        raise ValueError(f"k={k} exceeds style dim {generator.cfg.style_dim}")
    mats = generator.affine_weights()  # (style_dim, channels) each
    lo, hi = layer_range if layer_range is not None else (0, len(mats))
    if not 0 <= lo < hi <= len(mats):
        raise ValueError(f"empty or invalid layer range ({lo}, {hi})")
    picked = [m.T for m in mats[lo:hi]]  # rows live in style space
    raw = np.concatenate(picked, axis=0)
    normed = np.concatenate(
        [m / max(np.linalg.norm(m), 1e-30) for m in picked], axis=0)
    evals, evecs = jacobi_eigh(normed.T @ normed)
    order = np.argsort(evals, kind="stable")[::-1][:k]
    dirs = evecs[:, order].T.copy()
    for row in dirs:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    mags = np.linalg.norm(raw @ dirs.T, axis=0)
    rank = np.argsort(-mags, kind="stable")
    return SefaBasis(layer_range=(lo, hi), directions=dirs[rank],
                     eigenvalues=mags[rank])


def apply_direction(w, basis: SefaBasis, index: int, alpha: float) -> np.ndarray:
    """Displace a style vector along one extracted direction."""
    if not 0 <= index < basis.directions.shape[0]:
        raise IndexError(f"direction index {index} out of range "
                         f"0..{basis.directions.shape[0] - 1}")
    w = np.asarray(w, dtype=np.float32)
    return w + np.float32(alpha) * basis.directions[index].astype(np.float32)


# ---------------------------------------------------------------------------
# image-to-latent projection

@dataclass
class ProjectionConfig:
    steps: int = 1000
    learning_rate: float = 0.01
    space: str = "w"            # "w" or "w+"
    pixel_weight: float = 1.0
    feature_weight: float = 0.0
    noise_seed: int = 0
    max_halvings: int = 8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("step count must be >= 0")
        if self.space not in ("w", "w+"):
            raise ValueError(f"optimization space must be 'w' or 'w+', got {self.space}")


@dataclass
class ProjectionResult:
    w: np.ndarray | list[np.ndarray]
    reconstruction: np.ndarray       # [0,1] HWC
    loss_trace: list[float]


def project(image: np.ndarray, generator: Generator, w_avg: np.ndarray,
            config: ProjectionConfig | None = None,
            extractor: FeatureExtractor | None = None) -> ProjectionResult:
    """Search style space for the vector whose rendering matches the image.

    Adam proposes each step; a step is only accepted if it does not increase
    the loss, halving its length up to max_halvings times first, so the
    reported loss trace is nonincreasing.
    """
    config = config or ProjectionConfig()
    res = generator.cfg.resolution
    image = np.asarray(image, dtype=np.float32)
    if image.shape[:2] != (res, res):
        raise ValueError(f"image is {image.shape[0]}x{image.shape[1]}, "
                         f"model expects {res}x{res}")
    target = image[None].transpose(0, 3, 1, 2)  # [0,1] NCHW
    slots = generator.cfg.num_style_slots
    w0 = np.asarray(w_avg, dtype=np.float32).reshape(1, -1)
    n_vars = slots if config.space == "w+" else 1
    current = [w0.copy() for _ in range(n_vars)]

    feat_target = None
    if config.feature_weight > 0:
        extractor = extractor or FeatureExtractor.desk()
        feat_target = extractor.forward_var(Var(target * 2.0 - 1.0)).value

    def loss_at(vals: list[np.ndarray], tape: Tape | None):
        if tape is not None:
            ws = [ad.leaf(v.copy(), track=True) for v in vals]
        else:
            ws = [Var(v) for v in vals]
        style_in = list(ws) if n_vars == slots else ws[0]
        native = generator.synthesize_native(style_in, noise_seed=config.noise_seed,
                                             trainable=False)
        out01 = ad.add(ad.mul(native, np.float32(0.5)), np.float32(0.5))
        loss = ad.mul(ad.reduce_mean(ad.square(ad.sub(out01, target))),
                      np.float32(config.pixel_weight))
        if feat_target is not None:
            feats = extractor.forward_var(native)
            loss = ad.add(loss, ad.mul(
                ad.reduce_mean(ad.square(ad.sub(feats, feat_target))),
                np.float32(config.feature_weight)))
        return loss, ws, native

    opt = AdamState(learning_rate=1.0, beta1=0.9, beta2=0.999)
    trace: list[float] = []
    cur_loss = None
    for _ in range(config.steps):
        with Tape() as tape:
            loss, ws, _ = loss_at(current, tape)
            grads = tape.gradient(loss, ws)
        if cur_loss is None:
            cur_loss = float(loss.value)
        # Adam direction from raw moments; the applied length backtracks
        probes = {f"w{i}": Var(current[i].copy(), track=True) for i in range(n_vars)}
        adam_step(opt, probes, {f"w{i}": grads[i] for i in range(n_vars)})
        delta = [probes[f"w{i}"].value - current[i] for i in range(n_vars)]
        scale = config.learning_rate
        for _h in range(config.max_halvings + 1):
            cand = [current[i] + scale * delta[i] for i in range(n_vars)]
            cand_loss, _, _ = loss_at(cand, None)
            if float(cand_loss.value) <= cur_loss:
                current = cand
                cur_loss = float(cand_loss.value)
                break
            scale *= 0.5
        trace.append(cur_loss)

    _, _, native = loss_at(current, None)
    recon = from_native(native.value[0])
    w_out = [c[0] for c in current] if n_vars == slots else current[0][0]
    return ProjectionResult(w=w_out, reconstruction=recon, loss_trace=trace)


# ---------------------------------------------------------------------------
# seeded rendering (the shared recipe behind the CLI, API, and survey)

def render(generator: Generator, w_avg: np.ndarray, seed: int, psi: float = 1.0,
           basis: SefaBasis | None = None, edits: list[tuple[int, float]] | None = None,
           mix_seed: int | None = None, mix_layer: int | None = None,
           noise_seed: int | None = None):
    """Deterministic image for a public seed, with truncation, direction
    edits, and optional style mixing. Returns (image, styles_used)."""
    slots = generator.cfg.num_style_slots
    tp = TruncationParams(psi=psi, w_avg=w_avg)
    w = generator.map_latents(latent_for_seed(seed, generator.cfg.latent_dim)[None],
                              trainable=False).value[0]
    w = truncate(w, tp)
    if edits:
        if basis is None:
            raise ValueError("direction edits need a factorization basis")
        for index, alpha in edits:
            w = apply_direction(w, basis, index, alpha)
    if mix_seed is not None:
        layer = slots // 2 if mix_layer is None else mix_layer
        w_b = generator.map_latents(
            latent_for_seed(mix_seed, generator.cfg.latent_dim)[None],
            trainable=False).value[0]
        w_b = truncate(w_b, tp)
        styles = style_mix(w, w_b, layer, slots)
    else:
        styles = w
    image = generator.synthesize(styles, noise_seed=seed if noise_seed is None
                                 else noise_seed)
    return image, styles
