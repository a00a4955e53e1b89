"""Style-based generator and discriminator.

The generator maps a normal latent through a stack of fully connected layers
into style space, then drives a synthesis network of modulated 3x3
convolutions: the style scales input channels, the output is rescaled so
each effective filter has unit norm (demodulation), and per-layer noise is
injected outside the modulated path. Image output accumulates through 1x1
to-RGB projections with 2x upsampled skip connections instead of growing
resolutions progressively. The discriminator mirrors the stack with residual
downsampling blocks.

All parameters are stored raw with unit variance and scaled at use time
(equalized learning rate); the mapping stack additionally runs at a reduced
effective rate, which keeps the adversarial game stable at small scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .rng import stream

LRELU_SLOPE = 0.2


@dataclass(frozen=True)
class GanConfig:
    resolution: int = 32
    latent_dim: int = 64
    style_dim: int = 64
    mapping_layers: int = 8
    base_channels: int = 128
    max_channels: int = 128
    mapping_lr_mul: float = 0.01
    pixel_norm_input: bool = True

    def __post_init__(self):
        if self.resolution & (self.resolution - 1) or not 8 <= self.resolution <= 512:
            raise ValueError(f"resolution must be a power of two in [8, 512], got {self.resolution}")
        if not 2 <= self.mapping_layers <= 8:
            raise ValueError("mapping_layers must be within [2, 8]")

    def resolutions(self) -> list[int]:
        out, r = [], 4
        while r <= self.resolution:
            out.append(r)
            r *= 2
        return out

    def channels(self, res: int) -> int:
        return int(min(max(self.base_channels * 4 // res, 4), self.max_channels))

    @property
    def num_style_slots(self) -> int:
        # first block consumes 2 styles (conv + to-RGB), later blocks 3
        return 2 + 3 * (len(self.resolutions()) - 1)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _he_std(fan_in: int, gain: float) -> float:
    return gain / math.sqrt(fan_in)


def latent_for_seed(seed: int, dim: int) -> np.ndarray:
    """Canonical z vector for a public seed number."""
    return stream(seed, "z").standard_normal(dim).astype(np.float32)


class _Params:
    """Named parameter dictionary with equalized-rate access helpers."""

    def __init__(self):
        self.vars: dict[str, Var] = {}
        self.scales: dict[str, float] = {}

    def new(self, name: str, value: np.ndarray, scale: float = 1.0) -> None:
        self.vars[name] = Var(np.asarray(value, dtype=np.float32), track=True)
        self.scales[name] = scale

    def use(self, name: str, trainable: bool) -> Var:
        v = self.vars[name]
        if not trainable:
            v = Var(v.value)
        s = self.scales[name]
        return ad.mul(v, np.float32(s)) if s != 1.0 else v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.vars.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.vars.items():
            src = state[k]
            if src.shape != v.value.shape:
                raise ad.ShapeError(f"param {k}: stored {src.shape} != expected {v.value.shape}")
            v.value = np.asarray(src, dtype=np.float32).copy()


def _dense(x: Var, w: Var, b: Var | None, slope: float | None) -> Var:
    y = ad.matmul(x, w)
    if b is not None:
        y = ad.add(y, b)
    if slope is not None:
        y = ad.leaky_relu(y, slope)
    return y


def _pixel_norm(x: Var, eps: float = 1e-8) -> Var:
    m = ad.reduce_mean(ad.square(x), axis=1, keepdims=True)
    return ad.mul(x, ad.rsqrt(ad.add(m, np.float32(eps))))


class Generator:
    """Mapping network plus synthesis network over a parameter store."""

    def __init__(self, cfg: GanConfig, seed: int = 0):
        self.cfg = cfg
        self.params = _Params()
        rng = stream(seed, "generator-init")
        dz, dw, lrm = cfg.latent_dim, cfg.style_dim, cfg.mapping_lr_mul

        dims = [dz] + [dw] * cfg.mapping_layers
        for i in range(cfg.mapping_layers):
            self.params.new(f"map.{i}.w", rng.standard_normal((dims[i], dims[i + 1])) / lrm,
                            scale=_he_std(dims[i], math.sqrt(2.0)) * lrm)
            self.params.new(f"map.{i}.b", np.zeros(dims[i + 1]), scale=lrm)

        res_list = cfg.resolutions()
        self.params.new("syn.const", rng.standard_normal((1, cfg.channels(4), 4, 4)))
        slot = 0
        self._conv_layers: list[dict] = []   # style-consuming layers, in slot order
        for bi, res in enumerate(res_list):
            cin = cfg.channels(res if bi == 0 else res // 2)
            cout = cfg.channels(res)
            convs = [("conv0", cin, cout)] if bi == 0 else [
                ("conv0", cin, cout), ("conv1", cout, cout)]
            for cname, ci, co in convs:
                base = f"syn.b{res}.{cname}"
                self._add_modconv(rng, base, ci, co, k=3)
                self._conv_layers.append(dict(kind="conv", base=base, res=res,
                                              upsample=(bi > 0 and cname == "conv0"),
                                              slot=slot))
                slot += 1
            base = f"syn.b{res}.torgb"
            self._add_modconv(rng, base, cout, 3, k=1)
            self._conv_layers.append(dict(kind="torgb", base=base, res=res, slot=slot))
            slot += 1
        assert slot == cfg.num_style_slots

    def _add_modconv(self, rng, base: str, cin: int, cout: int, k: int) -> None:
        dw = self.cfg.style_dim
        self.params.new(f"{base}.w", rng.standard_normal((cout, cin, k, k)),
                        scale=_he_std(cin * k * k, math.sqrt(2.0) if k == 3 else 1.0))
        self.params.new(f"{base}.b", np.zeros(cout))
        self.params.new(f"{base}.aff_w", rng.standard_normal((dw, cin)),
                        scale=_he_std(dw, 1.0))
        self.params.new(f"{base}.aff_b", np.ones(cin))
        if k == 3:
            self.params.new(f"{base}.noise", np.zeros(()))

    # -- mapping ------------------------------------------------------------

    def map_latents(self, z: Var | np.ndarray, trainable: bool = True) -> Var:
        z = z if isinstance(z, Var) else Var(np.asarray(z, dtype=np.float32))
        if z.value.ndim != 2 or z.value.shape[1] != self.cfg.latent_dim:
            raise ad.ShapeError(
                f"latent batch must be (N, {self.cfg.latent_dim}), got {z.value.shape}")
        x = _pixel_norm(z) if self.cfg.pixel_norm_input else z
        for i in range(self.cfg.mapping_layers):
            x = _dense(x, self.params.use(f"map.{i}.w", trainable),
                       self.params.use(f"map.{i}.b", trainable), LRELU_SLOPE)
        return x

    def w_average(self, n: int = 10_000, seed: int = 0) -> np.ndarray:
        """Monte-Carlo mean style vector, the anchor for truncation."""
        rng = stream(seed, "w-average")
        total = np.zeros(self.cfg.style_dim, dtype=np.float64)
        done = 0
        while done < n:
            b = min(1024, n - done)
            z = rng.standard_normal((b, self.cfg.latent_dim)).astype(np.float32)
            total += self.map_latents(z, trainable=False).value.sum(axis=0)
            done += b
        return (total / n).astype(np.float32)

    # -- synthesis ----------------------------------------------------------

    def _style(self, layer: dict, w: Var, trainable: bool) -> Var:
        base = layer["base"]
        return _dense(w, self.params.use(f"{base}.aff_w", trainable),
                      self.params.use(f"{base}.aff_b", trainable), None)

    def _modconv(self, x: Var, layer: dict, style: Var, trainable: bool,
                 demodulate: bool) -> Var:
        base = layer["base"]
        w_eff = self.params.use(f"{base}.w", trainable)
        n = x.value.shape[0]
        cout, cin, kh, kw = w_eff.value.shape
        x = ad.mul(x, ad.reshape(style, (n, cin, 1, 1)))
        y = ad.conv2d(x, w_eff, stride=1)
        if demodulate:
            wk = ad.reshape(w_eff, (1, cout, cin, kh * kw))
            sk = ad.reshape(style, (n, 1, cin, 1))
            ssq = ad.reduce_sum(ad.square(ad.mul(wk, sk)), axis=(2, 3))
            d = ad.rsqrt(ad.add(ssq, np.float32(1e-8)))
            y = ad.mul(y, ad.reshape(d, (n, cout, 1, 1)))
        return y

    def synthesize_native(self, ws, noise_seed: int = 0, zero_noise: bool = False,
                          trainable: bool = True, capture: list | None = None) -> Var:
        """Run the synthesis stack; returns native-range NCHW.

        ``ws`` is either a single (N, style_dim) batch used for every layer
        or a list with one entry per style slot (layer-wise styles).
        """
        slots = self.cfg.num_style_slots
        if isinstance(ws, (list, tuple)):
            if len(ws) != slots:
                raise ad.ShapeError(f"need {slots} per-layer styles, got {len(ws)}")
            ws = [w if isinstance(w, Var) else Var(np.asarray(w, dtype=np.float32))
                  for w in ws]
        else:
            w = ws if isinstance(ws, Var) else Var(np.asarray(ws, dtype=np.float32))
            ws = [w] * slots
        n = ws[0].value.shape[0]

        const = self.params.use("syn.const", trainable)
        x = ad.add(const, np.zeros((n, 1, 1, 1), dtype=np.float32))  # broadcast batch
        rgb = None
        for layer in self._conv_layers:
            style = self._style(layer, ws[layer["slot"]], trainable)
            if layer["kind"] == "conv":
                if layer["upsample"]:
                    x = ad.upsample2x(x)
                x = self._modconv(x, layer, style, trainable, demodulate=True)
                if not zero_noise:
                    res = layer["res"]
                    noise = stream(noise_seed, "noise", layer["slot"]).standard_normal(
                        (n, 1, res, res)).astype(np.float32)
                    x = ad.add(x, ad.mul(self.params.use(f"{layer['base']}.noise", trainable),
                                         noise))
                b = self.params.use(f"{layer['base']}.b", trainable)
                x = ad.leaky_relu(ad.add(x, ad.reshape(b, (1, -1, 1, 1))), LRELU_SLOPE)
                if capture is not None:
                    capture.append(x)
            else:
                skip = self._modconv(x, layer, style, trainable, demodulate=False)
                b = self.params.use(f"{layer['base']}.b", trainable)
                skip = ad.add(skip, ad.reshape(b, (1, -1, 1, 1)))
                rgb = skip if rgb is None else ad.add(ad.upsample2x(rgb), skip)
                if capture is not None:
                    capture.append(rgb)
        return rgb

    def synthesize(self, w, noise_seed: int = 0, zero_noise: bool = False) -> np.ndarray:
        """Render one image to H x W x 3 in [0, 1] from a style vector or list."""
        if isinstance(w, (list, tuple)):
            ws = [np.asarray(wi, dtype=np.float32).reshape(1, -1) for wi in w]
        else:
            ws = np.asarray(w, dtype=np.float32).reshape(1, -1)
        native = self.synthesize_native(ws, noise_seed=noise_seed,
                                        zero_noise=zero_noise, trainable=False)
        from .images import from_native
        return from_native(native.value[0])

    def affine_weights(self) -> list[np.ndarray]:
        """Effective style-affine matrices (style_dim x channels), slot order."""
        out = []
        for layer in self._conv_layers:
            name = f"{layer['base']}.aff_w"
            out.append((self.params.vars[name].value *
                        self.params.scales[name]).astype(np.float64))
        return out


class Discriminator:
    """Residual downsampling critic returning one realness score per image."""

    def __init__(self, cfg: GanConfig, seed: int = 0):
        self.cfg = cfg
        self.params = _Params()
        rng = stream(seed, "discriminator-init")
        res_list = cfg.resolutions()[::-1]  # high to low
        ch0 = cfg.channels(cfg.resolution)
        self.params.new("frgb.w", rng.standard_normal((ch0, 3, 1, 1)),
                        scale=_he_std(3, math.sqrt(2.0)))
        self.params.new("frgb.b", np.zeros(ch0))
        self._blocks = []
        for res in res_list[:-1]:
            cin, cout = cfg.channels(res), cfg.channels(res // 2)
            base = f"blk{res}"
            self.params.new(f"{base}.c0.w", rng.standard_normal((cin, cin, 3, 3)),
                            scale=_he_std(cin * 9, math.sqrt(2.0)))
            self.params.new(f"{base}.c0.b", np.zeros(cin))
            self.params.new(f"{base}.c1.w", rng.standard_normal((cout, cin, 3, 3)),
                            scale=_he_std(cin * 9, math.sqrt(2.0)))
            self.params.new(f"{base}.c1.b", np.zeros(cout))
            self.params.new(f"{base}.skip.w", rng.standard_normal((cout, cin, 1, 1)),
                            scale=_he_std(cin, 1.0))
            self._blocks.append(base)
        c4 = cfg.channels(4)
        self.params.new("final.c.w", rng.standard_normal((c4, c4, 3, 3)),
                        scale=_he_std(c4 * 9, math.sqrt(2.0)))
        self.params.new("final.c.b", np.zeros(c4))
        self.params.new("final.d0.w", rng.standard_normal((c4 * 16, c4)),
                        scale=_he_std(c4 * 16, math.sqrt(2.0)))
        self.params.new("final.d0.b", np.zeros(c4))
        self.params.new("final.d1.w", rng.standard_normal((c4, 1)),
                        scale=_he_std(c4, 1.0))
        self.params.new("final.d1.b", np.zeros(1))

    def forward(self, x: Var | np.ndarray, trainable: bool = True,
                want_trace: bool = False):
        """Score a native NCHW batch; returns (scores, tangent_trace).

        The trace is a list of closures that push an input-space tangent
        through the same layer stack (sharing the weight subgraph), used to
        build the exact parameter gradient of the input-gradient penalty.
        """
        x = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float32))
        if x.value.ndim != 4 or x.value.shape[2] != self.cfg.resolution:
            raise ad.ShapeError(
                f"discriminator expects (N, 3, {self.cfg.resolution}, {self.cfg.resolution}),"
                f" got {x.value.shape}")
        trace: list | None = [] if want_trace else None
        u = self.params  # alias

        def conv(t, name, stride=1, bias=True, slope=None):
            w_eff = u.use(name + ".w", trainable)
            y = ad.conv2d(t, w_eff, stride=stride)
            if bias:
                y = ad.add(y, ad.reshape(u.use(name + ".b", trainable), (1, -1, 1, 1)))
            if slope is not None:
                pre = y
                y = ad.leaky_relu(y, slope)
                mask = np.where(pre.value > 0, 1.0, slope).astype(np.float32)
            if trace is not None:
                def tfn(tt, w_eff=w_eff, stride=stride,
                        mask=mask if slope is not None else None):
                    tt = ad.conv2d(tt, w_eff, stride=stride)
                    if mask is not None:
                        tt = ad.mul(tt, mask)
                    return tt
                trace.append(tfn)
            return y

        y = conv(x, "frgb", slope=LRELU_SLOPE)
        inv_sqrt2 = np.float32(1.0 / math.sqrt(2.0))
        for base in self._blocks:
            y_main = conv(y, f"{base}.c0", slope=LRELU_SLOPE)
            y_main = conv(y_main, f"{base}.c1", slope=LRELU_SLOPE)
            y_main = ad.avgpool2x(y_main)
            skip_w = u.use(f"{base}.skip.w", trainable)
            y_skip = ad.conv2d(ad.avgpool2x(y), skip_w, stride=1)
            y = ad.mul(ad.add(y_main, y_skip), inv_sqrt2)
            if trace is not None:
                t1 = trace.pop()  # c1
                t0 = trace.pop()  # c0
                def tfn(tt, t0=t0, t1=t1, skip_w=skip_w, s=inv_sqrt2):
                    tm = ad.avgpool2x(t1(t0(tt)))
                    ts = ad.conv2d(ad.avgpool2x(tt), skip_w, stride=1)
                    return ad.mul(ad.add(tm, ts), s)
                trace.append(tfn)
        y = conv(y, "final.c", slope=LRELU_SLOPE)
        n = y.value.shape[0]
        c4 = self.cfg.channels(4)
        y = ad.reshape(y, (n, c4 * 16))
        pre0 = ad.add(ad.matmul(y, u.use("final.d0.w", trainable)),
                      u.use("final.d0.b", trainable))
        y2 = ad.leaky_relu(pre0, LRELU_SLOPE)
        score = ad.add(ad.matmul(y2, u.use("final.d1.w", trainable)),
                       u.use("final.d1.b", trainable))
        if trace is not None:
            mask0 = np.where(pre0.value > 0, 1.0, LRELU_SLOPE).astype(np.float32)
            d0 = u.use("final.d0.w", trainable)
            d1 = u.use("final.d1.w", trainable)

            def tfn_head(tt, n=n, c=c4 * 16, d0=d0, d1=d1, mask0=mask0):
                tt = ad.reshape(tt, (n, c))
                tt = ad.mul(ad.matmul(tt, d0), mask0)
                return ad.matmul(tt, d1)
            trace.append(tfn_head)
        return score, trace

    def run_tangent(self, trace: list, tangent: np.ndarray) -> Var:
        """Push a constant input tangent through a recorded trace.

        Returns the summed score tangent: for tangent = d(sum score)/d(input)
        its value equals the squared norm of that input gradient, and its
        parameter gradient is half the gradient of that squared norm.
        """
        t: Var = Var(np.asarray(tangent, dtype=np.float32))
        for fn in trace:
            t = fn(t)
        return ad.reduce_sum(t)


# ---------------------------------------------------------------------------
# adaptive discriminator augmentation

@dataclass
class AdaState:
    """Augmentation probability driven by a discriminator-overfit estimate."""

    p: float = 0.0
    target: float = 0.6
    speed_images: int = 500_000  # images for p to traverse [0, 1]
    ema_batches: int = 500
    r: float = 0.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def ada_update(state: AdaState, real_scores: np.ndarray) -> AdaState:
    """Fold one batch of real-image scores into the overfit EMA and nudge p."""
    scores = np.asarray(real_scores).ravel()
    if scores.size == 0:
        raise ValueError("ada_update needs a non-empty score batch")
    alpha = 1.0 / state.ema_batches
    state.r = float((1 - alpha) * state.r + alpha * np.mean(np.sign(scores)))
    step = scores.size / state.speed_images
    state.p = float(np.clip(state.p + step * np.sign(state.r - state.target), 0.0, 1.0))
    return state


# ---------------------------------------------------------------------------
# augmentation pipeline (flips, quarter rotations, shifts, colour jitter)

@dataclass
class SampleTransform:
    flip: bool = False
    rot: int = 0
    dx: int = 0
    dy: int = 0
    brightness: float = 0.0
    contrast: float = 1.0

    @property
    def geometric(self):
        return (self.flip, self.rot, self.dx, self.dy)


def draw_transforms(n: int, p: float, width: int, rng) -> list[SampleTransform]:
    """Sample per-image transforms; each component fires independently with prob p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"augment probability must be in [0,1], got {p}")
    max_shift = int(0.125 * width)
    out = []
    for _ in range(n):
        t = SampleTransform()
        if rng.random() < p:
            t.flip = True
        if rng.random() < p:
            t.rot = int(rng.integers(1, 4))
        if rng.random() < p:
            t.dx = int(rng.integers(-max_shift, max_shift + 1))
            t.dy = int(rng.integers(-max_shift, max_shift + 1))
        if rng.random() < p:
            t.brightness = float(rng.uniform(-0.25, 0.25))
        if rng.random() < p:
            t.contrast = float(np.exp(rng.uniform(np.log(0.75), np.log(4.0 / 3.0))))
        out.append(t)
    return out


def augment_batch(x: Var, transforms: list[SampleTransform]) -> Var:
    """Differentiable transform application on a native NCHW batch."""
    n = x.value.shape[0]
    if any(t.geometric != (False, 0, 0, 0) for t in transforms):
        x = ad.batch_geom(x, [t.geometric for t in transforms])
    c = np.array([[t.contrast] for t in transforms], dtype=np.float32).reshape(n, 1, 1, 1)
    b = np.array([[t.brightness] for t in transforms], dtype=np.float32).reshape(n, 1, 1, 1)
    if np.any(c != 1.0):
        m = ad.reduce_mean(x, axis=(1, 2, 3), keepdims=True)
        x = ad.add(ad.mul(ad.sub(x, m), c), m)
    if np.any(b != 0.0):
        x = ad.add(x, b)
    return x


def augment(image: np.ndarray, p: float, seed: int) -> np.ndarray:
    """Randomly transformed copy of one [0,1] HWC image; identity when p=0."""
    from .images import from_native, to_native
    rng = stream(seed, "augment")
    t = draw_transforms(1, p, image.shape[1], rng)
    out = augment_batch(Var(to_native(image)[None]), t)
    return from_native(out.value)[0]
