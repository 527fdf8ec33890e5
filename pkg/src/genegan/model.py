"""GeneGAN networks, the four-child training diagram and its losses.

The encoder splits an image into a background code and an object code, both
spatial maps at 1/8 resolution.  The decoder inverts it.  Two single-image
discriminators score membership in the with-object and without-object sets.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .rng import SplitMix64

GROUPS = ("encoder", "decoder", "disc_with", "disc_without")
GENERATOR_GROUPS = ("encoder", "decoder")
DISCRIMINATOR_GROUPS = ("disc_with", "disc_without")

KERNEL, STRIDE, PAD = 4, 2, 1
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    c_bg: int = 24
    c_obj: int = 8
    base_width: int = 32
    alpha: float = 0.2
    dtype: str = "float32"

    @property
    def latent_size(self) -> int:
        return self.image_size // 8

    @property
    def encoder_widths(self) -> tuple[int, int, int]:
        w = self.base_width
        return (w, 2 * w, self.c_bg + self.c_obj)

    @property
    def decoder_widths(self) -> tuple[int, int, int]:
        w = self.base_width
        return (2 * w, w, 3)

    @property
    def disc_widths(self) -> tuple[int, int, int]:
        w = self.base_width
        return (w, 2 * w, 4 * w)


@dataclass
class LatentCode:
    background: T.Tensor
    object: T.Tensor

    def __post_init__(self):
        b, o = self.background.shape, self.object.shape
        if len(b) != 4 or len(o) != 4 or (b[0], b[2], b[3]) != (o[0], o[2], o[3]):
            raise T.ShapeError(f"background {b} and object {o} must share N, H, W")

    def zero_object(self) -> "LatentCode":
        return LatentCode(self.background, T.Tensor(np.zeros_like(self.object.data)))


@dataclass
class FourChildren:
    x_Au_rec: T.Tensor
    x_B0_rec: T.Tensor
    x_A0: T.Tensor
    x_Bu: T.Tensor
    code_Au: LatentCode
    code_B0: LatentCode
    # object codes of intermediate crossbreeds that should be empty (stacked mode only)
    extra_nulls: tuple[T.Tensor, ...] = ()


@dataclass(frozen=True)
class LossWeights:
    w_rec: float = 10.0
    w_gan: float = 1.0
    w_null: float = 1.0
    w_par: float = 1.0


GENERATOR_TERMS = ("L_rec_Au", "L_rec_B0", "L_gan_0", "L_gan_ne0", "L_null", "L_par")
DISCRIMINATOR_TERMS = ("L_D_with", "L_D_without")


class ParamStore:
    """Trainable tensors and batch-norm running statistics, grouped by network.

    Every name maps to exactly one tensor; there is a single encoder and a
    single decoder parameter set however often they are applied.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, dict[str, T.Tensor]] = {g: {} for g in GROUPS}
        self.stats: dict[str, dict[str, T.RunningStats]] = {g: {} for g in GROUPS}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ParamStore":
        """Conv/affine weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; BN gamma 1, beta 0."""
        store = cls(config)
        rng = SplitMix64(seed)
        dt = np.dtype(config.dtype)
        k = KERNEL

        def weight(group, name, shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            vals = rng.uniform(-bound, bound, int(np.prod(shape))).reshape(shape)
            store._add(group, name, vals.astype(dt))

        def bn(group, name, c):
            store._add(group, f"{name}.gamma", np.ones(c, dt))
            store._add(group, f"{name}.beta", np.zeros(c, dt))
            store.stats[group][name] = T.RunningStats(c, dt)

        c_in = 3
        widths = config.encoder_widths
        for i, c_out in enumerate(widths, start=1):
            weight("encoder", f"conv{i}.weight", (c_out, c_in, k, k), c_in * k * k)
            if i < len(widths):
                bn("encoder", f"bn{i}", c_out)
            else:
                store._add("encoder", f"conv{i}.bias", np.zeros(c_out, dt))
            c_in = c_out

        c_in = config.c_bg + config.c_obj
        widths = config.decoder_widths
        for i, c_out in enumerate(widths, start=1):
            weight("decoder", f"deconv{i}.weight", (c_in, c_out, k, k), c_in * k * k)
            if i < len(widths):
                bn("decoder", f"bn{i}", c_out)
            else:
                store._add("decoder", f"deconv{i}.bias", np.zeros(c_out, dt))
            c_in = c_out

        for group in DISCRIMINATOR_GROUPS:
            c_in = 3
            for i, c_out in enumerate(config.disc_widths, start=1):
                weight(group, f"conv{i}.weight", (c_out, c_in, k, k), c_in * k * k)
                if i == 1:
                    store._add(group, "conv1.bias", np.zeros(c_out, dt))
                else:
                    bn(group, f"bn{i}", c_out)
                c_in = c_out
            weight(group, "fc.weight", (1, c_in), c_in)
            store._add(group, "fc.bias", np.zeros(1, dt))
        return store

    def _add(self, group: str, name: str, value: np.ndarray) -> None:
        if name in self.params[group]:
            raise KeyError(f"duplicate parameter {group}.{name}")
        self.params[group][name] = T.Tensor(value, requires_grad=True, name=f"{group}.{name}")

    def __getitem__(self, full_name: str) -> T.Tensor:
        group, name = full_name.split(".", 1)
        return self.params[group][name]

    def named_parameters(self, groups: Sequence[str] = GROUPS) -> Iterator[tuple[str, T.Tensor]]:
        for g in groups:
            for name, t in self.params[g].items():
                yield f"{g}.{name}", t

    def parameters(self, groups: Sequence[str] = GROUPS) -> list[T.Tensor]:
        return [t for _, t in self.named_parameters(groups)]

    def named_stats(self) -> Iterator[tuple[str, T.RunningStats]]:
        for g in GROUPS:
            for name, s in self.stats[g].items():
                yield f"{g}.{name}", s

    def num_parameters(self, groups: Sequence[str] = GROUPS) -> int:
        return int(sum(t.data.size for t in self.parameters(groups)))

    @contextlib.contextmanager
    def frozen(self, groups: Sequence[str]):
        """Temporarily stop the given groups from receiving gradients."""
        tensors = self.parameters(groups)
        for t in tensors:
            t.requires_grad = False
        try:
            yield
        finally:
            for t in tensors:
                t.requires_grad = True

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Deep copy with every parameter and statistic cast to ``dtype``."""
        cfg = ModelConfig(**{**self.config.__dict__, "dtype": np.dtype(dtype).name})
        out = ParamStore(cfg)
        for g in GROUPS:
            for name, t in self.params[g].items():
                out._add(g, name, t.data.astype(dtype))
            for name, s in self.stats[g].items():
                rs = T.RunningStats(len(s.mean), dtype)
                rs.mean[...] = s.mean
                rs.var[...] = s.var
                out.stats[g][name] = rs
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.config.dtype)


# ---------------------------------------------------------------------------
# networks

def _check_image(x: T.Tensor, config: ModelConfig, what: str) -> None:
    s = config.image_size
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"{what}: expected N x 3 x H x W image batch, got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise T.ShapeError(f"{what}: H and W must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")
    if x.shape[2:] != (s, s):
        raise T.ShapeError(f"{what}: model is configured for {s}x{s} images, got {x.shape[2]}x{x.shape[3]}")


def _bn(x, params: ParamStore, group: str, name: str, training: bool):
    p = params.params[group]
    return T.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], params.stats[group][name],
                        training, BN_MOMENTUM, BN_EPS)


def encode(x: T.Tensor, params: ParamStore, training: bool = False) -> LatentCode:
    """Image batch -> (background, object) code at 1/8 resolution.

    Two stride-2 conv + batch-norm + leaky-ReLU layers, then a linear stride-2
    conv whose channels are split into background and object parts.
    """
    cfg = params.config
    _check_image(x, cfg, "encode")
    p = params.params["encoder"]
    h = x
    for i in (1, 2):
        h = T.conv2d(h, p[f"conv{i}.weight"], STRIDE, PAD)
        h = T.leaky_relu(_bn(h, params, "encoder", f"bn{i}", training), cfg.alpha)
    h = T.add_channel_bias(T.conv2d(h, p["conv3.weight"], STRIDE, PAD), p["conv3.bias"])
    bg, obj = T.split_channels(h, cfg.c_bg)
    return LatentCode(bg, obj)


def decode(code: LatentCode, params: ParamStore, training: bool = False) -> T.Tensor:
    cfg = params.config
    s = cfg.latent_size
    if (code.background.shape[1:] != (cfg.c_bg, s, s)) or (code.object.shape[1:] != (cfg.c_obj, s, s)):
        raise T.ShapeError(
            f"decode: code shapes {code.background.shape}/{code.object.shape} do not match "
            f"configured ({cfg.c_bg}|{cfg.c_obj}) x {s} x {s}")
    p = params.params["decoder"]
    h = T.concat_channels(code.background, code.object)
    for i in (1, 2):
        h = T.conv2d_transpose(h, p[f"deconv{i}.weight"], STRIDE, PAD)
        h = T.leaky_relu(_bn(h, params, "decoder", f"bn{i}", training), cfg.alpha)
    h = T.add_channel_bias(T.conv2d_transpose(h, p["deconv3.weight"], STRIDE, PAD), p["deconv3.bias"])
    return T.sigmoid(h)


def discriminator_logits(x: T.Tensor, which: str, params: ParamStore, training: bool = False) -> T.Tensor:
    """Pre-sigmoid scores, shape (N,).  ``which`` is "with" or "without"."""
    if which not in ("with", "without"):
        raise ValueError(f"which must be 'with' or 'without', got {which!r}")
    cfg = params.config
    _check_image(x, cfg, "discriminate")
    group = f"disc_{which}"
    p = params.params[group]
    h = T.add_channel_bias(T.conv2d(x, p["conv1.weight"], STRIDE, PAD), p["conv1.bias"])
    h = T.leaky_relu(h, cfg.alpha)
    for i in (2, 3):
        h = T.conv2d(h, p[f"conv{i}.weight"], STRIDE, PAD)
        h = T.leaky_relu(_bn(h, params, group, f"bn{i}", training), cfg.alpha)
    h = T.linear(T.global_avg_pool(h), p["fc.weight"], p["fc.bias"])
    return T.reshape(h, (x.shape[0],))


def discriminate(x: T.Tensor, which: str, params: ParamStore, training: bool = False) -> T.Tensor:
    """Per-sample probability of belonging to the ``which`` set."""
    return T.sigmoid(discriminator_logits(x, which, params, training))


# ---------------------------------------------------------------------------
# training diagrams

Encoder = Callable[[T.Tensor], LatentCode]
Decoder = Callable[[LatentCode], T.Tensor]


def _nets(params, training, encoder, decoder) -> tuple[Encoder, Decoder]:
    enc = encoder or (lambda x: encode(x, params, training))
    dec = decoder or (lambda c: decode(c, params, training))
    return enc, dec


def _zeros(like: T.Tensor) -> T.Tensor:
    return T.Tensor(np.zeros(like.shape, dtype=like.dtype))


def four_child_forward(x_Au: T.Tensor, x_B0: T.Tensor, params: ParamStore | None,
                       training: bool = True, encoder: Encoder | None = None,
                       decoder: Decoder | None = None) -> FourChildren:
    """Encode both parents, decode the two reconstructions and the two crossbreeds.

    Both parents go through the encoder as one batch, and the four children
    through the decoder as one batch, so batch-norm statistics are shared.
    The "0" children are decoded from a literal zero object code; the encoded
    object part of x_B0 is only penalised, never decoded.
    """
    if x_Au.shape != x_B0.shape:
        raise T.ShapeError(f"parent batches differ in shape: {x_Au.shape} vs {x_B0.shape}")
    enc, dec = _nets(params, training, encoder, decoder)
    n = x_Au.shape[0]
    code = enc(T.concat([x_Au, x_B0], axis=0))
    A, B = T.split(code.background, [n, n], axis=0)
    u, eps = T.split(code.object, [n, n], axis=0)
    zero = _zeros(u)
    imgs = dec(LatentCode(T.concat([A, A, B, B], axis=0), T.concat([u, zero, u, zero], axis=0)))
    x_Au_rec, x_A0, x_Bu, x_B0_rec = T.split(imgs, [n] * 4, axis=0)
    return FourChildren(x_Au_rec, x_B0_rec, x_A0, x_Bu, LatentCode(A, u), LatentCode(B, eps))


def stacked_forward(x_Au: T.Tensor, x_B0: T.Tensor, params: ParamStore | None,
                    training: bool = True, encoder: Encoder | None = None,
                    decoder: Decoder | None = None) -> FourChildren:
    """Double-swap diagram: only crossbreeds are made, then swapped back.

    The returned ``x_Au_rec`` / ``x_B0_rec`` are the grandchildren
    Decoder(enc_bg(A0), enc_obj(Bu)) and Decoder(enc_bg(Bu), 0).  The object
    code of the re-encoded A0 is reported in ``extra_nulls``.
    """
    if x_Au.shape != x_B0.shape:
        raise T.ShapeError(f"parent batches differ in shape: {x_Au.shape} vs {x_B0.shape}")
    enc, dec = _nets(params, training, encoder, decoder)
    n = x_Au.shape[0]
    code = enc(T.concat([x_Au, x_B0], axis=0))
    A, B = T.split(code.background, [n, n], axis=0)
    u, eps = T.split(code.object, [n, n], axis=0)
    zero = _zeros(u)
    x_A0, x_Bu = T.split(dec(LatentCode(T.concat([A, B], axis=0), T.concat([zero, u], axis=0))),
                         [n, n], axis=0)

    code2 = enc(T.concat([x_A0, x_Bu], axis=0))
    A2, B2 = T.split(code2.background, [n, n], axis=0)
    eps2, u2 = T.split(code2.object, [n, n], axis=0)
    x_Au_gc, x_B0_gc = T.split(
        dec(LatentCode(T.concat([A2, B2], axis=0), T.concat([u2, zero], axis=0))), [n, n], axis=0)
    return FourChildren(x_Au_gc, x_B0_gc, x_A0, x_Bu, LatentCode(A, u), LatentCode(B, eps),
                        extra_nulls=(eps2,))


def generator_loss(children: FourChildren, x_Au: T.Tensor, x_B0: T.Tensor, params: ParamStore,
                   weights: LossWeights = LossWeights(),
                   training: bool = True) -> tuple[T.Tensor, dict[str, T.Tensor]]:
    """Weighted generator objective and its six unweighted terms.

    The parallelogram term is always reported but only enters the total when
    ``weights.w_par`` is non-zero.
    """
    c = children
    terms = {
        "L_rec_Au": T.l1(T.sub(x_Au, c.x_Au_rec)),
        "L_rec_B0": T.l1(T.sub(x_B0, c.x_B0_rec)),
        "L_gan_0": T.neg(T.mean(T.log_sigmoid(discriminator_logits(c.x_A0, "without", params, training)))),
        "L_gan_ne0": T.neg(T.mean(T.log_sigmoid(discriminator_logits(c.x_Bu, "with", params, training)))),
    }
    null = T.l1(c.code_B0.object)
    for extra in c.extra_nulls:
        null = T.add(null, T.l1(extra))
    terms["L_null"] = null
    terms["L_par"] = T.l1(T.sub(T.add(x_Au, x_B0), T.add(c.x_A0, c.x_Bu)))

    w = weights
    total = T.add(
        T.scale(T.add(terms["L_rec_Au"], terms["L_rec_B0"]), w.w_rec),
        T.scale(T.add(terms["L_gan_0"], terms["L_gan_ne0"]), w.w_gan))
    total = T.add(total, T.scale(terms["L_null"], w.w_null))
    if w.w_par:
        total = T.add(total, T.scale(terms["L_par"], w.w_par))
    return total, terms


def discriminator_loss(children: FourChildren, x_Au: T.Tensor, x_B0: T.Tensor, params: ParamStore,
                       training: bool = True) -> tuple[T.Tensor, dict[str, T.Tensor]]:
    """Binary cross-entropy for both discriminators on detached children.

    disc_with separates real x_Au (1) from crossbreed x_Bu (0); disc_without
    separates real x_B0 (1) from crossbreed x_A0 (0).
    """
    fake_Bu = children.x_Bu.detach()
    fake_A0 = children.x_A0.detach()

    def bce(real, fake, which):
        real_term = T.neg(T.mean(T.log_sigmoid(discriminator_logits(real, which, params, training))))
        fake_term = T.neg(T.mean(T.log_sigmoid(T.neg(discriminator_logits(fake, which, params, training)))))
        return T.add(real_term, fake_term)

    terms = {
        "L_D_with": bce(x_Au, fake_Bu, "with"),
        "L_D_without": bce(x_B0, fake_A0, "without"),
    }
    return T.add(terms["L_D_with"], terms["L_D_without"]), terms


# ---------------------------------------------------------------------------
# object-vector arithmetic

@dataclass
class ObjectVector:
    values: np.ndarray
    source_id: str = ""
    shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values).ravel()
        if not self.shape:
            self.shape = (self.values.size,)
        if int(np.prod(self.shape)) != self.values.size:
            raise T.ShapeError(f"object vector of length {self.values.size} cannot have shape {self.shape}")

    def to_tensor(self) -> T.Tensor:
        """Reshape into a batch-of-one object code."""
        return T.Tensor(self.values.reshape((1,) + tuple(self.shape)))


def object_vector(code: LatentCode, index: int = 0, source_id: str = "") -> ObjectVector:
    obj = code.object.data[index]
    return ObjectVector(obj.ravel().copy(), source_id, obj.shape)


def _check_pair(v1: ObjectVector, v2: ObjectVector) -> None:
    if v1.values.size != v2.values.size:
        raise T.ShapeError(f"object vectors differ in length: {v1.values.size} vs {v2.values.size}")


def scale_vector(v: ObjectVector, t: float) -> ObjectVector:
    # "+ 0.0" turns -0.0 into 0.0 so t = 0 gives exactly the zero code
    return ObjectVector(v.values * t + 0.0, f"{t}*{v.source_id}", v.shape)


def invert_vector(v: ObjectVector) -> ObjectVector:
    return ObjectVector(-v.values, f"-{v.source_id}", v.shape)


def interpolate_vectors(v1: ObjectVector, v2: ObjectVector, t: float) -> ObjectVector:
    """(1 - t) * v1 + t * v2; exact at both endpoints."""
    _check_pair(v1, v2)
    if t == 0:
        return ObjectVector(v1.values.copy(), v1.source_id, v1.shape)
    if t == 1:
        return ObjectVector(v2.values.copy(), v2.source_id, v2.shape)
    return ObjectVector((1 - t) * v1.values + t * v2.values,
                        f"lerp({v1.source_id},{v2.source_id},{t})", v1.shape)


def combine_vectors(vectors: Sequence[ObjectVector], weights: Sequence[float]) -> ObjectVector:
    """Weighted sum; a weight vector with a single 1 returns that vector unchanged."""
    if len(vectors) != len(weights) or not vectors:
        raise ValueError("need one weight per vector")
    for v in vectors[1:]:
        _check_pair(vectors[0], v)
    nonzero = [i for i, w in enumerate(weights) if w != 0]
    if len(nonzero) == 1 and weights[nonzero[0]] == 1:
        v = vectors[nonzero[0]]
        return ObjectVector(v.values.copy(), v.source_id, v.shape)
    acc = np.zeros_like(vectors[0].values)
    for v, w in zip(vectors, weights):
        acc = acc + w * v.values
    return ObjectVector(acc, "mix", vectors[0].shape)
