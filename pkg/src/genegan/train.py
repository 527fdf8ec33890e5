"""RMSProp training of GeneGAN with alternating discriminator/generator updates."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckio
from . import model as M
from . import tensor as T
from .rng import SplitMix64

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step",) + M.GENERATOR_TERMS + M.DISCRIMINATOR_TERMS


@dataclass
class TrainConfig:
    mode: str = "genegan"
    lr: float = 5e-5
    momentum: float = 0.0
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    image_size: int = 32
    w_rec: float = 10.0
    w_gan: float = 1.0
    w_null: float = 1.0
    w_par: float = 1.0
    d_steps_per_g_step: int = 1
    checkpoint_every: int = 0
    parallelogram_enabled: bool = True
    c_bg: int = 24
    c_obj: int = 8
    base_width: int = 32
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in ("genegan", "stacked"):
            raise ValueError(f"mode must be 'genegan' or 'stacked', got {self.mode!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.momentum != 0:
            raise ValueError("only momentum = 0 is supported")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.steps < 0 or self.d_steps_per_g_step < 1 or self.log_every < 1:
            raise ValueError("steps >= 0, d_steps_per_g_step >= 1 and log_every >= 1 required")

    @property
    def weights(self) -> M.LossWeights:
        w_par = self.w_par if self.parallelogram_enabled else 0.0
        return M.LossWeights(self.w_rec, self.w_gan, self.w_null, w_par)

    @property
    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(image_size=self.image_size, c_bg=self.c_bg, c_obj=self.c_obj,
                             base_width=self.base_width)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class RmsPropState:
    """Per-parameter running mean of squared gradients."""

    def __init__(self, params: M.ParamStore):
        self.acc = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}


def rmsprop_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: RmsPropState,
                 lr: float, decay: float = 0.9, eps: float = 1e-8) -> None:
    """In-place update of the named parameters that have a gradient.

    acc <- decay * acc + (1 - decay) * g**2;  p <- p - lr * g / (sqrt(acc) + eps)
    """
    for name, g in grads.items():
        p = params[name]
        acc = state.acc[name]
        if g.shape != p.data.shape or acc.shape != p.data.shape:
            raise T.ShapeError(f"rmsprop: {name} gradient {g.shape} vs parameter {p.data.shape}")
        dt = p.data.dtype
        g = g.astype(dt, copy=False)
        acc *= dt.type(decay)
        acc += dt.type(1 - decay) * g * g
        p.data -= dt.type(lr) * g / (np.sqrt(acc) + dt.type(eps))


class BatchStream:
    """Unpaired batches from the two sets.

    An epoch is one pass over the larger set in shuffled order; a strictly
    smaller set is resampled with replacement, equal-sized sets are both
    shuffled.  Each epoch's order depends only on the stream state at the
    epoch start, which is what a checkpoint records.
    """

    def __init__(self, with_images: np.ndarray, without_images: np.ndarray, batch_size: int,
                 seed: int, epoch: int = 0, position: int = 0, rng_state: int | None = None):
        if len(with_images) == 0 or len(without_images) == 0:
            raise ValueError("both image sets must be non-empty")
        self.with_images = with_images
        self.without_images = without_images
        self.batch_size = batch_size
        self.epoch = epoch
        self.position = position
        self.rng_state = SplitMix64(seed).state if rng_state is None else rng_state
        self._order = None

    @property
    def batches_per_epoch(self) -> int:
        n = max(len(self.with_images), len(self.without_images))
        return max(1, n // self.batch_size)

    def _epoch_order(self):
        rng = SplitMix64(0)
        rng.state = self.rng_state
        n_w, n_o = len(self.with_images), len(self.without_images)
        total = self.batches_per_epoch * self.batch_size

        def order(n, larger):
            if larger:
                perm = rng.permutation(n)
                return np.resize(perm, total)
            return rng.integers(n, total)

        idx_w = order(n_w, n_w >= n_o)
        idx_o = order(n_o, n_o >= n_w)
        return idx_w, idx_o, rng.state

    def state(self) -> dict:
        return {"epoch": self.epoch, "position": self.position, "rng_state": self.rng_state}

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        if self._order is None:
            self._order = self._epoch_order()
        idx_w, idx_o, next_state = self._order
        b = self.batch_size
        sl = slice(self.position * b, (self.position + 1) * b)
        out = self.with_images[idx_w[sl]], self.without_images[idx_o[sl]]
        self.position += 1
        if self.position == self.batches_per_epoch:
            self.epoch += 1
            self.position = 0
            self.rng_state = next_state
            self._order = None
        return out


def _named_grads(grads: dict[T.Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    return {t.name: g for t, g in grads.items()}


def train_step(batch_Au: np.ndarray, batch_B0: np.ndarray, params: M.ParamStore,
               opt_state: RmsPropState, config: TrainConfig,
               record: dict | None = None) -> dict[str, float]:
    """One round of discriminator updates followed by one generator update.

    Returns the six generator terms and the two discriminator terms.  When
    ``record`` is given, the names of parameters that received gradients in
    each phase are stored under ``"d_grads"`` and ``"g_grads"``.
    """
    dt = np.dtype(params.config.dtype)
    x_Au = T.Tensor(np.asarray(batch_Au, dtype=dt))
    x_B0 = T.Tensor(np.asarray(batch_B0, dtype=dt))
    forward = M.four_child_forward if config.mode == "genegan" else M.stacked_forward
    named = dict(params.named_parameters())

    g_tape = T.Tape()
    with g_tape:
        children = forward(x_Au, x_B0, params, training=True)

    d_names: set[str] = set()
    for _ in range(config.d_steps_per_g_step):
        with T.Tape() as d_tape, params.frozen(M.GENERATOR_GROUPS):
            d_loss, d_terms = M.discriminator_loss(children, x_Au, x_B0, params, training=True)
        grads = _named_grads(d_tape.backward(d_loss))
        d_names |= grads.keys()
        rmsprop_step(named, grads, opt_state, config.lr, config.rmsprop_decay, config.rmsprop_eps)

    with g_tape, params.frozen(M.DISCRIMINATOR_GROUPS):
        g_loss, g_terms = M.generator_loss(children, x_Au, x_B0, params, config.weights, training=True)
    grads = _named_grads(g_tape.backward(g_loss))
    rmsprop_step(named, grads, opt_state, config.lr, config.rmsprop_decay, config.rmsprop_eps)
    params.zero_grad()

    if record is not None:
        record["d_grads"] = d_names
        record["g_grads"] = set(grads)
    metrics = {k: v.item() for k, v in g_terms.items()}
    metrics.update({k: v.item() for k, v in d_terms.items()})
    return metrics


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    params: M.ParamStore
    opt_state: RmsPropState
    stream: dict = field(default_factory=dict)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{n}", t.data) for n, t in self.params.named_parameters()]
        for n, s in self.params.named_stats():
            out += [(f"bn_mean/{n}", s.mean), (f"bn_var/{n}", s.var)]
        out += [(f"rmsprop/{n}", a) for n, a in self.opt_state.acc.items()]
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "config": ckpt.config.to_dict(),
        "model": dataclasses.asdict(ckpt.params.config),
        "step": ckpt.step,
        "stream": ckpt.stream,
    }
    ckio.write(path, meta, ckpt.tensors())


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = ckio.read(path)
    try:
        config = TrainConfig.from_dict(meta["config"])
        mcfg = M.ModelConfig(**meta["model"])
        step = int(meta["step"])
        stream = dict(meta.get("stream", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ckio.CheckpointError(f"{path}: invalid config block: {exc}") from exc
    params = M.ParamStore.initialize(mcfg, 0)
    opt = RmsPropState(params)
    table = dict(tensors)
    expected = Checkpoint(config, step, params, opt).tensors()
    missing = [n for n, _ in expected if n not in table]
    extra = set(table) - {n for n, _ in expected}
    if missing or extra:
        raise ckio.CheckpointError(
            f"{path}: tensor table does not match the model (missing {missing[:3]}, unexpected {sorted(extra)[:3]})")
    for name, t in params.named_parameters():
        _assign(t.data, table[f"param/{name}"], name)
    for name, s in params.named_stats():
        _assign(s.mean, table[f"bn_mean/{name}"], name)
        _assign(s.var, table[f"bn_var/{name}"], name)
    for name, a in opt.acc.items():
        _assign(a, table[f"rmsprop/{name}"], name)
    return Checkpoint(config, step, params, opt, stream)


def _assign(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    if dst.shape != src.shape or dst.dtype != src.dtype:
        raise ckio.CheckpointError(f"tensor {name}: stored {src.dtype}{src.shape}, model expects {dst.dtype}{dst.shape}")
    dst[...] = src


# ---------------------------------------------------------------------------
# training loop

def init_checkpoint(config: TrainConfig) -> Checkpoint:
    params = M.ParamStore.initialize(config.model_config, config.seed)
    stream = {"epoch": 0, "position": 0, "rng_state": SplitMix64(config.seed ^ 0x5EED).state}
    return Checkpoint(config, 0, params, RmsPropState(params), stream)


def _write_metrics(path: Path, rows: list[dict], append: bool) -> None:
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(r[c]) for c in METRIC_COLUMNS[1:]])


def train(config: TrainConfig, with_images: np.ndarray, without_images: np.ndarray,
          out_dir=None, resume: Checkpoint | None = None,
          callback: Callable[[int, dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run ``config.steps`` total steps (counting from a resumed checkpoint's step).

    With ``out_dir`` set, writes ``metrics.csv``, periodic ``ckpt_<step>.ggck``
    files and ``final.ggck``.
    """
    if len(with_images) == 0 or len(without_images) == 0:
        raise ValueError("training needs at least one image in each set")
    for name, arr in (("with", with_images), ("without", without_images)):
        if arr.shape[1:] != (3, config.image_size, config.image_size):
            raise ValueError(f"{name}-object images have shape {arr.shape[1:]}, "
                             f"config expects 3x{config.image_size}x{config.image_size}")
    ckpt = resume if resume is not None else init_checkpoint(config)
    if resume is not None and resume.config != config:
        log.warning("resuming with a config that differs from the checkpoint's; using the new one")
    ckpt.config = config
    dt = np.dtype(ckpt.params.config.dtype)
    stream = BatchStream(with_images.astype(dt, copy=False), without_images.astype(dt, copy=False),
                         config.batch_size, 0, **ckpt.stream)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    pending: list[dict] = []
    append = resume is not None
    t0, first = time.perf_counter(), ckpt.step
    while ckpt.step < config.steps:
        batch_w, batch_o = stream.next()
        metrics = train_step(batch_w, batch_o, ckpt.params, ckpt.opt_state, config)
        ckpt.step += 1
        ckpt.stream = stream.state()
        if ckpt.step % config.log_every == 0:
            row = {"step": ckpt.step, **metrics}
            history.append(row)
            pending.append(row)
        if callback is not None:
            callback(ckpt.step, metrics)
        if ckpt.step % 100 == 0:
            log.info("step %d (%.2fs/step) rec=%.4f null=%.4f gan=%.3f/%.3f D=%.3f/%.3f",
                     ckpt.step, (time.perf_counter() - t0) / (ckpt.step - first),
                     metrics["L_rec_Au"], metrics["L_null"], metrics["L_gan_0"], metrics["L_gan_ne0"],
                     metrics["L_D_with"], metrics["L_D_without"])
        if out is not None and config.checkpoint_every and ckpt.step % config.checkpoint_every == 0:
            _write_metrics(out / "metrics.csv", pending, append)
            pending, append = [], True
            save_checkpoint(out / f"ckpt_{ckpt.step:06d}.ggck", ckpt)
    if out is not None:
        _write_metrics(out / "metrics.csv", pending, append)
        save_checkpoint(out / "final.ggck", ckpt)
    return ckpt, history
