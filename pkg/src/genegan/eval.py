"""Oracles and metrics that check the model against independent references.

* :func:`finite_diff_gradient` / :func:`gradient_check` -- central differences
  against the tape's analytic gradients.
* :func:`loss_oracle` -- every loss term recomputed with plain Python floats.
* :func:`disentanglement_probe` -- linear probes from the object and
  background codes to the ground-truth glasses parameters.
* :func:`drift_metric` -- recovers the transplanted object's parameters by
  brute-force search over the renderer and compares them to the donor's.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T

PROBE_TARGETS = ("darkness", "width", "tint")


# ---------------------------------------------------------------------------
# finite differences

def _as_named(params) -> dict[str, T.Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    if isinstance(params, M.ParamStore):
        return dict(params.named_parameters())
    return {(t.name or str(i)): t for i, t in enumerate(params)}


def _eval_loss(loss_fn: Callable[[], T.Tensor]) -> float:
    val = float(loss_fn().data)
    if not math.isfinite(val):
        raise FloatingPointError("loss is not finite")
    return val


def finite_diff_gradient(loss_fn: Callable[[], T.Tensor], params, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn()`` w.r.t. every scalar in ``params``."""
    grads = {}
    for name, t in _as_named(params).items():
        if t.dtype != np.float64:
            raise TypeError(f"finite differences need float64 parameters; {name} is {t.dtype}")
        flat = t.data.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_loss(loss_fn)
            flat[i] = orig - h
            fm = _eval_loss(loss_fn)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads[name] = g.reshape(t.shape)
    return grads


@dataclass
class GradCheckReport:
    n_checked: int
    n_kink: int
    n_failed: int
    max_rel_err: float
    worst: list = field(default_factory=list)

    @property
    def pass_fraction(self) -> float:
        return 1.0 - self.n_failed / max(self.n_checked, 1)


def rel_err(a, b, floor: float = 1e-6):
    """|a - b| / max(|a|, |b|, floor).  Central differences at h = 1e-5 carry
    about 1e-11 of round-off, so the floor keeps structurally zero gradients
    from reading as large relative errors while still demanding 1e-10
    absolute agreement."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(loss_fn: Callable[[], T.Tensor], params, h: float = 1e-5, tol: float = 1e-4,
                   max_per_tensor: int | None = None, kink_margin: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients with central differences.

    A scalar is "kink-adjacent", and skipped, when some input of a leaky
    ReLU or absolute value that moves under its +-h perturbation lies within
    ``kink_margin`` of zero or changes sign: the one-sided derivatives differ
    there and central differences are not a valid oracle.  ``max_per_tensor``
    limits how many scalars of each tensor are probed (evenly spaced indices).
    """
    named = _as_named(params)
    with T.Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)

    def kink_inputs():
        with T.record_kinks() as kinks:
            val = _eval_loss(loss_fn)
        return val, kinks

    _, base = kink_inputs()
    near = [np.abs(k) <= kink_margin for k in base]

    def adjacent(moved):
        for b, m, nz in zip(base, moved, near):
            changed = b != m
            if np.any(changed & (nz | (np.sign(b) != np.sign(m)))):
                return True
        return False

    n_checked = n_kink = n_failed = 0
    max_err = 0.0
    worst = []
    for name, t in named.items():
        if t.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 parameters; {name} is {t.dtype}")
        g_an = grads.get(t, np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        idx = range(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = np.linspace(0, flat.size - 1, max_per_tensor).round().astype(int)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, k_p = kink_inputs()
            flat[i] = orig - h
            fm, k_m = kink_inputs()
            flat[i] = orig
            if adjacent(k_p) or adjacent(k_m):
                n_kink += 1
                continue
            fd = (fp - fm) / (2 * h)
            err = float(rel_err(g_an[i], fd))
            n_checked += 1
            max_err = max(max_err, err)
            if err >= tol:
                n_failed += 1
                worst.append((name, int(i), float(g_an[i]), fd, err))
    return GradCheckReport(n_checked, n_kink, n_failed, max_err, worst)


# ---------------------------------------------------------------------------
# direct loss arithmetic

def _mean_abs(values) -> float:
    flat = list(values)
    return math.fsum(abs(v) for v in flat) / len(flat)


def loss_oracle(x_Au, x_B0, x_Au_rec, x_B0_rec, x_A0, x_Bu, eps, probs: Mapping[str, Sequence[float]],
                weights: M.LossWeights = M.LossWeights(), extra_nulls=()) -> dict[str, float]:
    """Recompute every generator and discriminator term element by element.

    ``probs`` holds discriminator probabilities under the keys ``with_real``
    (disc_with on x_Au), ``with_fake`` (disc_with on x_Bu), ``without_real``
    (disc_without on x_B0) and ``without_fake`` (disc_without on x_A0).
    """
    fl = lambda a: np.asarray(a, dtype=np.float64).reshape(-1).tolist()  # noqa: E731
    a, b, ar, br, a0, bu = map(fl, (x_Au, x_B0, x_Au_rec, x_B0_rec, x_A0, x_Bu))
    p = {k: fl(v) for k, v in probs.items()}

    def neg_mean_log(vals):
        return -math.fsum(math.log(v) for v in vals) / len(vals)

    out = {
        "L_rec_Au": _mean_abs(x - y for x, y in zip(a, ar)),
        "L_rec_B0": _mean_abs(x - y for x, y in zip(b, br)),
        "L_gan_0": neg_mean_log(p["without_fake"]),
        "L_gan_ne0": neg_mean_log(p["with_fake"]),
        "L_null": _mean_abs(fl(eps)) + math.fsum(_mean_abs(fl(e)) for e in extra_nulls),
        "L_par": _mean_abs((w + x) - (y + z) for w, x, y, z in zip(a, b, a0, bu)),
        "L_D_with": neg_mean_log(p["with_real"]) + neg_mean_log([1 - v for v in p["with_fake"]]),
        "L_D_without": neg_mean_log(p["without_real"]) + neg_mean_log([1 - v for v in p["without_fake"]]),
    }
    out["L_G"] = (weights.w_rec * (out["L_rec_Au"] + out["L_rec_B0"])
                  + weights.w_gan * (out["L_gan_0"] + out["L_gan_ne0"])
                  + weights.w_null * out["L_null"]
                  + (weights.w_par * out["L_par"] if weights.w_par else 0.0))
    out["L_D"] = out["L_D_with"] + out["L_D_without"]
    return out


# ---------------------------------------------------------------------------
# inference helpers

def encode_batched(params: M.ParamStore, images: np.ndarray, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode codes as numpy arrays (background, object)."""
    dt = np.dtype(params.config.dtype)
    bgs, objs = [], []
    for i in range(0, len(images), batch):
        code = M.encode(T.Tensor(np.asarray(images[i:i + batch], dt)), params, training=False)
        bgs.append(code.background.data)
        objs.append(code.object.data)
    return np.concatenate(bgs), np.concatenate(objs)


def decode_batched(params: M.ParamStore, bg: np.ndarray, obj: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(bg), batch):
        code = M.LatentCode(T.Tensor(bg[i:i + batch]), T.Tensor(obj[i:i + batch]))
        out.append(M.decode(code, params, training=False).data)
    return np.concatenate(out)


@dataclass
class ReconstructionStats:
    rec_l1_with: float
    rec_l1_without: float
    mean_abs_eps: float
    removal_l1: float | None = None

    @property
    def rec_l1(self) -> float:
        return 0.5 * (self.rec_l1_with + self.rec_l1_without)


def reconstruction_stats(params: M.ParamStore, with_set: list[D.Sample],
                         without_set: list[D.Sample]) -> ReconstructionStats:
    """Eval-mode reconstruction L1 per pixel, mean |eps| on object-free images,
    and (synthetic data) L1 of object removal against the true background."""
    xw, xo = D.stack_images(with_set), D.stack_images(without_set)
    bw, uw = encode_batched(params, xw)
    bo, eo = encode_batched(params, xo)
    rec_w = decode_batched(params, bw, uw)
    rec_o = decode_batched(params, bo, np.zeros_like(eo))
    removal = None
    if all(s.scene is not None for s in with_set):
        truth = np.stack([D.render_scene(s.scene, xw.shape[-1]) for s in with_set])
        removed = decode_batched(params, bw, np.zeros_like(uw))
        removal = float(np.abs(removed - truth).mean())
    return ReconstructionStats(float(np.abs(rec_w - xw).mean()), float(np.abs(rec_o - xo).mean()),
                               float(np.abs(eo).mean()), removal)


# ---------------------------------------------------------------------------
# disentanglement probe

@dataclass
class ProbeResult:
    r2_object_from_u: float
    r2_object_from_A: float
    per_target_u: dict
    per_target_A: dict
    style_acc_u: float
    style_acc_A: float
    degenerate_u: bool = False
    degenerate_A: bool = False


def _r2(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    sst = float(((y_true - y_true.mean()) ** 2).sum())
    if sst == 0:
        return 0.0
    return 1.0 - float(((y_true - y_pred) ** 2).sum()) / sst


def linear_probe(features: np.ndarray, targets: np.ndarray, styles: np.ndarray,
                 fit_fraction: float = 0.7) -> tuple[list[float], float, bool]:
    """OLS (with intercept) R^2 per target column and nearest-centroid style accuracy,
    fitted on the first ``fit_fraction`` of rows and scored on the rest."""
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    n_fit = int(round(fit_fraction * len(x)))
    if n_fit < 2 or len(x) - n_fit < 2:
        raise ValueError("probe needs at least two fit and two held-out rows")
    if np.all(x.std(axis=0) < 1e-12):
        return [0.0] * targets.shape[1], 0.0, True
    design = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(design[:n_fit], targets[:n_fit], rcond=None)
    pred = design[n_fit:] @ coef
    r2 = [_r2(targets[n_fit:, j], pred[:, j]) for j in range(targets.shape[1])]

    labels = np.unique(styles[:n_fit])
    cents = np.stack([x[:n_fit][styles[:n_fit] == c].mean(axis=0) for c in labels])
    d = ((x[n_fit:, None, :] - cents[None]) ** 2).sum(axis=2)
    acc = float((labels[d.argmin(axis=1)] == styles[n_fit:]).mean())
    return r2, acc, False


def probe_targets(samples: list[D.Sample]) -> tuple[np.ndarray, np.ndarray]:
    ys = np.array([[getattr(s.object, k) for k in PROBE_TARGETS] for s in samples], dtype=np.float64)
    styles = np.array([D.STYLES.index(s.object.style) for s in samples])
    return ys, styles


def disentanglement_probe(params: M.ParamStore, samples: list[D.Sample],
                          fit_fraction: float = 0.7) -> ProbeResult:
    """Linear read-out of the glasses parameters from u and from A (with-object samples)."""
    samples = [s for s in samples if s.object is not None and s.object.present]
    if len(samples) < 500:
        raise ValueError(f"the probe needs at least 500 held-out with-object samples, got {len(samples)}")
    ys, styles = probe_targets(samples)
    bg, obj = encode_batched(params, D.stack_images(samples))
    r2_u, acc_u, deg_u = linear_probe(obj, ys, styles, fit_fraction)
    r2_a, acc_a, deg_a = linear_probe(bg, ys, styles, fit_fraction)
    return ProbeResult(float(np.mean(r2_u)), float(np.mean(r2_a)),
                       dict(zip(PROBE_TARGETS, r2_u)), dict(zip(PROBE_TARGETS, r2_a)),
                       acc_u, acc_a, deg_u, deg_a)


# ---------------------------------------------------------------------------
# attribute drift

GRID_DARKNESS = np.linspace(*D.DARKNESS_RANGE, 8)
GRID_WIDTH = np.linspace(*D.WIDTH_RANGE, 8)
GRID_TINT = np.linspace(0.0, 1.0, 8)
DARKNESS_TOL = 0.15
WIDTH_TOL = 0.02


def grid_specs() -> list[D.ObjectSpec]:
    return [D.ObjectSpec(True, s, float(w), float(d), float(t))
            for s, w, d, t in itertools.product(D.STYLES, GRID_WIDTH, GRID_DARKNESS, GRID_TINT)]


def recover_object_spec(image: np.ndarray, background: np.ndarray) -> D.ObjectSpec:
    """Grid point whose rendering onto ``background`` is nearest to ``image`` in L1.

    Searches 3 styles x 8 widths x 8 darkness x 8 tint levels; ties resolve
    to the first candidate in (style, width, darkness, tint) order.
    """
    size = background.shape[-1]
    base = background.astype(np.float64)
    img = np.asarray(image, dtype=np.float64)
    tint_rgb = D.RIM_WARM[None, :] * (1 - GRID_TINT[:, None]) + D.RIM_COOL[None, :] * GRID_TINT[:, None]
    # rim colour per (darkness, tint), broadcast over pixels: (8, 8, 3, 1, 1)
    rc = (tint_rgb[None] * (1.0 - 0.6 * GRID_DARKNESS)[:, None, None])[..., None, None]
    best, best_err = None, np.inf
    for style in D.STYLES:
        alpha = np.array([D.lens_alpha(style, d) for d in GRID_DARKNESS])[:, None, None, None, None]
        for w in GRID_WIDTH:
            rim, lens = D.sprite_coverage(style, float(w), size)
            mask = (rim > 0) | (lens > 0)
            a_lens = lens * alpha
            out = base * (1 - a_lens) + 0.25 * rc * a_lens
            out = out * (1 - rim) + rc * rim
            out = np.where(mask, np.clip(out, 0, 1), base)
            err = np.abs(out - img).mean(axis=(2, 3, 4))
            k = np.unravel_index(np.argmin(err), err.shape)
            if err[k] < best_err:
                best_err = err[k]
                best = D.ObjectSpec(True, style, float(w), float(GRID_DARKNESS[k[0]]), float(GRID_TINT[k[1]]))
    return best


def spec_matches(recovered: D.ObjectSpec, truth: D.ObjectSpec) -> bool:
    return (recovered.style == truth.style
            and abs(recovered.darkness - truth.darkness) <= DARKNESS_TOL
            and abs(recovered.width - truth.width) <= WIDTH_TOL)


@dataclass
class DriftReport:
    match_rate: float
    mean_param_error: dict
    style_accuracy: float
    n_pairs: int


def drift_from_images(images: np.ndarray, donors: list[D.Sample], recipients: list[D.Sample]) -> DriftReport:
    """Score transplanted images given donors (true specs) and recipients (true scenes)."""
    matches, errs, styles = 0, {k: [] for k in PROBE_TARGETS}, 0
    size = images.shape[-1]
    for img, donor, rec in zip(images, donors, recipients):
        found = recover_object_spec(img, D.render_scene(rec.scene, size))
        truth = donor.object
        matches += spec_matches(found, truth)
        styles += found.style == truth.style
        for k in PROBE_TARGETS:
            errs[k].append(abs(getattr(found, k) - getattr(truth, k)))
    n = len(donors)
    return DriftReport(matches / n, {k: float(np.mean(v)) for k, v in errs.items()}, styles / n, n)


def drift_metric(params: M.ParamStore, donors: list[D.Sample], recipients: list[D.Sample],
                 n_pairs: int | None = None) -> DriftReport:
    """Transplant each donor's object code onto the paired recipient and
    check whether the recovered glasses match the donor's."""
    n = min(len(donors), len(recipients)) if n_pairs is None else n_pairs
    donors, recipients = donors[:n], recipients[:n]
    _, u = encode_batched(params, D.stack_images(donors))
    b, _ = encode_batched(params, D.stack_images(recipients))
    return drift_from_images(decode_batched(params, b, u), donors, recipients)


# ---------------------------------------------------------------------------
# logging

def append_csv(path, row: Mapping) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            w.writeheader()
        w.writerow(dict(row))


def flatten_report(report) -> dict:
    out = {}
    for k, v in asdict(report).items():
        if isinstance(v, dict):
            out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            out[k] = v
    return out
