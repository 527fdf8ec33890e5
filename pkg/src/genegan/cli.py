"""``genegan`` command-line front end.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from . import data as D
from . import eval as E
from . import model as M
from . import ppm
from . import tensor as T
from . import train as TR
from . import transfig as X

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
EVAL_SEED = 1007


class UsageError(Exception):
    pass


class InputDataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files

def _coerce(key: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw, 0)
        return typ(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines with ``#`` comments; keys must be TrainConfig fields."""
    hints = typing.get_type_hints(TR.TrainConfig)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value, hints[key])
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# helpers

def _load_params(path) -> M.ParamStore:
    return TR.load_checkpoint(path).params


def _read_image(path) -> np.ndarray:
    try:
        return ppm.load_image(path)
    except OSError as exc:
        raise InputDataError(f"cannot read image {path}: {exc.strerror or exc}") from None


def _write_grid(path, panels, columns: int) -> None:
    ppm.save_image(path, ppm.montage(panels, columns))


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    values = load_config(args.config) if args.config else {}
    for key in ("steps", "seed", "mode", "image_size", "batch_size", "checkpoint_every"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        config = TR.TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(f"invalid config: {exc}") from None
    size = config.image_size
    if args.data:
        root = Path(args.data)
        try:
            w, o = D.ingest_folder(root / "with", root / "without", size)
        except ValueError as exc:
            raise InputDataError(str(exc)) from None
    else:
        try:
            w, o = D.make_dataset(args.synthetic, args.synthetic, size, args.data_seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    resume = TR.load_checkpoint(args.resume) if args.resume else None
    ckpt, _ = TR.train(config, D.stack_images(w), D.stack_images(o), out_dir=args.out, resume=resume)
    print(f"trained {ckpt.step} steps; checkpoint {Path(args.out) / 'final.ggck'}")
    return EXIT_OK


def cmd_remove(args) -> int:
    params = _load_params(args.ckpt)
    ppm.save_image(args.out, X.remove(params, _read_image(args.inp)))
    return EXIT_OK


def cmd_transplant(args) -> int:
    params = _load_params(args.ckpt)
    out = X.transplant(params, _read_image(args.donor), _read_image(args.recipient))
    ppm.save_image(args.out, out)
    return EXIT_OK


def cmd_swap(args) -> int:
    params = _load_params(args.ckpt)
    panels = X.swap_panels(params, _read_image(args.a), _read_image(args.b))
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_grid(outdir / "swap.ppm", panels, 6)
    return EXIT_OK


def cmd_interpolate(args) -> int:
    params = _load_params(args.ckpt)
    donors = [_read_image(p) for p in args.donors]
    try:
        frames, columns = X.interpolate_frames(params, donors, _read_image(args.recipient), args.steps)
    except ValueError as exc:
        if isinstance(exc, X.ImageSizeError):
            raise
        raise UsageError(str(exc)) from None
    _write_grid(args.out, frames, columns)
    return EXIT_OK


def cmd_scale(args) -> int:
    params = _load_params(args.ckpt)
    factors = _floats(args.factors)
    if not factors:
        raise UsageError("--factors needs at least one value")
    _write_grid(args.out, X.scale_frames(params, _read_image(args.inp), factors), len(factors))
    return EXIT_OK


def _eval_sets(params: M.ParamStore, n_with: int, n_without: int, seed: int):
    try:
        return D.make_dataset(n_with, n_without, params.config.image_size, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _report(result, csv_path) -> None:
    row = E.flatten_report(result)
    print(json.dumps(row, sort_keys=True))
    if csv_path:
        E.append_csv(csv_path, row)


def cmd_eval_probe(args) -> int:
    params = _load_params(args.ckpt)
    w, _ = _eval_sets(params, args.n, 2, args.seed)
    try:
        result = E.disentanglement_probe(params, w)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _report(result, args.csv)
    return EXIT_OK


def cmd_eval_drift(args) -> int:
    params = _load_params(args.ckpt)
    w, o = _eval_sets(params, args.pairs, args.pairs, args.seed)
    _report(E.drift_metric(params, w, o), args.csv)
    return EXIT_OK


GRADCHECK_MODEL = M.ModelConfig(image_size=8, c_bg=3, c_obj=2, base_width=2, dtype="float64")


def gradcheck_suite(seed: int = 0, max_per_tensor: int | None = 6) -> dict[str, E.GradCheckReport]:
    """Finite-difference check of the full generator and discriminator losses
    (both modes) on a float64 8x8 model with 2662 parameters."""
    cfg = GRADCHECK_MODEL
    params = M.ParamStore.initialize(cfg, seed)
    rng = np.random.default_rng(seed)
    x_Au = T.Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
    x_B0 = T.Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
    weights = M.LossWeights()
    reports = {}
    for mode, forward in (("genegan", M.four_child_forward), ("stacked", M.stacked_forward)):
        def g_loss():
            return M.generator_loss(forward(x_Au, x_B0, params, training=True), x_Au, x_B0,
                                    params, weights, training=True)[0]

        def d_loss():
            return M.discriminator_loss(forward(x_Au, x_B0, params, training=True), x_Au, x_B0,
                                        params, training=True)[0]

        reports[f"{mode}/generator"] = E.gradient_check(
            g_loss, dict(params.named_parameters()), max_per_tensor=max_per_tensor)
        reports[f"{mode}/discriminator"] = E.gradient_check(
            d_loss, dict(params.named_parameters(M.DISCRIMINATOR_GROUPS)), max_per_tensor=max_per_tensor)
    return reports


def cmd_gradcheck(args) -> int:
    ok = True
    for name, rep in gradcheck_suite(args.seed, args.max_per_tensor or None).items():
        passed = rep.pass_fraction >= 0.999 and rep.n_checked > 0
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: checked={rep.n_checked} kink={rep.n_kink} "
              f"failed={rep.n_failed} max_rel_err={rep.max_rel_err:.3g}")
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genegan", description="GeneGAN object transfiguration")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key = value config file (TrainConfig fields)")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory with with/ and without/ subdirectories of PPM/PGM files")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N with-object and N without-object images")
    t.add_argument("--out", required=True, help="output directory for checkpoints and metrics.csv")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=("genegan", "stacked"))
    t.add_argument("--image-size", dest="image_size", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--data-seed", type=int, default=7, help="seed of the synthetic dataset (default 7)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("remove", help="decode an image with its object code zeroed")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_remove)

    tp = sub.add_parser("transplant", help="put the donor's object on the recipient")
    tp.add_argument("--ckpt", required=True)
    tp.add_argument("--donor", required=True)
    tp.add_argument("--recipient", required=True)
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=cmd_transplant)

    s = sub.add_parser("swap", help="exchange objects between two images (6-panel grid)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--outdir", required=True)
    s.set_defaults(func=cmd_swap)

    i = sub.add_parser("interpolate", help="mix the object codes of 1-4 donors on a recipient")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--donors", nargs="+", required=True)
    i.add_argument("--recipient", required=True)
    i.add_argument("--steps", type=int, default=5)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_interpolate)

    sc = sub.add_parser("scale", help="decode an image with its object code scaled by each factor")
    sc.add_argument("--ckpt", required=True)
    sc.add_argument("--in", dest="inp", required=True)
    sc.add_argument("--factors", required=True, help="comma-separated, e.g. 0,0.5,1,1.5")
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_scale)

    ep = sub.add_parser("eval-probe", help="linear probes from u and A to the glasses parameters")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--n", type=int, default=1000, help="held-out with-object samples (>= 500)")
    ep.add_argument("--seed", type=int, default=EVAL_SEED)
    ep.add_argument("--csv", help="append the result to this CSV file")
    ep.set_defaults(func=cmd_eval_probe)

    ed = sub.add_parser("eval-drift", help="attribute drift of transplanted objects")
    ed.add_argument("--ckpt", required=True)
    ed.add_argument("--pairs", type=int, default=200)
    ed.add_argument("--seed", type=int, default=EVAL_SEED)
    ed.add_argument("--csv", help="append the result to this CSV file")
    ed.set_defaults(func=cmd_eval_drift)

    g = sub.add_parser("gradcheck", help="finite-difference check of the loss graphs on an 8x8 model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-per-tensor", type=int, default=6, help="0 checks every scalar")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"genegan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ckio.CheckpointError as exc:
        print(f"genegan: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (InputDataError, D.DataError, ppm.ImageFormatError, X.ImageSizeError, OSError) as exc:
        print(f"genegan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
