"""Command-line front end: ``oilmsi <command> [options]``.

Exit status: 0 success, 2 usage, 3 I/O error, 4 validation error,
5 numerical error. Failures print one diagnostic line to stderr.
"""
from __future__ import annotations

import argparse
import configparser
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from . import adulteration as adl
from . import pipeline as pl
from . import reheat as rh
from .fda import FdaError
from .preprocess import Roi

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_NUMERICAL = 5

NUMERICAL_ERRORS = (
    FdaError,
    adl.CalibrationError,
    rh.GraphError,
    linalg.LinAlgError,
    np.linalg.LinAlgError,
    FloatingPointError,
)

# config-file key -> (RunConfig field, parser)
CONFIG_KEYS = {
    "seed": ("seed", int),
    "roi": ("roi", None),
    "window": ("window", int),
    "smoothing": ("smoothing", str),
    "stride": ("stride", int),
    "jitter": ("jitter", None),
    "sigma_grid": ("sigma_grid", None),
    "sigma-grid": ("sigma_grid", None),
    "variance_floor": ("variance_floor", float),
    "variance-floor": ("variance_floor", float),
    "k_override": ("k_override", int),
    "k-override": ("k_override", int),
    "threshold": ("threshold", float),
    "normalize_rows": ("normalize_rows", None),
    "trials": ("trials", int),
    "reference_size": ("reference_size", int),
    "replicates": ("replicates", int),
    "train_images": ("train_images", int),
    "test_images": ("test_images", int),
    "adulteration_generator": ("adulteration_generator", Path),
    "reheat_generator": ("reheat_generator", Path),
}


def parse_roi(text: str) -> Roi:
    """``x,y`` or ``x,y,side``."""
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise ValueError(f"bad ROI {text!r}; expected x,y[,side]") from None
    if len(parts) not in (2, 3):
        raise ValueError(f"bad ROI {text!r}; expected x,y[,side]")
    return Roi(*parts)


def parse_sigma_grid(text: str) -> tuple[int, float]:
    """``points`` or ``points,decades``."""
    parts = text.split(",")
    try:
        n = int(parts[0])
        decades = float(parts[1]) if len(parts) > 1 else rh.DEFAULT_GRID_DECADES
    except (ValueError, IndexError):
        raise ValueError(f"bad sigma grid {text!r}; expected points[,decades]") from None
    if len(parts) > 2:
        raise ValueError(f"bad sigma grid {text!r}; expected points[,decades]")
    return n, decades


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_run_config(path: Path) -> dict:
    """Parse a ``key = value`` run config (``#`` comments, no sections)."""
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ValueError(f"{path}: malformed config ({exc})") from None
    out = {}
    for key, raw in cp["run"].items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}: unknown config key {key!r}")
        name, conv = CONFIG_KEYS[key]
        raw = raw.strip()
        if name == "roi":
            out[name] = parse_roi(raw)
        elif name == "sigma_grid":
            out[name] = parse_sigma_grid(raw)
        elif name in ("jitter", "normalize_rows"):
            out[name] = _parse_bool(raw)
        else:
            out[name] = conv(raw)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--workdir", type=Path, default=Path("."), help="root for all relative paths")
    g.add_argument("--config", type=Path, help="key=value run config (flags override it)")
    g.add_argument("--seed", type=int)
    g.add_argument("--roi", help="x,y[,side]; default: centered 30x30")
    g.add_argument("--window", type=int, help="smoothing window in pixels")
    g.add_argument("--smoothing", choices=("mean", "median"))
    g.add_argument("--stride", type=int, help="reheat pixel subsampling stride")
    g.add_argument("--jitter", action="store_true", default=None, help="jitter the stride grid origin")
    g.add_argument("--sigma-grid", help="points[,decades] around the median pairwise distance")
    g.add_argument("--variance-floor", type=float)
    g.add_argument("--k-override", type=int)
    g.add_argument("--threshold", type=float, help="component-count eigenvalue threshold")
    g.add_argument("--normalize-rows", action="store_true", default=None)
    g.add_argument("--trials", type=int)

    p = argparse.ArgumentParser(prog="oilmsi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-corpus", parents=[common], help="write the synthetic corpora")
    s.add_argument("--dataset", choices=(*pl.DATASETS, "all"), default="all")

    s = sub.add_parser("preprocess", parents=[common], help="dark-subtract, smooth, extract ROI data matrices")
    s.add_argument("--dataset", choices=(*pl.DATASETS, "all"), default="all")

    sub.add_parser("train-adulteration", parents=[common], help="fit FDA and the distance calibration")

    s = sub.add_parser("estimate", parents=[common], help="estimate adulteration fractions")
    s.add_argument("cube", nargs="?", help="raw cube directory (default: the validation split)")
    s.add_argument("--dark", help="dark-frame cube directory for CUBE")
    s.add_argument("--model", default="models/adulteration.json")

    sub.add_parser("train-reheat", parents=[common], help="fit FDA and the spectral-clustering classifier")

    s = sub.add_parser("classify", parents=[common], help="assign qualitative reheat classes")
    s.add_argument("cube", nargs="?", help="raw cube directory (default: the test split)")
    s.add_argument("--dark", help="dark-frame cube directory for CUBE")
    s.add_argument("--model", default="models/reheat.json")

    s = sub.add_parser("evaluate", parents=[common], help="repeat-classification accuracy and ReSc report")
    s.add_argument("--model", default="models/reheat.json")
    return p


def make_config(args: argparse.Namespace) -> pl.RunConfig:
    values: dict = {}
    if args.config is not None:
        path = args.config if args.config.is_absolute() else args.workdir / args.config
        values.update(read_run_config(path))
    flags = {
        "seed": args.seed,
        "roi": parse_roi(args.roi) if args.roi else None,
        "window": args.window,
        "smoothing": args.smoothing,
        "stride": args.stride,
        "jitter": args.jitter,
        "sigma_grid": parse_sigma_grid(args.sigma_grid) if args.sigma_grid else None,
        "variance_floor": args.variance_floor,
        "k_override": args.k_override,
        "threshold": args.threshold,
        "normalize_rows": args.normalize_rows,
        "trials": args.trials,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return pl.RunConfig(workdir=args.workdir, **values)


def _datasets(choice: str) -> Sequence[str]:
    return pl.DATASETS if choice == "all" else (choice,)


def run(args: argparse.Namespace) -> int:
    cfg = make_config(args)
    cmd = args.command
    if cmd == "gen-corpus":
        pl.generate_corpus(cfg, _datasets(args.dataset))
        print(f"corpus written to {cfg.path('corpus')}")
    elif cmd == "preprocess":
        pl.preprocess_all(cfg, _datasets(args.dataset))
        print(f"data matrices written to {cfg.path('processed')}")
    elif cmd == "train-adulteration":
        m = pl.train_adulteration(cfg)
        print(f"Y = {m.coeff_a:.4f} X^2 + {m.coeff_b:.4f} X  (R^2 = {m.r_squared:.4f}, k = {m.fda.k})")
    elif cmd == "estimate":
        model = adl.load_model(cfg.resolve(args.model))
        if args.cube is not None:
            samples = [pl.load_sample(cfg, args.cube, args.dark)]
        else:
            samples = pl.load_split(cfg, "adulteration", "validation")
        rows = pl.estimate_samples(model, samples)
        pl.write_estimates(cfg, rows)
        for r in rows:
            print(f"{r.sample}\t{r.estimate:.4f}")
        err = pl.estimates_mse(rows)
        if err is not None:
            print(f"MSE {err:.6f}")
    elif cmd == "train-reheat":
        c = pl.train_reheat(cfg)
        print(
            f"sigma_opt = {c.sigma_opt:.6g}, qualitative classes = {c.n_qualitative}, "
            f"heat -> class {c.heat_to_qualitative}"
        )
    elif cmd == "classify":
        clf = rh.load_classifier(cfg.resolve(args.model))
        if args.cube is not None:
            samples = [pl.load_sample(cfg, args.cube, args.dark)]
        else:
            samples = pl.load_split(cfg, "reheat", "test")
        rows = pl.classify_samples(clf, samples)
        pl.write_classifications(cfg, rows)
        for name, _, q, d in rows:
            print(f"{name}\tclass {q}\tdistance {d:.4f}")
    elif cmd == "evaluate":
        clf = rh.load_classifier(cfg.resolve(args.model))
        results = pl.evaluate(cfg, clf, pl.load_split(cfg, "reheat", "test"))
        pl.write_evaluation(cfg, results)
        for ev in results:
            print(
                f"dataset_{ev.dataset}: heat mode {rh.accuracy_mode(ev.heat_accuracies):.3f}, "
                f"qualitative mode {rh.accuracy_mode(ev.qualitative_accuracies):.3f}, "
                f"ReSc {ev.resc_mean():.3f}"
            )
        print(f"ReSc sum {sum(ev.resc_mean() for ev in results):.3f} over {len(results)} datasets")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return run(args)
    except NUMERICAL_ERRORS as exc:
        print(f"oilmsi: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, UnicodeDecodeError) as exc:
        print(f"oilmsi: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"oilmsi: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
