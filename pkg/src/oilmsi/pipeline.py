"""End-to-end stages over a working directory.

Layout under ``workdir``::

    corpus/<dataset>/generator.ini, index.json, <split>/<sample>/{raw,dark}/
    processed/<dataset>/<split>.csv          data matrix (ROI pixels)
    processed/<dataset>/<split>.samples.csv  sample, label, first_row, rows
    models/   adulteration.json, adulteration_fda.txt, reheat.json, reheat_fda.txt
    reports/  calibration.csv, estimates.csv, gap_curve.csv, eigenvalues.csv,
              classifications.csv, evaluation.csv, assignments.csv

``dataset`` is ``adulteration`` or ``reheat``. Every random draw is derived
from ``RunConfig.seed``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import adulteration as adl
from . import corpus
from . import reheat as rh
from .cube import (
    ADULTERATION,
    HEAT_CYCLES,
    ClassLabel,
    CubeError,
    GeneratorParams,
    SpectralCube,
    _atomic_write,
    load_cube,
    read_generator_config,
    write_generator_config,
)
from .fda import FdaModel, fit_fda, project, save_fda
from .preprocess import (
    DEFAULT_ROI_SIDE,
    DataMatrix,
    Roi,
    build_data_matrix,
    center_roi,
    extract_roi,
    preprocess_capture,
    read_data_matrix_csv,
    write_data_matrix_csv,
)

DATASETS = ("adulteration", "reheat")
SPLITS = {"adulteration": ("train", "validation"), "reheat": ("train", "test")}
# synthetic frames carry white pixel noise; see README for the window choice
DEFAULT_PIPELINE_WINDOW = 3


@dataclass
class RunConfig:
    workdir: Path = Path(".")
    seed: int = 7
    roi: Optional[Roi] = None  # None: centered square of side min(30, w, h)
    window: int = DEFAULT_PIPELINE_WINDOW
    smoothing: str = "mean"
    stride: int = 3
    jitter: bool = False
    sigma_grid: Optional[tuple[int, float]] = None  # (points, decades)
    variance_floor: float = 0.99
    k_override: Optional[int] = None
    threshold: float = rh.COMPONENT_THRESHOLD
    normalize_rows: bool = False
    trials: int = 20
    reference_size: int = adl.DEFAULT_REFERENCE_SIZE
    replicates: int = corpus.REPLICATES
    train_images: int = 2
    test_images: int = 5
    adulteration_generator: Optional[Path] = None
    reheat_generator: Optional[Path] = None

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        checks = [
            (self.window >= 1, "window must be >= 1"),
            (self.stride >= 1, "stride must be >= 1"),
            (0.0 < self.variance_floor <= 1.0, "variance_floor must lie in (0, 1]"),
            (self.k_override is None or self.k_override >= 1, "k_override must be >= 1"),
            (self.threshold > 0, "threshold must be positive"),
            (self.trials >= 1, "trials must be >= 1"),
            (self.reference_size >= 0, "reference_size must be >= 0"),
            (self.replicates >= 2, "replicates must be >= 2"),
            (self.train_images >= 1 and self.test_images >= 1, "image counts must be >= 1"),
            (self.smoothing in ("mean", "median"), "smoothing must be mean or median"),
        ]
        if self.sigma_grid is not None:
            n, dec = self.sigma_grid
            checks.append((n >= 2 and dec > 0, "sigma grid needs >= 2 points and decades > 0"))
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    # paths
    def path(self, *parts) -> Path:
        return self.workdir.joinpath(*parts)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def roi_for(self, cube: SpectralCube) -> Roi:
        if self.roi is not None:
            return self.roi
        return center_roi(cube.width, cube.height, min(DEFAULT_ROI_SIDE, cube.width, cube.height))


@dataclass(frozen=True, eq=False)
class Sample:
    name: str
    label: Optional[ClassLabel]
    pixels: np.ndarray  # (rows, 9) ROI spectra after preprocessing


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


# --- corpus ------------------------------------------------------------------


def generator_params(cfg: RunConfig, dataset: str) -> GeneratorParams:
    override = getattr(cfg, f"{dataset}_generator")
    if override is not None:
        return read_generator_config(cfg.resolve(override))
    if dataset == "adulteration":
        return corpus.default_adulteration_params()
    return corpus.default_reheat_params()


def generate_corpus(cfg: RunConfig, datasets: Sequence[str] = DATASETS) -> None:
    for ds in datasets:
        params = generator_params(cfg, ds)
        if ds == "adulteration":
            plan = corpus.adulteration_plan(cfg.seed, cfg.replicates)
        else:
            plan = corpus.reheat_plan(cfg.seed, cfg.train_images, cfg.test_images)
        root = cfg.path("corpus", ds)
        write_generator_config(params, root / "generator.ini")
        corpus.write_corpus(root, plan, params)


# --- preprocessing -------------------------------------------------------------


def preprocess_cube(cfg: RunConfig, raw: SpectralCube, dark: Optional[SpectralCube]) -> np.ndarray:
    cube = preprocess_capture(raw, dark, cfg.window, cfg.smoothing)
    return extract_roi(cube, cfg.roi_for(cube))


def load_sample(cfg: RunConfig, cube_path, dark_path=None) -> Sample:
    """Load and preprocess one cube given by path (``raw`` + optional ``dark``)."""
    raw = load_cube(cfg.resolve(cube_path))
    dark = load_cube(cfg.resolve(dark_path)) if dark_path is not None else None
    return Sample(raw.sample_id, raw.label, preprocess_cube(cfg, raw, dark))


def preprocess_split(cfg: RunConfig, dataset: str, split: str) -> list[Sample]:
    samples = []
    for name, raw, dark in corpus.iter_samples(cfg.path("corpus", dataset), split):
        samples.append(Sample(name, raw.label, preprocess_cube(cfg, raw, dark)))
    if not samples:
        raise CubeError(f"no {split} samples in the {dataset} corpus")
    dm = build_data_matrix((s.pixels, s.label) for s in samples)
    out = cfg.path("processed", dataset)
    write_data_matrix_csv(dm, out / f"{split}.csv")
    rows, first = [], 0
    for s in samples:
        rows.append((s.name, str(s.label), first, len(s.pixels)))
        first += len(s.pixels)
    _write_csv(out / f"{split}.samples.csv", ("sample", "label", "first_row", "rows"), rows)
    return samples


def preprocess_all(cfg: RunConfig, datasets: Sequence[str] = DATASETS) -> None:
    for ds in datasets:
        for split in SPLITS[ds]:
            preprocess_split(cfg, ds, split)


def load_split(cfg: RunConfig, dataset: str, split: str) -> list[Sample]:
    base = cfg.path("processed", dataset)
    matrix, index = base / f"{split}.csv", base / f"{split}.samples.csv"
    if not matrix.exists() or not index.exists():
        raise FileNotFoundError(f"{matrix} not found (run preprocess first)")
    dm = read_data_matrix_csv(matrix)
    samples = []
    with open(index, newline="") as fh:
        for rec in csv.DictReader(fh):
            lo, n = int(rec["first_row"]), int(rec["rows"])
            if lo + n > dm.values.shape[0]:
                raise CubeError(f"{index}: sample {rec['sample']} overruns the data matrix")
            samples.append(Sample(rec["sample"], ClassLabel.parse(rec["label"]), dm.values[lo : lo + n]))
    return samples


def _data_matrix(samples: Sequence[Sample]) -> DataMatrix:
    return build_data_matrix((s.pixels, s.label) for s in samples)


def _require_kind(samples: Sequence[Sample], kind: str) -> None:
    for s in samples:
        if s.label is None or s.label.kind != kind:
            raise CubeError(f"sample {s.name} is not labelled with {kind}")


# --- adulteration --------------------------------------------------------------


def fit_adulteration(cfg: RunConfig, samples: Sequence[Sample]) -> adl.AdulterationModel:
    _require_kind(samples, ADULTERATION)
    fda = fit_fda(_data_matrix(samples), cfg.variance_floor, cfg.k_override)
    training = [(s.label.value, project(s.pixels, fda)) for s in samples]
    return adl.fit_model(training, fda, cfg.reference_size, corpus.derive_seed(cfg.seed, 10))


def train_adulteration(cfg: RunConfig) -> adl.AdulterationModel:
    model = fit_adulteration(cfg, load_split(cfg, "adulteration", "train"))
    adl.save_model(model, cfg.path("models", "adulteration.json"))
    save_fda(model.fda, cfg.path("models", "adulteration_fda.txt"))
    _atomic_write(
        cfg.path("reports", "calibration.csv"), "\n".join(adl.calibration_csv_lines(model)) + "\n"
    )
    return model


@dataclass(frozen=True)
class EstimateRow:
    sample: str
    true_fraction: Optional[float]
    normalized_distance: float
    estimate: float


def estimate_samples(model: adl.AdulterationModel, samples: Sequence[Sample]) -> list[EstimateRow]:
    rows = []
    for s in samples:
        y = adl.normalized_distance(s.pixels, model)
        x = float(np.clip(adl.invert_quadratic(y, model.coeff_a, model.coeff_b), 0.0, 1.0))
        truth = s.label.value if s.label is not None and s.label.kind == ADULTERATION else None
        rows.append(EstimateRow(s.name, truth, y, x))
    return rows


def estimates_mse(rows: Sequence[EstimateRow]) -> Optional[float]:
    known = [r for r in rows if r.true_fraction is not None]
    if not known:
        return None
    return adl.mse([r.estimate for r in known], [r.true_fraction for r in known])


def write_estimates(cfg: RunConfig, rows: Sequence[EstimateRow]) -> None:
    _write_csv(
        cfg.path("reports", "estimates.csv"),
        ("sample", "true_fraction", "normalized_distance", "estimate"),
        [
            (r.sample, "" if r.true_fraction is None else r.true_fraction, r.normalized_distance, r.estimate)
            for r in rows
        ],
    )


# --- reheat --------------------------------------------------------------------


def stride_subsample(pixels: np.ndarray, stride: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Every ``stride``-th pixel along both axes of a square ROI block.

    With ``rng`` the grid origin is jittered within the first stride cell.
    """
    side = math.isqrt(len(pixels))
    if side * side != len(pixels):
        raise CubeError("stride subsampling needs a square ROI block")
    oy, ox = (0, 0) if rng is None else (int(v) for v in rng.integers(stride, size=2))
    grid = pixels.reshape(side, side, -1)[oy::stride, ox::stride]
    return grid.reshape(-1, pixels.shape[1])


def _sigma_grid(cfg: RunConfig, points: np.ndarray) -> Optional[np.ndarray]:
    if cfg.sigma_grid is None:
        return None
    n, decades = cfg.sigma_grid
    return rh.default_sigma_grid(points, int(n), float(decades))


def fit_reheat(cfg: RunConfig, samples: Sequence[Sample]) -> rh.ReheatClassifier:
    _require_kind(samples, HEAT_CYCLES)
    fda = fit_fda(_data_matrix(samples), cfg.variance_floor, cfg.k_override)
    rng = np.random.default_rng(corpus.derive_seed(cfg.seed, 20)) if cfg.jitter else None
    training = [(s.label.value, project(stride_subsample(s.pixels, cfg.stride, rng), fda)) for s in samples]
    points = np.vstack([b for _, b in training])
    return rh.train_classifier(
        training,
        fda,
        seed=corpus.derive_seed(cfg.seed, 21),
        grid=_sigma_grid(cfg, points),
        threshold=cfg.threshold,
        normalize_rows=cfg.normalize_rows,
    )


def train_reheat(cfg: RunConfig) -> rh.ReheatClassifier:
    clf = fit_reheat(cfg, load_split(cfg, "reheat", "train"))
    rh.save_classifier(clf, cfg.path("models", "reheat.json"))
    save_fda(clf.fda, cfg.path("models", "reheat_fda.txt"))
    _write_csv(
        cfg.path("reports", "gap_curve.csv"),
        ("sigma", "eigengap"),
        [(float(s), "" if np.isnan(g) else float(g)) for s, g in zip(clf.sweep.sigmas, clf.sweep.gaps)],
    )
    _write_csv(
        cfg.path("reports", "eigenvalues.csv"),
        ("index", "eigenvalue", "below_threshold"),
        [(i + 1, float(v), int(v < cfg.threshold)) for i, v in enumerate(clf.eigenvalues)],
    )
    return clf


def classify_samples(clf: rh.ReheatClassifier, samples: Sequence[Sample]) -> list[tuple]:
    """``(sample, heat_cycles or '', qualitative_class, distance)`` per sample."""
    out = []
    for s in samples:
        q, d = rh.classify(s.pixels, clf)
        heat = s.label.value if s.label is not None and s.label.kind == HEAT_CYCLES else ""
        out.append((s.name, heat, q, d))
    return out


def write_classifications(cfg: RunConfig, rows: Sequence[tuple]) -> None:
    _write_csv(
        cfg.path("reports", "classifications.csv"),
        ("sample", "heat_cycles", "qualitative_class", "distance"),
        rows,
    )


@dataclass
class DatasetEvaluation:
    dataset: int
    heat_accuracies: list[float] = field(default_factory=list)
    qualitative_accuracies: list[float] = field(default_factory=list)
    assignments: dict[str, list[int]] = field(default_factory=dict)  # sample -> per-trial class
    expected: dict[str, int] = field(default_factory=dict)

    def resc(self) -> dict[str, float]:
        return {name: rh.repeatability(a).resc for name, a in self.assignments.items()}

    def resc_mean(self) -> float:
        return float(np.mean(list(self.resc().values())))


def _replicate(name: str) -> int:
    return int(name.rsplit("_r", 1)[1])


def evaluate(cfg: RunConfig, clf: rh.ReheatClassifier, samples: Sequence[Sample]) -> list[DatasetEvaluation]:
    """Repeat classification over random pixel draws.

    Test images sharing a replicate number form one dataset covering every
    heat class. Each trial draws as many pixels per image as the training
    stride grid holds, clusters the pooled draw for heat-class and
    qualitative accuracy, and classifies every image's draw on its own.
    """
    _require_kind(samples, HEAT_CYCLES)
    groups: dict[int, list[Sample]] = {}
    for s in samples:
        groups.setdefault(_replicate(s.name), []).append(s)
    results = []
    for d, members in sorted(groups.items()):
        ev = DatasetEvaluation(d)
        for s in members:
            ev.assignments[s.name] = []
            ev.expected[s.name] = clf.heat_to_qualitative.get(int(s.label.value), -1)
        for t in range(cfg.trials):
            rng = np.random.default_rng(corpus.derive_seed(cfg.seed, 30, d, t))
            pts, heat = [], []
            for s in members:
                side = math.isqrt(len(s.pixels))
                n = min(len(s.pixels), math.ceil(side / cfg.stride) ** 2)
                draw = s.pixels[np.sort(rng.choice(len(s.pixels), n, replace=False))]
                ev.assignments[s.name].append(rh.classify(draw, clf)[0])
                pts.append(project(draw, clf.fda))
                heat += [int(s.label.value)] * n
            pts = np.vstack(pts)
            kseed = corpus.derive_seed(cfg.seed, 31, d, t)
            if len(set(heat)) > 1:
                ev.heat_accuracies.append(rh.heat_class_accuracy(pts, heat, clf.sigma_opt, kseed))
                ev.qualitative_accuracies.append(rh.qualitative_accuracy(pts, heat, clf, kseed))
        results.append(ev)
    return results


EVALUATION_HEADER = (
    "dataset", "trials",
    "heat_accuracy_max", "heat_accuracy_min", "heat_accuracy_mode",
    "qualitative_accuracy_max", "qualitative_accuracy_min", "qualitative_accuracy_mode",
    "resc", "resc_min",
)


def _stats(values: Sequence[float]) -> tuple:
    if not values:
        return ("", "", "")
    return (float(max(values)), float(min(values)), rh.accuracy_mode(values))


def write_evaluation(cfg: RunConfig, results: Sequence[DatasetEvaluation]) -> None:
    rows = []
    for ev in results:
        resc = ev.resc()
        rows.append(
            (f"dataset_{ev.dataset}", cfg.trials, *_stats(ev.heat_accuracies),
             *_stats(ev.qualitative_accuracies), ev.resc_mean(), min(resc.values()))
        )
    total = sum(ev.resc_mean() for ev in results)
    rows.append(("sum", "", "", "", "", "", "", "", total, ""))
    _write_csv(cfg.path("reports", "evaluation.csv"), EVALUATION_HEADER, rows)

    detail = []
    for ev in results:
        for name, assigned in ev.assignments.items():
            for t, q in enumerate(assigned):
                detail.append((f"dataset_{ev.dataset}", name, ev.expected[name], t + 1, q))
    _write_csv(
        cfg.path("reports", "assignments.csv"),
        ("dataset", "sample", "expected_class", "trial", "qualitative_class"),
        detail,
    )
