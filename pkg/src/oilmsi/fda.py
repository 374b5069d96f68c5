"""Fisher discriminant analysis for labelled pixel spectra.

Solves ``S_b v = lambda S_w v`` by Cholesky whitening of the within-class
scatter (with a small ridge only when S_w is singular), then keeps the
leading ``k`` discriminant directions.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import linalg

from .cube import ClassLabel, _atomic_write
from .preprocess import DataMatrix

SW_REGULARIZATION = 1e-8
ZERO_EIGENVALUE_RATIO = 1e-10


class FdaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScatterPair:
    within: np.ndarray
    between: np.ndarray
    class_means: np.ndarray  # (classes, n)
    grand_mean: np.ndarray
    classes: tuple[ClassLabel, ...]


@dataclass(frozen=True, eq=False)
class FdaModel:
    projection: np.ndarray  # (n, k)
    eigenvalues: np.ndarray  # all n, descending
    k: int
    retained_variance_fraction: float
    class_order: tuple[ClassLabel, ...]

    @property
    def n_features(self) -> int:
        return self.projection.shape[0]


def compute_scatter(data: DataMatrix) -> ScatterPair:
    """Class means, grand mean, within- and between-class scatter.

    The grand mean is taken over all rows and ``S_b`` is the unweighted sum
    of the per-class outer products of ``mu_p - mu``.
    """
    if len(data.classes) < 2:
        raise FdaError("need at least two classes")
    X = data.values
    n = X.shape[1]
    grand_mean = X.mean(axis=0)
    means = np.empty((len(data.classes), n))
    Sw = np.zeros((n, n))
    Sb = np.zeros((n, n))
    for p, label in enumerate(data.classes):
        rows = X[data.codes == p]
        if rows.shape[0] < 2:
            raise FdaError(f"class {label} has fewer than 2 rows")
        mu = rows.mean(axis=0)
        centered = rows - mu
        Sw += centered.T @ centered
        d = (mu - grand_mean)[:, None]
        Sb += d @ d.T
        means[p] = mu
    Sw = 0.5 * (Sw + Sw.T)
    return ScatterPair(Sw, Sb, means, grand_mean, tuple(data.classes))


def _fix_signs(V: np.ndarray) -> np.ndarray:
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            V[:, j] = -col
    return V


def solve_fda(
    scatter: ScatterPair, variance_floor: float = 0.99, k_override: Optional[int] = None
) -> FdaModel:
    """Generalized eigendecomposition of the scatter pair.

    ``k`` is the smallest number of leading eigenvalues whose share of the
    positive spectrum reaches ``variance_floor`` unless ``k_override`` is set.
    Eigenvectors have unit Euclidean norm and a positive first nonzero entry.
    """
    if not 0.0 < variance_floor <= 1.0:
        raise FdaError("variance_floor must lie in (0, 1]")
    Sw, Sb = scatter.within, scatter.between
    n = Sw.shape[0]
    if k_override is not None and not 1 <= k_override <= n:
        raise FdaError(f"k_override must be in 1..{n}")

    trace = np.trace(Sw)
    if not trace > 0:
        raise FdaError("within-class scatter is singular")
    try:
        L = linalg.cholesky(Sw, lower=True)
    except linalg.LinAlgError:
        # rescue a singular S_w with a small ridge
        Sw_reg = Sw + (SW_REGULARIZATION * trace / n) * np.eye(n)
        try:
            L = linalg.cholesky(Sw_reg, lower=True)
        except linalg.LinAlgError as exc:
            raise FdaError("within-class scatter is singular") from exc

    # M = L^-1 S_b L^-T is symmetric with the same eigenvalues as the pencil
    A = linalg.solve_triangular(L, Sb, lower=True)
    M = linalg.solve_triangular(L, A.T, lower=True).T
    M = 0.5 * (M + M.T)
    evals, U = np.linalg.eigh(M)
    order = np.argsort(evals)[::-1]
    evals, U = evals[order], U[:, order]
    V = linalg.solve_triangular(L.T, U, lower=False)
    V /= np.linalg.norm(V, axis=0)
    V = _fix_signs(V)

    lam_max = evals[0]
    if not lam_max > 0:
        raise FdaError("no discriminative direction")
    positive = np.where(evals > ZERO_EIGENVALUE_RATIO * lam_max, evals, 0.0)
    share = np.cumsum(positive) / positive.sum()
    if k_override is not None:
        k = k_override
    else:
        k = int(np.searchsorted(share, variance_floor - 1e-12) + 1)
        k = min(k, n)
    return FdaModel(V[:, :k].copy(), evals, k, float(share[k - 1]), scatter.classes)


def fit_fda(
    data: DataMatrix, variance_floor: float = 0.99, k_override: Optional[int] = None
) -> FdaModel:
    return solve_fda(compute_scatter(data), variance_floor, k_override)


def project(
    data: Union[DataMatrix, np.ndarray], model: FdaModel
) -> Union[DataMatrix, np.ndarray]:
    """Map rows into the discriminant space (``Y = X W``); labels carry through."""
    values = data.values if isinstance(data, DataMatrix) else np.asarray(data, dtype=float)
    if values.ndim != 2 or values.shape[1] != model.n_features:
        raise FdaError(
            f"dimension mismatch: data has {values.shape[-1]} columns, model expects {model.n_features}"
        )
    Y = values @ model.projection
    return data.with_values(Y) if isinstance(data, DataMatrix) else Y


# --- text format -------------------------------------------------------------


def _row(key: str, values) -> str:
    return ",".join([key, *(repr(float(v)) for v in values)])


def fda_to_lines(model: FdaModel) -> list[str]:
    lines = [
        "# oilmsi fda model",
        f"k,{model.k}",
        f"n,{model.n_features}",
        f"retained_variance_fraction,{model.retained_variance_fraction!r}",
        "class_order," + ";".join(str(c) for c in model.class_order),
        _row("eigenvalues", model.eigenvalues),
    ]
    lines += [_row(f"w_{i + 1}", row) for i, row in enumerate(model.projection)]
    return lines


def fda_from_lines(lines: list[str]) -> FdaModel:
    fields: dict[str, list[str]] = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(",")
        fields[key] = rest.split(",") if rest else []
    try:
        k = int(fields["k"][0])
        n = int(fields["n"][0])
        retained = float(fields["retained_variance_fraction"][0])
        order_text = ",".join(fields["class_order"])
        order = tuple(ClassLabel.parse(t) for t in order_text.split(";") if t)
        evals = np.array([float(v) for v in fields["eigenvalues"]])
        W = np.array([[float(v) for v in fields[f"w_{i + 1}"]] for i in range(n)])
    except (KeyError, IndexError, ValueError) as exc:
        raise FdaError(f"malformed FDA model text ({exc})") from exc
    if W.shape != (n, k):
        raise FdaError(f"projection shape {W.shape} != ({n}, {k})")
    return FdaModel(W, evals, k, retained, order)


def save_fda(model: FdaModel, path) -> None:
    _atomic_write(Path(path), "\n".join(fda_to_lines(model)) + "\n")


def load_fda(path) -> FdaModel:
    return fda_from_lines(Path(path).read_text().splitlines())
