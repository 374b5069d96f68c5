"""Dark-frame removal, spatial smoothing, ROI extraction and data-matrix assembly."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .cube import WAVELENGTHS, ClassLabel, CubeError, SpectralCube, _atomic_write

DEFAULT_ROI_SIDE = 30
DEFAULT_WINDOW = 30


@dataclass(frozen=True)
class Roi:
    """Square region of interest; ``x`` is the left column, ``y`` the top row."""

    x: int
    y: int
    side: int = DEFAULT_ROI_SIDE

    def check(self, width: int, height: int) -> None:
        if self.side < 1 or self.x < 0 or self.y < 0:
            raise CubeError(f"invalid ROI {self}")
        if self.x + self.side > width or self.y + self.side > height:
            raise CubeError(f"ROI {self} outside {width}x{height} image")


def center_roi(width: int, height: int, side: int = DEFAULT_ROI_SIDE) -> Roi:
    roi = Roi((width - side) // 2, (height - side) // 2, side)
    roi.check(width, height)
    return roi


def subtract_dark(raw: SpectralCube, dark: SpectralCube) -> SpectralCube:
    """Remove the dark frame band by band; negative results are clamped to 0."""
    if raw.data.shape != dark.data.shape:
        raise CubeError(f"raw/dark dimension mismatch: {raw.data.shape} vs {dark.data.shape}")
    if np.issubdtype(raw.data.dtype, np.integer) and np.issubdtype(dark.data.dtype, np.integer):
        diff = raw.data.astype(np.int64) - dark.data.astype(np.int64)
        out = np.clip(diff, 0, None).astype(raw.data.dtype)
    else:
        out = np.clip(raw.data.astype(float) - dark.data.astype(float), 0.0, None)
    return raw.replace(out)


def smooth(cube: SpectralCube, window: int = DEFAULT_WINDOW, method: str = "mean") -> SpectralCube:
    """Per-band ``window`` x ``window`` moving average (or median) with edge replication.

    For an even window the target pixel has ``window // 2`` neighbours above
    and to the left and one fewer below and to the right. Output is float64.
    """
    if window < 1:
        raise CubeError("window must be >= 1")
    if window > min(cube.width, cube.height):
        raise CubeError(f"window {window} larger than {cube.width}x{cube.height} image")
    data = cube.data.astype(np.float64)
    # scipy anchors even sizes with size // 2 pixels before the target
    if method == "mean":
        out = ndimage.uniform_filter(data, size=(1, window, window), mode="nearest")
    elif method == "median":
        out = ndimage.median_filter(data, size=(1, window, window), mode="nearest")
    else:
        raise ValueError(f"unknown smoothing method {method!r}")
    # uniform_filter accumulates rounding error; keep results inside the input range
    out = np.clip(out, data.min(), data.max())
    return cube.replace(out)


def extract_roi(cube: SpectralCube, roi: Roi) -> np.ndarray:
    """Return the ROI's pixel spectra as a ``(side**2, 9)`` array in row-major order."""
    roi.check(cube.width, cube.height)
    block = cube.data[:, roi.y : roi.y + roi.side, roi.x : roi.x + roi.side]
    return block.reshape(cube.data.shape[0], -1).T.astype(np.float64)


def to_8bit(values: np.ndarray, bit_depth: int) -> np.ndarray:
    """Rescale counts of the given bit depth onto the 0-255 range."""
    return np.asarray(values, dtype=float) * (255.0 / (2**bit_depth - 1))


@dataclass(eq=False)
class DataMatrix:
    """Pixel spectra (rows) by bands (columns) with one class label per row.

    Labels are held as integer ``codes`` into the ``classes`` list.
    """

    values: np.ndarray
    codes: np.ndarray
    classes: list[ClassLabel]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.codes = np.asarray(self.codes, dtype=np.intp)
        if self.values.ndim != 2:
            raise ValueError("data matrix values must be 2-D")
        if self.codes.shape != (self.values.shape[0],):
            raise ValueError("every row needs exactly one label")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= len(self.classes)):
            raise ValueError("label code out of range")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def labels(self) -> list[ClassLabel]:
        return [self.classes[c] for c in self.codes]

    def rows_of(self, label: ClassLabel) -> np.ndarray:
        return self.values[self.codes == self.classes.index(label)]

    def with_values(self, values: np.ndarray) -> "DataMatrix":
        return DataMatrix(values, self.codes, list(self.classes))


def build_data_matrix(blocks: Iterable[tuple[np.ndarray, ClassLabel]]) -> DataMatrix:
    """Stack labelled pixel blocks vertically, preserving block order."""
    values, codes, classes = [], [], []
    ncols = None
    for block, label in blocks:
        block = np.atleast_2d(np.asarray(block, dtype=float))
        if ncols is None:
            ncols = block.shape[1]
        elif block.shape[1] != ncols:
            raise ValueError(f"column-count mismatch: {block.shape[1]} != {ncols}")
        if label not in classes:
            classes.append(label)
        values.append(block)
        codes.append(np.full(block.shape[0], classes.index(label), dtype=np.intp))
    if not values:
        raise ValueError("no blocks")
    return DataMatrix(np.vstack(values), np.concatenate(codes), classes)


@dataclass(frozen=True, eq=False)
class SpectralSignature:
    mean: np.ndarray
    wavelengths: np.ndarray


def mean_signature(block: np.ndarray, wavelengths: Sequence[float] = WAVELENGTHS) -> SpectralSignature:
    block = np.atleast_2d(np.asarray(block, dtype=float))
    if block.shape[0] == 0:
        raise ValueError("empty block")
    wavelengths = np.asarray(wavelengths, dtype=float)
    if wavelengths.shape != (block.shape[1],):
        raise ValueError("wavelength count must equal band count")
    return SpectralSignature(block.mean(axis=0), wavelengths)


def write_data_matrix_csv(dm: DataMatrix, path) -> None:
    n = dm.values.shape[1]
    header = [f"band_{i + 1}" for i in range(n)] + ["label_kind", "label_value"]
    lines = [",".join(header)]
    kinds = [c.kind for c in dm.classes]
    vals = [repr(c.value) for c in dm.classes]
    for row, code in zip(dm.values, dm.codes):
        lines.append(",".join([*map(repr, row.tolist()), kinds[code], vals[code]]))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_data_matrix_csv(path) -> DataMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-2:] != ["label_kind", "label_value"]:
            raise CubeError(f"{path}: missing data-matrix header")
        n = len(header) - 2
        rows, labels = [], []
        for rec in reader:
            if not rec:
                continue
            if len(rec) != n + 2:
                raise CubeError(f"{path}: row has {len(rec)} fields, expected {n + 2}")
            rows.append([float(v) for v in rec[:n]])
            labels.append(ClassLabel(rec[n], float(rec[n + 1])))
    if not rows:
        raise CubeError(f"{path}: empty data matrix")
    classes = list(dict.fromkeys(labels))
    index = {c: i for i, c in enumerate(classes)}
    return DataMatrix(np.array(rows), np.array([index[l] for l in labels]), classes)


def preprocess_capture(
    raw: SpectralCube,
    dark: SpectralCube | None,
    window: int = DEFAULT_WINDOW,
    method: str = "mean",
) -> SpectralCube:
    """Dark subtraction followed by smoothing of the full frame."""
    cube = subtract_dark(raw, dark) if dark is not None else raw
    if window > 1:
        cube = smooth(cube, window, method)
    return cube

