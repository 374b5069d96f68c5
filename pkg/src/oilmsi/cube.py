"""Nine-band transmittance cubes: data model, on-disk format and a capture simulator.

A cube is stored as a directory holding ``manifest.json`` plus one binary
PGM (P5, 16-bit big-endian) file per band.
"""
from __future__ import annotations

import configparser
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

N_BANDS = 9
DEFAULT_BIT_DEPTH = 10
MANIFEST_NAME = "manifest.json"

ADULTERATION = "adulteration_fraction"
HEAT_CYCLES = "heat_cycles"
MAX_HEAT_CYCLES = 5


class CubeError(ValueError):
    """A cube, manifest or generator config violates the data model."""


@dataclass(frozen=True)
class BandSpec:
    index: int
    dominant_wavelength: float
    band_low: float
    band_high: float
    half_power_bandwidth: float

    def __post_init__(self):
        if not self.band_low < self.dominant_wavelength < self.band_high:
            raise CubeError(
                f"band {self.index}: need band_low < dominant_wavelength < band_high"
            )


# LED bank of the imaging rig (nm).
LED_BANDS: tuple[BandSpec, ...] = (
    BandSpec(1, 405, 375, 425, 10),
    BandSpec(2, 430, 385, 525, 50),
    BandSpec(3, 505, 450, 550, 20),
    BandSpec(4, 590, 520, 620, 10),
    BandSpec(5, 660, 630, 685, 20),
    BandSpec(6, 740, 690, 760, 20),
    BandSpec(7, 850, 825, 875, 10),
    BandSpec(8, 890, 865, 915, 10),
    BandSpec(9, 950, 915, 1000, 20),
)

WAVELENGTHS = np.array([b.dominant_wavelength for b in LED_BANDS], dtype=float)


@dataclass(frozen=True, order=True)
class ClassLabel:
    """Ground-truth class of a sample.

    ``kind`` is either ``"adulteration_fraction"`` (value in [0, 1]) or
    ``"heat_cycles"`` (integer 0-5, 0 meaning unheated oil).
    """

    kind: str
    value: float

    def __post_init__(self):
        if self.kind == ADULTERATION:
            if not 0.0 <= self.value <= 1.0:
                raise CubeError(f"adulteration fraction {self.value} outside [0, 1]")
            object.__setattr__(self, "value", float(self.value))
        elif self.kind == HEAT_CYCLES:
            if float(self.value) != int(self.value) or not 0 <= self.value <= MAX_HEAT_CYCLES:
                raise CubeError(f"heat cycles must be an integer in 0..{MAX_HEAT_CYCLES}")
            object.__setattr__(self, "value", int(self.value))
        else:
            raise CubeError(f"unknown label kind {self.kind!r}")

    @classmethod
    def adulteration(cls, fraction: float) -> "ClassLabel":
        return cls(ADULTERATION, fraction)

    @classmethod
    def heat(cls, cycles: int) -> "ClassLabel":
        return cls(HEAT_CYCLES, cycles)

    def __str__(self) -> str:
        if self.kind == ADULTERATION:
            return f"{self.kind}:{self.value!r}"
        return f"{self.kind}:{self.value:d}"

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        try:
            kind, value = text.strip().split(":")
            return cls(kind.strip(), float(value))
        except ValueError as exc:
            raise CubeError(f"bad class label {text!r}") from exc

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassLabel":
        return cls(d["kind"], d["value"])


@dataclass(eq=False)
class SpectralCube:
    """One sample's stack of band images, shape ``(9, height, width)``.

    Captured cubes hold integer counts; preprocessed cubes may hold floats.
    """

    data: np.ndarray
    band_specs: tuple[BandSpec, ...] = LED_BANDS
    sample_id: str = "sample"
    label: Optional[ClassLabel] = None
    bit_depth: int = DEFAULT_BIT_DEPTH

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.band_specs = tuple(self.band_specs)
        if self.data.ndim != 3:
            raise CubeError(f"cube data must be (bands, height, width), got {self.data.shape}")
        if self.data.shape[0] != N_BANDS:
            raise CubeError(f"band count != {N_BANDS} (got {self.data.shape[0]})")
        if len(self.band_specs) != N_BANDS:
            raise CubeError(f"band spec count != {N_BANDS}")
        if [b.index for b in self.band_specs] != list(range(1, N_BANDS + 1)):
            raise CubeError("band indices must be 1..9 in order")
        if not 1 <= self.bit_depth <= 16:
            raise CubeError(f"unsupported bit depth {self.bit_depth}")
        if self.data.size:
            lo, hi = self.data.min(), self.data.max()
            if lo < 0:
                raise CubeError("negative pixel value")
            if hi > self.max_value:
                raise CubeError(f"pixel value {hi} exceeds {self.bit_depth}-bit range")

    @property
    def max_value(self) -> int:
        return 2**self.bit_depth - 1

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def replace(self, data: np.ndarray) -> "SpectralCube":
        return SpectralCube(data, self.band_specs, self.sample_id, self.label, self.bit_depth)

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return (
            self.band_specs == other.band_specs
            and self.sample_id == other.sample_id
            and self.label == other.label
            and self.bit_depth == other.bit_depth
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


# --- PGM ---------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise CubeError("PGM image must be 2-D")
    if not np.issubdtype(image.dtype, np.integer):
        if not np.array_equal(image, np.round(image)):
            raise CubeError("PGM requires integer pixel values")
    if image.min(initial=0) < 0 or image.max(initial=0) > 65535:
        raise CubeError("PGM values must fit in 16 bits")
    h, w = image.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    _atomic_write(Path(path), header + image.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise CubeError(f"{path}: truncated PGM header")
        c = raw[pos : pos + 1]
        if c == b"#":
            pos = raw.index(b"\n", pos) + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise CubeError(f"{path}: not a binary PGM (P5)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CubeError(f"{path}: malformed PGM header") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    body = raw[pos:]
    if len(body) < count * np.dtype(dtype).itemsize:
        raise CubeError(f"{path}: truncated PGM data")
    return np.frombuffer(body, dtype=dtype, count=count).reshape(h, w).astype(np.uint16)


# --- cube directories --------------------------------------------------------


def _atomic_write(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(payload, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _band_file(index: int) -> str:
    return f"band_{index:02d}.pgm"


def save_cube(cube: SpectralCube, path) -> None:
    """Write ``cube`` as a directory (manifest + 9 PGM band files)."""
    path = Path(path)
    bands = []
    for spec, image in zip(cube.band_specs, cube.data):
        name = _band_file(spec.index)
        write_pgm(path / name, image)
        bands.append(
            {
                "index": spec.index,
                "file": name,
                "dominant_wavelength": spec.dominant_wavelength,
                "band_low": spec.band_low,
                "band_high": spec.band_high,
                "half_power_bandwidth": spec.half_power_bandwidth,
            }
        )
    manifest = {
        "format": "oilmsi-cube",
        "version": 1,
        "sample_id": cube.sample_id,
        "label": cube.label.to_dict() if cube.label is not None else None,
        "bit_depth": cube.bit_depth,
        "width": cube.width,
        "height": cube.height,
        "bands": bands,
    }
    _atomic_write(path / MANIFEST_NAME, json.dumps(manifest, indent=2) + "\n")


def load_cube(path) -> SpectralCube:
    """Load a cube directory (or its manifest file) and validate it."""
    path = Path(path)
    manifest_path = path if path.is_file() else path / MANIFEST_NAME
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CubeError(f"{manifest_path}: malformed manifest ({exc.msg})") from exc
    try:
        entries = manifest["bands"]
        bit_depth = int(manifest.get("bit_depth", DEFAULT_BIT_DEPTH))
        sample_id = str(manifest.get("sample_id", root.name))
        label = manifest.get("label")
        label = ClassLabel.from_dict(label) if label else None
        if len(entries) != N_BANDS:
            raise CubeError(f"band count != {N_BANDS} (manifest lists {len(entries)})")
        specs = tuple(
            BandSpec(
                int(e["index"]),
                float(e["dominant_wavelength"]),
                float(e["band_low"]),
                float(e["band_high"]),
                float(e["half_power_bandwidth"]),
            )
            for e in entries
        )
        files = [root / e["file"] for e in entries]
    except (KeyError, TypeError) as exc:
        raise CubeError(f"{manifest_path}: malformed manifest ({exc})") from exc

    images = []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"missing band file {f}")
        images.append(read_pgm(f))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise CubeError(f"band dimension mismatch: {sorted(shapes)}")
    return SpectralCube(np.stack(images), specs, sample_id, label, bit_depth)


# --- capture simulator -------------------------------------------------------


@dataclass
class GeneratorParams:
    """Parameters of the synthetic transmittance rig.

    ``spectra`` maps each class to its noise-free 9-band signal (counts above
    dark). The dark offset map is a fixed per-pixel pattern drawn once from
    ``dark_map_seed``, shared by every capture made with these params.
    """

    spectra: dict[ClassLabel, np.ndarray]
    noise_sigma: np.ndarray
    dark_mean: float = 0.0
    dark_sigma: float = 0.0
    dark_noise_sigma: float = 0.0
    width: int = 64
    height: int = 64
    bit_depth: int = DEFAULT_BIT_DEPTH
    dark_map_seed: int = 0
    _dark_map: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.noise_sigma = np.broadcast_to(
            np.asarray(self.noise_sigma, dtype=float), (N_BANDS,)
        ).copy()
        if np.any(self.noise_sigma < 0):
            raise CubeError("negative noise level")
        if self.dark_sigma < 0 or self.dark_noise_sigma < 0:
            raise CubeError("negative noise level")
        spectra = {}
        for label, s in self.spectra.items():
            s = np.asarray(s, dtype=float)
            if s.shape != (N_BANDS,):
                raise CubeError(f"base spectrum for {label} is not length {N_BANDS}")
            spectra[label] = s
        self.spectra = spectra

    def base_spectrum(self, label: ClassLabel) -> np.ndarray:
        try:
            return self.spectra[label]
        except KeyError:
            raise CubeError(f"no base spectrum configured for {label}") from None

    def dark_map(self) -> np.ndarray:
        if self._dark_map is None:
            rng = np.random.default_rng(self.dark_map_seed)
            m = self.dark_mean + self.dark_sigma * rng.standard_normal((self.height, self.width))
            self._dark_map = np.clip(m, 0.0, None)
        return self._dark_map


def simulate_capture(
    label: ClassLabel, params: GeneratorParams, seed: int
) -> tuple[SpectralCube, SpectralCube]:
    """Emulate one raw exposure and its dark frame for a sample of class ``label``.

    Returns ``(raw, dark)`` as integer cubes clipped to the sensor range.
    """
    base = params.base_spectrum(label)
    rng = np.random.default_rng(seed)
    shape = (N_BANDS, params.height, params.width)
    dark_map = params.dark_map()
    top = 2**params.bit_depth - 1

    signal = dark_map[None] + base[:, None, None]
    raw = signal + params.noise_sigma[:, None, None] * rng.standard_normal(shape)
    dark = dark_map[None] + params.dark_noise_sigma * rng.standard_normal(shape)

    def quantize(a):
        return np.clip(np.rint(a), 0, top).astype(np.uint16)

    sample_id = f"{label}#{seed}"
    return (
        SpectralCube(quantize(raw), LED_BANDS, sample_id, label, params.bit_depth),
        SpectralCube(quantize(dark), LED_BANDS, sample_id + "/dark", label, params.bit_depth),
    )


# --- generator config --------------------------------------------------------


def _floats(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.replace(",", " ").split()], dtype=float)


def _fmt(values: Sequence[float]) -> str:
    return ", ".join(repr(float(v)) for v in values)


def read_generator_config(path) -> GeneratorParams:
    """Parse a key=value generator config with ``[generator]`` and ``[spectra]`` sections."""
    cp = configparser.ConfigParser(delimiters=("=",))
    cp.optionxform = str
    try:
        if not cp.read(path):
            raise FileNotFoundError(f"generator config not found: {path}")
        g = cp["generator"]
        spectra = {ClassLabel.parse(k): _floats(v) for k, v in cp["spectra"].items()}
        return GeneratorParams(
            spectra=spectra,
            noise_sigma=_floats(g["noise_sigma"]),
            dark_mean=g.getfloat("dark_mean", 0.0),
            dark_sigma=g.getfloat("dark_sigma", 0.0),
            dark_noise_sigma=g.getfloat("dark_noise_sigma", 0.0),
            width=g.getint("width", 64),
            height=g.getint("height", 64),
            bit_depth=g.getint("bit_depth", DEFAULT_BIT_DEPTH),
            dark_map_seed=g.getint("dark_map_seed", 0),
        )
    except (KeyError, configparser.Error) as exc:
        raise CubeError(f"{path}: malformed generator config ({exc})") from exc


def write_generator_config(params: GeneratorParams, path) -> None:
    lines = [
        "[generator]",
        f"width = {params.width}",
        f"height = {params.height}",
        f"bit_depth = {params.bit_depth}",
        f"noise_sigma = {_fmt(params.noise_sigma)}",
        f"dark_mean = {params.dark_mean!r}",
        f"dark_sigma = {params.dark_sigma!r}",
        f"dark_noise_sigma = {params.dark_noise_sigma!r}",
        f"dark_map_seed = {params.dark_map_seed}",
        "",
        "[spectra]",
    ]
    lines += [f"{label} = {_fmt(s)}" for label, s in sorted(params.spectra.items())]
    _atomic_write(Path(path), "\n".join(lines) + "\n")
