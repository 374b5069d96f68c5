"""Default synthetic corpora and their on-disk layout.

Adulteration spectra follow a Beer-Lambert mixture: each band of the pure
coconut-oil signal is attenuated by ``exp(-absorbance * fraction)``, with
the strongest absorbance in the 405 nm band. Reheat spectra place the six
heat classes along a bent path in band space, with heat classes 1/2 and
4/5 sitting close together.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .cube import (
    ClassLabel,
    GeneratorParams,
    SpectralCube,
    _atomic_write,
    load_cube,
    save_cube,
    simulate_capture,
)

TRAIN_FRACTIONS = tuple(round(0.05 * p, 2) for p in range(9))
VALIDATION_FRACTIONS = (
    0.02, 0.04, 0.06, 0.08, 0.12, 0.14, 0.16, 0.18,
    0.22, 0.24, 0.26, 0.28, 0.32, 0.34, 0.36, 0.38,
)
REPLICATES = 15
HEAT_CLASSES = tuple(range(6))

# counts above dark for pure oil, 405..950 nm
PURE_SIGNAL = np.array([520.0, 600.0, 680.0, 730.0, 760.0, 775.0, 790.0, 785.0, 770.0])
# per-band absorbance of the adulterant, per unit fraction
PALM_ABSORBANCE = np.array([0.80, 0.55, 0.28, 0.10, 0.05, 0.03, 0.02, 0.015, 0.025])


def beer_lambert_spectra(
    fractions: Sequence[float],
    pure: np.ndarray = PURE_SIGNAL,
    absorbance: np.ndarray = PALM_ABSORBANCE,
) -> dict[ClassLabel, np.ndarray]:
    return {
        ClassLabel.adulteration(f): pure * np.exp(-absorbance * f) for f in fractions
    }


def default_adulteration_params() -> GeneratorParams:
    spectra = beer_lambert_spectra(sorted(set(TRAIN_FRACTIONS) | set(VALIDATION_FRACTIONS)))
    return GeneratorParams(
        spectra=spectra,
        noise_sigma=np.full(9, 12.0),
        dark_mean=30.0,
        dark_sigma=4.0,
        dark_noise_sigma=2.0,
        width=64,
        height=64,
        dark_map_seed=11,
    )


# Heat-class offsets from the pure signal (counts). Classes 1/2 and 4/5 are
# near neighbours so the six classes group into four umbrella classes.
HEAT_OFFSETS = np.array(
    [
        [0, 0, 0, 0, 0, 0, 0, 0, 0],
        [-60, -42, -20, -8, -3, 0, 4, 2, 0],
        [-72, -50, -24, -12, -3, 0, 4, 2, 0],
        [-120, -88, -48, -24, -10, -6, 0, 0, 0],
        [-170, -130, -78, -44, -20, -14, -6, -2, 0],
        [-182, -138, -86, -48, -22, -14, -6, -2, 0],
    ],
    dtype=float,
)


def default_reheat_params() -> GeneratorParams:
    spectra = {ClassLabel.heat(h): PURE_SIGNAL + HEAT_OFFSETS[h] for h in HEAT_CLASSES}
    return GeneratorParams(
        spectra=spectra,
        noise_sigma=np.full(9, 12.0),
        dark_mean=30.0,
        dark_sigma=4.0,
        dark_noise_sigma=2.0,
        width=30,
        height=30,
        dark_map_seed=23,
    )


# --- sample plans ------------------------------------------------------------


@dataclass(frozen=True)
class SampleSpec:
    split: str
    label: ClassLabel
    replicate: int
    seed: int

    @property
    def name(self) -> str:
        if self.label.kind == "heat_cycles":
            tag = f"h{self.label.value:d}"
        else:
            tag = f"a{self.label.value:.2f}"
        return f"{tag}_r{self.replicate:02d}"


def derive_seed(master: int, *path: int) -> int:
    """Independent per-sample seed from the master seed and integer coordinates."""
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


def adulteration_plan(seed: int, replicates: int = REPLICATES) -> list[SampleSpec]:
    plan = []
    for i, f in enumerate(TRAIN_FRACTIONS):
        for r in range(replicates):
            plan.append(SampleSpec("train", ClassLabel.adulteration(f), r + 1, derive_seed(seed, 1, i, r)))
    for i, f in enumerate(VALIDATION_FRACTIONS):
        plan.append(SampleSpec("validation", ClassLabel.adulteration(f), 1, derive_seed(seed, 2, i, 0)))
    return plan


def reheat_plan(seed: int, train_images: int = 2, test_images: int = 2) -> list[SampleSpec]:
    plan = []
    for h in HEAT_CLASSES:
        for r in range(train_images):
            plan.append(SampleSpec("train", ClassLabel.heat(h), r + 1, derive_seed(seed, 3, h, r)))
        for r in range(test_images):
            plan.append(SampleSpec("test", ClassLabel.heat(h), r + 1, derive_seed(seed, 4, h, r)))
    return plan


def capture(spec: SampleSpec, params: GeneratorParams) -> tuple[SpectralCube, SpectralCube]:
    raw, dark = simulate_capture(spec.label, params, spec.seed)
    raw.sample_id = spec.name
    dark.sample_id = spec.name + "/dark"
    return raw, dark


def write_corpus(root, plan: Sequence[SampleSpec], params: GeneratorParams) -> None:
    """Write ``root/<split>/<sample>/{raw,dark}`` cube directories and an index."""
    root = Path(root)
    index = []
    for spec in plan:
        raw, dark = capture(spec, params)
        sample_dir = root / spec.split / spec.name
        save_cube(raw, sample_dir / "raw")
        save_cube(dark, sample_dir / "dark")
        index.append(
            {"split": spec.split, "sample": spec.name, "label": str(spec.label), "seed": spec.seed}
        )
    _atomic_write(root / "index.json", json.dumps(index, indent=1) + "\n")


def iter_samples(root, split: str) -> Iterator[tuple[str, SpectralCube, SpectralCube]]:
    """Yield ``(name, raw, dark)`` for every sample of ``split`` in index order."""
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    for entry in index:
        if entry["split"] == split:
            d = root / split / entry["sample"]
            yield entry["sample"], load_cube(d / "raw"), load_cube(d / "dark")
