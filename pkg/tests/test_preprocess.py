import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oilmsi.cube import ClassLabel, CubeError, SpectralCube
from oilmsi.preprocess import (
    DataMatrix,
    Roi,
    build_data_matrix,
    center_roi,
    extract_roi,
    mean_signature,
    preprocess_capture,
    read_data_matrix_csv,
    smooth,
    subtract_dark,
    to_8bit,
    write_data_matrix_csv,
)

from oracles import naive_smooth


def cube_of(data, **kw):
    return SpectralCube(np.asarray(data), **kw)


def test_subtract_dark_examples():
    raw = cube_of(np.full((9, 2, 2), 100, np.uint16))
    dark = cube_of(np.full((9, 2, 2), 10, np.uint16))
    assert np.all(subtract_dark(raw, dark).data == 90)
    low = cube_of(np.full((9, 2, 2), 5, np.uint16))
    high = cube_of(np.full((9, 2, 2), 9, np.uint16))
    out = subtract_dark(low, high)
    assert np.all(out.data == 0) and out.data.dtype == np.uint16
    assert np.all(subtract_dark(raw, raw).data == 0)
    assert subtract_dark(raw, cube_of(np.zeros((9, 2, 2), np.uint16))) == raw
    with pytest.raises(CubeError, match="mismatch"):
        subtract_dark(raw, cube_of(np.zeros((9, 3, 2), np.uint16)))


def test_smooth_examples():
    flat = cube_of(np.full((9, 8, 8), 37, np.uint16))
    assert np.all(smooth(flat, 5).data == 37)
    data = np.zeros((9, 3, 3), np.uint16)
    data[0] = np.arange(9).reshape(3, 3)
    assert smooth(cube_of(data), 3).data[0, 1, 1] == pytest.approx(4.0)
    with pytest.raises(CubeError, match="larger"):
        smooth(flat, 9)
    with pytest.raises(ValueError):
        smooth(flat, 3, method="gauss")


@pytest.mark.parametrize("window", [1, 2, 3, 4, 5, 10])
def test_smooth_matches_double_loop(window):
    rng = np.random.default_rng(window)
    for _ in range(3):
        data = rng.integers(0, 1024, (9, 10, 10)).astype(np.uint16)
        got = smooth(cube_of(data), window).data
        for b in range(9):
            np.testing.assert_allclose(got[b], naive_smooth(data[b].astype(float), window), rtol=0, atol=1e-9)


def test_even_window_anchor():
    # a single bright pixel at (r, c) spreads to targets (i, j) with
    # i - 15 <= r <= i + 14 for a 30-pixel window
    data = np.zeros((9, 40, 40), np.uint16)
    data[:, 20, 20] = 900
    out = smooth(cube_of(data), 30).data[0]
    rows = np.flatnonzero(out[:, 20] > 0)
    assert rows.min() == 20 - 14 and rows.max() == 20 + 15


def test_median_variant():
    data = np.zeros((9, 3, 3), np.uint16)
    data[:, 1, 1] = 1000
    assert np.all(smooth(cube_of(data), 3, "median").data == 0)


def test_roi_extraction():
    rng = np.random.default_rng(2)
    data = rng.integers(0, 1024, (9, 40, 50)).astype(np.uint16)
    c = cube_of(data)
    block = extract_roi(c, Roi(5, 3, 30))
    assert block.shape == (900, 9)
    assert np.array_equal(block[0], data[:, 3, 5])
    assert np.array_equal(block[1], data[:, 3, 6])
    assert np.array_equal(block[30], data[:, 4, 5])
    assert np.array_equal(extract_roi(c, Roi(0, 0, 1))[0], data[:, 0, 0])
    with pytest.raises(CubeError):
        extract_roi(c, Roi(30, 0, 30))
    with pytest.raises(CubeError):
        extract_roi(c, Roi(-1, 0, 3))
    assert center_roi(64, 64) == Roi(17, 17, 30)
    with pytest.raises(CubeError):
        center_roi(20, 20)


def test_data_matrix_shapes():
    block = np.ones((900, 9))
    blocks = [(block, ClassLabel.adulteration(0.05 * p)) for p in range(9) for _ in range(15)]
    dm = build_data_matrix(blocks)
    assert dm.shape == (121500, 9)
    assert len(dm.classes) == 9
    assert np.bincount(dm.codes).tolist() == [13500] * 9
    single = build_data_matrix([(block, ClassLabel.heat(0))])
    assert single.shape == (900, 9) and single.classes == [ClassLabel.heat(0)]
    with pytest.raises(ValueError, match="no blocks"):
        build_data_matrix([])
    with pytest.raises(ValueError, match="column-count"):
        build_data_matrix([(np.ones((2, 9)), ClassLabel.heat(0)), (np.ones((2, 8)), ClassLabel.heat(1))])


def test_data_matrix_order_and_labels():
    a, b = np.zeros((2, 9)), np.ones((3, 9))
    dm = build_data_matrix([(a, ClassLabel.heat(1)), (b, ClassLabel.heat(0)), (a, ClassLabel.heat(1))])
    assert dm.shape == (7, 9)
    assert [l.value for l in dm.labels] == [1, 1, 0, 0, 0, 1, 1]
    assert dm.rows_of(ClassLabel.heat(0)).shape == (3, 9)
    with pytest.raises(ValueError):
        DataMatrix(np.zeros((2, 9)), [0], [ClassLabel.heat(0)])


def test_mean_signature():
    v = np.arange(9.0)
    assert np.array_equal(mean_signature(np.tile(v, (5, 1))).mean, v)
    sig = mean_signature(np.vstack([np.zeros(9), np.full(9, 2.0)]))
    assert np.array_equal(sig.mean, np.ones(9))
    assert sig.wavelengths[0] == 405
    rng = np.random.default_rng(4)
    block = rng.normal(size=(37, 9))
    expected = [sum(block[i, j] for i in range(37)) / 37 for j in range(9)]
    np.testing.assert_allclose(mean_signature(block).mean, expected, rtol=1e-12)
    with pytest.raises(ValueError):
        mean_signature(np.zeros((0, 9)))


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    dm = build_data_matrix([
        (rng.normal(size=(4, 9)), ClassLabel.adulteration(0.15)),
        (rng.normal(size=(3, 9)), ClassLabel.heat(2)),
    ])
    write_data_matrix_csv(dm, tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == ",".join([f"band_{i}" for i in range(1, 10)] + ["label_kind", "label_value"])
    back = read_data_matrix_csv(tmp_path / "m.csv")
    assert np.array_equal(back.values, dm.values)
    assert back.labels == dm.labels


def test_to_8bit_and_pipeline():
    assert to_8bit(np.array([0, 1023]), 10).tolist() == [0.0, 255.0]
    raw = cube_of(np.full((9, 6, 6), 50, np.uint16))
    dark = cube_of(np.full((9, 6, 6), 20, np.uint16))
    out = preprocess_capture(raw, dark, window=3)
    assert out.data.dtype == np.float64 and np.allclose(out.data, 30)
    assert preprocess_capture(raw, None, window=1) == raw


@settings(max_examples=60, deadline=None)
@given(
    data=hnp.arrays(np.uint16, (9, 6, 7), elements=st.integers(0, 1023)),
    window=st.integers(1, 6),
)
def test_smooth_stays_within_local_range(data, window):
    out = smooth(cube_of(data), window).data
    before = window // 2
    padded = np.pad(data.astype(float), ((0, 0), (before, window - 1 - before), (before, window - 1 - before)), mode="edge")
    for i in range(6):
        for j in range(7):
            nb = padded[:, i : i + window, j : j + window].reshape(9, -1)
            assert np.all(out[:, i, j] >= nb.min(axis=1) - 1e-9)
            assert np.all(out[:, i, j] <= nb.max(axis=1) + 1e-9)
