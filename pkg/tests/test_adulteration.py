import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oilmsi.adulteration import (
    AdulterationModel,
    CalibrationError,
    GaussianClassModel,
    bhattacharyya,
    calibration_csv_lines,
    estimate,
    estimate_block,
    fit_gaussian,
    fit_model,
    fit_through_origin,
    invert_quadratic,
    load_model,
    mse,
    save_model,
)
from oilmsi.cube import SpectralCube
from oilmsi.fda import FdaModel
from oilmsi.preprocess import Roi

from oracles import integral_oracle


def g(mean, cov):
    mean = np.atleast_1d(np.asarray(mean, float))
    return GaussianClassModel(mean, np.atleast_2d(np.asarray(cov, float)), 100)


def test_hand_cases():
    assert bhattacharyya(g([0.0], [[1.0]]), g([2.0], [[1.0]])) == pytest.approx(0.5, abs=1e-10)
    b = bhattacharyya(g([0.0], [[1.0]]), g([0.0], [[4.0]]))
    assert b == pytest.approx(0.5 * math.log(2.5 / 2.0), abs=1e-10)
    assert round(b, 4) == 0.1116
    a = g([1.0, -2.0], [[2.0, 0.3], [0.3, 1.0]])
    assert bhattacharyya(a, a) == 0.0


def random_pair(rng, dim):
    def cov():
        m = rng.normal(size=(dim, dim))
        return m @ m.T + 0.3 * np.eye(dim)
    return g(rng.normal(scale=1.5, size=dim), cov()), g(rng.normal(scale=1.5, size=dim), cov())


@pytest.mark.parametrize("dim", [1, 2])
def test_matches_numeric_integral(dim):
    rng = np.random.default_rng(dim)
    for _ in range(20):
        a, b = random_pair(rng, dim)
        assert bhattacharyya(a, b) == pytest.approx(integral_oracle(a, b), abs=1e-4)


def test_symmetry_and_monotonicity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = random_pair(rng, 4)
        assert abs(bhattacharyya(a, b) - bhattacharyya(b, a)) <= 1e-12
    c = np.array([[2.0, 0.5], [0.5, 1.0]])
    shifts = [bhattacharyya(g([0, 0], c), g([s, s / 2], c)) for s in np.linspace(0, 3, 13)]
    assert shifts[0] == pytest.approx(0.0, abs=1e-15)
    assert np.all(np.diff(shifts) > 0)
    with pytest.raises(CalibrationError):
        bhattacharyya(g([0.0], [[1.0]]), g([0.0, 0.0], np.eye(2)))


def test_fit_gaussian():
    m = fit_gaussian([[0, 0], [2, 0], [0, 2], [2, 2]])
    assert np.allclose(m.mean, [1, 1])
    np.testing.assert_allclose(m.covariance, np.diag([4 / 3, 4 / 3]), rtol=1e-9)
    flat = fit_gaussian(np.tile([3.0, -1.0, 2.0], (5, 1)))
    assert np.array_equal(flat.mean, [3.0, -1.0, 2.0])
    assert np.allclose(flat.covariance, 1e-10 * np.eye(3), rtol=0, atol=1e-22)
    with pytest.raises(CalibrationError, match="rows"):
        fit_gaussian(np.zeros((3, 3)))


def test_fit_gaussian_two_pass_oracle():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5)) + 10
    m = fit_gaussian(X)
    mean = [sum(X[:, j]) / len(X) for j in range(5)]
    cov = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            cov[i, j] = sum((X[:, i] - mean[i]) * (X[:, j] - mean[j])) / (len(X) - 1)
    eps = 1e-10 * np.trace(cov) / 5
    np.testing.assert_allclose(m.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(m.covariance, cov + eps * np.eye(5), rtol=1e-12, atol=1e-14)


def test_regularization_barely_moves_distance():
    rng = np.random.default_rng(5)
    for _ in range(20):
        X, Y = rng.normal(size=(2, 300, 5))
        Y = Y * 1.3 + 0.4
        exact = []
        for Z in (X, Y):
            c = np.cov(Z, rowvar=False)
            exact.append(g(Z.mean(axis=0), c))
        assert abs(bhattacharyya(fit_gaussian(X), fit_gaussian(Y)) - bhattacharyya(*exact)) <= 1e-6


def test_fit_through_origin_oracle():
    rng = np.random.default_rng(6)
    x = np.linspace(0, 0.4, 9)
    y = 1.016 * x**2 + 2.045 * x + rng.normal(scale=0.01, size=9)
    a, b, r2 = fit_through_origin(x, y)
    # 2x2 normal equations solved by Cramer's rule
    s4, s3, s2 = sum(x**4), sum(x**3), sum(x**2)
    t2, t1 = sum(x**2 * y), sum(x * y)
    det = s4 * s2 - s3 * s3
    ao, bo = (t2 * s2 - s3 * t1) / det, (s4 * t1 - s3 * t2) / det
    assert a == pytest.approx(ao, abs=1e-10) and b == pytest.approx(bo, abs=1e-10)
    resid = y - (ao * x**2 + bo * x)
    assert r2 == pytest.approx(1 - sum(resid**2) / sum((y - y.mean()) ** 2), abs=1e-10)
    a, b, r2 = fit_through_origin(x, x)
    assert a == pytest.approx(0, abs=1e-10) and b == pytest.approx(1, abs=1e-10) and r2 == pytest.approx(1)


def test_inversion_examples():
    x = invert_quadratic(1.0, 1.016, 2.045)
    assert x == pytest.approx((-2.045 + math.sqrt(2.045**2 + 4 * 1.016)) / (2 * 1.016), rel=1e-12)
    assert x == pytest.approx(0.400, abs=0.01)
    assert invert_quadratic(0.0, 1.016, 2.045) == 0.0
    assert invert_quadratic(0.5, 1e-14, 2.0) == pytest.approx(0.25)
    with pytest.raises(CalibrationError):
        invert_quadratic(-0.1, 1.0, 1.0)
    with pytest.raises(CalibrationError, match="out of calibration range"):
        invert_quadratic(2.0, -1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(
    a=st.floats(1e-6, 1e3), b=st.floats(1e-6, 1e3), y=st.floats(0, 1e3),
)
def test_inversion_round_trip(a, b, y):
    x = invert_quadratic(y, a, b)
    assert x >= 0
    assert a * x * x + b * x == pytest.approx(y, rel=1e-10, abs=1e-12)


def test_mse():
    assert mse([0.1, 0.2], [0.1, 0.2]) == 0.0
    assert mse([0.1], [0.2]) == pytest.approx(0.01)
    rng = np.random.default_rng(7)
    p, t = rng.random(30), rng.random(30)
    assert mse(p, t) == pytest.approx(sum((pi - ti) ** 2 for pi, ti in zip(p, t)) / 30, rel=1e-12)
    with pytest.raises(ValueError):
        mse([], [])
    with pytest.raises(ValueError):
        mse([0.1], [0.1, 0.2])


IDENTITY2 = FdaModel(np.eye(2), np.ones(2), 2, 1.0, ())


def planted_training(rng, fractions=(0.0, 0.1, 0.2, 0.3, 0.4), replicates=4, m=900):
    # unit covariance and a mean shift of 4 sqrt(f + f^2), so B = 2 (f + f^2)
    return [(f, rng.normal(size=(m, 2)) + [4 * math.sqrt(f + f * f), 0.0])
            for f in fractions for _ in range(replicates)]


def test_fit_model_planted():
    rng = np.random.default_rng(8)
    model = fit_model(planted_training(rng), IDENTITY2, reference_size=900, seed=1)
    ys = [p.mean_distance for p in model.calibration]
    assert ys[0] == pytest.approx(0, abs=0.01)
    assert np.all(np.diff(ys) > 0)
    assert max(ys) == 1.0 and ys.count(1.0) == 1
    assert all(0 <= y <= 1 for y in ys)
    assert model.r_squared > 0.98
    assert model.predict(0.0) == 0.0
    assert model.predict(0.4) == pytest.approx(1.0, abs=0.05)
    assert len(model.calibration[2].replicate_distances) == 4
    assert calibration_csv_lines(model)[0].startswith("fraction,mean_normalized_distance,replicate_1")


def test_fit_model_errors():
    rng = np.random.default_rng(9)
    with pytest.raises(CalibrationError, match="pure"):
        fit_model(planted_training(rng, (0.1, 0.2, 0.3)), IDENTITY2)
    with pytest.raises(CalibrationError, match="3 distinct"):
        fit_model(planted_training(rng, (0.0, 0.2)), IDENTITY2)


def test_estimate_round_trip_and_persistence(tmp_path):
    rng = np.random.default_rng(10)
    training = planted_training(rng)
    model = fit_model(training, IDENTITY2, reference_size=900, seed=1)
    pooled = {}
    for f, blk in training:
        pooled.setdefault(f, []).append(blk)
    for f, blocks in pooled.items():
        assert estimate_block(np.vstack(blocks), model) == pytest.approx(f, abs=0.02)

    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert isinstance(back, AdulterationModel)
    assert (back.coeff_a, back.coeff_b, back.normalizer) == (model.coeff_a, model.coeff_b, model.normalizer)
    assert np.array_equal(back.reference.covariance, model.reference.covariance)
    blk = training[-1][1]
    assert estimate_block(blk, back) == estimate_block(blk, model)
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(CalibrationError):
        load_model(tmp_path / "bad.json")


def test_estimate_on_cube():
    # a 9-band cube whose first two bands carry the planted signal
    rng = np.random.default_rng(11)
    W = np.zeros((9, 2))
    W[0, 0] = W[1, 1] = 1.0
    fda9 = FdaModel(W, np.ones(9), 2, 1.0, ())
    training = [(f, np.hstack([blk + 100, np.full((len(blk), 7), 100.0)]))
                for f, blk in planted_training(rng)]
    model = fit_model([(f, b @ W) for f, b in training], fda9, reference_size=900)
    data = np.full((9, 40, 40), 100.0)
    data[:2] += rng.normal(size=(2, 40, 40))
    data[0] += 4 * math.sqrt(0.2 + 0.04)
    cube = SpectralCube(data)
    assert estimate(cube, model, Roi(5, 5, 30)) == pytest.approx(0.2, abs=0.03)
