import numpy as np
import pytest
from numpy import testing as npt

from mcmri import kspace
from mcmri.kspace import (
    DimensionError,
    ParameterError,
    data_fidelity,
    data_fidelity_vjp,
    fft2,
    fidelity_spectrum,
    full_mask,
    ifft2,
    make_mask,
    undersample,
    zero_fill,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- fft


def test_constant_image_has_single_dc_coefficient():
    H, W, c = 6, 10, 0.7
    K = fft2(np.full((H, W), c))
    assert np.isclose(K[0, 0], c * np.sqrt(H * W))
    K[0, 0] = 0
    assert np.abs(K).max() < 1e-13


def test_fft_round_trip_and_parseval():
    x = _rng().standard_normal((8, 8))
    assert np.abs(ifft2(fft2(x)) - x).max() < 1e-12
    y = _rng(1).standard_normal((16, 12))
    assert abs(np.linalg.norm(fft2(y)) - np.linalg.norm(y)) / np.linalg.norm(y) < 1e-12


# --------------------------------------------------------------- masks


def test_cartesian_row_count_256():
    m = make_mask("cartesian1d", 256, 256, 0.2, seed=3)
    rows = m.grid.any(axis=1)
    assert rows.sum() == 51
    # full lines only
    assert np.array_equal(m.grid, np.repeat(rows[:, None], 256, axis=1))
    assert m.achieved_ratio == 51 / 256


def test_central_rows_always_sampled():
    # 0.04 * 256 rounds to 10 rows: frequencies -5..4
    centre = np.fft.fftfreq(256, d=1 / 256)
    want = np.flatnonzero((centre >= -5) & (centre <= 4))
    assert len(want) == 10
    for seed in range(100):
        g = make_mask("cartesian1d", 256, 256, 0.2, 0.04, seed=seed).grid
        assert g[want].all()


def test_random2d_exact_count_and_centre():
    m = make_mask("random2d", 64, 48, 0.1, 0.02, seed=5)
    assert m.count == round(0.1 * 64 * 48)
    assert m.grid[0, 0]
    fy = np.fft.fftfreq(64)[:, None]
    fx = np.fft.fftfreq(48)[None, :]
    r = (fy**2 + fx**2).ravel()
    n_centre = round(0.02 * 64 * 48)
    # every point strictly inside the centre radius is sampled
    cut = np.sort(r)[n_centre - 1]
    assert m.grid.ravel()[r < cut].all()


def test_ratio_one_is_all_ones():
    for kind in ("cartesian1d", "random2d"):
        assert make_mask(kind, 16, 16, 1.0, 0.0).grid.all()


def test_mask_determinism():
    a = make_mask("random2d", 32, 32, 0.3, 0.05, seed=9).grid
    b = make_mask("random2d", 32, 32, 0.3, 0.05, seed=9).grid
    c = make_mask("random2d", 32, 32, 0.3, 0.05, seed=10).grid
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("ratio,cf", [(0.0, 0.0), (1.2, 0.0), (0.2, 0.2), (0.2, -0.1)])
def test_mask_parameter_errors(ratio, cf):
    with pytest.raises(ParameterError):
        make_mask("cartesian1d", 32, 32, ratio, cf)


def test_unknown_kind():
    with pytest.raises(ParameterError):
        make_mask("radial", 32, 32, 0.2)


def test_mask_grid_read_only():
    m = make_mask("cartesian1d", 16, 16, 0.5, 0.1)
    with pytest.raises(ValueError):
        m.grid[0, 0] = False


# -------------------------------------------------- undersample / zero fill


def test_undersample_definition():
    x = _rng().random((16, 16))
    m = make_mask("random2d", 16, 16, 0.3, 0.05, seed=1)
    y = undersample(x, m)
    K = fft2(x)
    assert np.array_equal(y.values[m.grid], K[m.grid])
    assert np.all(y.values[~m.grid] == 0)
    assert np.array_equal(undersample(x, full_mask(16, 16)).values, K)
    assert np.all(undersample(np.zeros((16, 16)), m).values == 0)


def test_undersample_shape_mismatch():
    with pytest.raises(DimensionError):
        undersample(np.zeros((8, 8)), full_mask(8, 10))


def test_zero_fill_cases():
    x = _rng().random((12, 12))
    assert np.abs(zero_fill(undersample(x, full_mask(12, 12))) - x).max() < 1e-12
    m = make_mask("cartesian1d", 12, 12, 0.3, 0.1, seed=2)
    assert m.grid[0, 0]
    const = zero_fill(undersample(np.full((12, 12), 0.4), m))
    npt.assert_allclose(const, 0.4, atol=1e-14)
    y0 = kspace.KSpaceMeasurements(np.zeros((12, 12), complex), m)
    assert np.all(zero_fill(y0) == 0)


# --------------------------------------------------------- data fidelity


def _lstsq_fidelity(x_in, y_values, grid, lam):
    """Solve min ||x - x_in||^2 + lam ||M F x - y||^2 over complex x directly."""
    H, W = x_in.shape
    n = H * W
    F = np.zeros((n, n), dtype=complex)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1
        F[:, j] = fft2(e.reshape(H, W)).ravel()
    M = np.diag(grid.ravel().astype(float))
    A = np.vstack([np.eye(n), np.sqrt(lam) * M @ F])
    b = np.concatenate([x_in.ravel(), np.sqrt(lam) * y_values.ravel()])
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return (F @ x).reshape(H, W)


def test_two_by_two_dc_case():
    x_in = np.array([[1.0, 0.0], [0.0, 0.0]])
    gt = np.ones((2, 2))
    grid = np.zeros((2, 2), bool)
    grid[0, 0] = True
    mask = kspace.SamplingMask(grid, 0.25, "random2d", 0)
    y = undersample(gt, mask)
    Kp = fidelity_spectrum(x_in, y.values, grid, 1.0)
    assert np.isclose(Kp[0, 0], 1.25)
    K = fft2(x_in)
    npt.assert_allclose(Kp[~grid], K[~grid], atol=1e-15)
    npt.assert_allclose(Kp, _lstsq_fidelity(x_in, y.values, grid, 1.0), atol=1e-12)


def test_fidelity_matches_least_squares_4x4():
    rng = _rng(3)
    x_in = rng.standard_normal((4, 4))
    grid = rng.random((4, 4)) < 0.5
    mask = kspace.SamplingMask(grid, 0.5, "random2d", 0)
    y = undersample(rng.random((4, 4)), mask)
    for lam in (0.5, 3.0, 100.0):
        npt.assert_allclose(fidelity_spectrum(x_in, y.values, grid, lam),
                            _lstsq_fidelity(x_in, y.values, grid, lam), atol=1e-10)


def test_lambda_zero_identity():
    x = _rng().random((16, 16))
    y = undersample(_rng(1).random((16, 16)), make_mask("random2d", 16, 16, 0.3, 0.05))
    assert np.abs(data_fidelity(x, y, 0.0) - x).max() < 1e-12


def test_large_lambda_forces_measurements():
    rng = _rng(2)
    gt = rng.random((16, 16))
    m = make_mask("random2d", 16, 16, 0.3, 0.05, seed=4)
    y = undersample(gt, m)
    # an estimate near the truth, as the network supplies in practice
    x_in = gt + 0.05 * rng.standard_normal(gt.shape)
    Kp = fidelity_spectrum(x_in, y.values, m.grid, 1e6)
    s = m.grid
    elementwise = np.abs(Kp[s] - y.values[s]) / (np.abs(y.values[s]) + 1e-12)
    assert kspace.sampled_relative_error(Kp, y.values, m.grid) <= 2e-6
    # exact shrink of the residual
    npt.assert_allclose(Kp[s] - y.values[s], (fft2(x_in)[s] - y.values[s]) / (1e6 + 1), rtol=0, atol=1e-14)
    # elementwise the ratio is |K - Y| / ((lam+1)(|Y| + 1e-12)), so the 2e-6 bound
    # holds exactly where the input residual is at most twice the measurement
    near = np.abs(fft2(x_in)[s] - y.values[s]) <= 2 * np.abs(y.values[s])
    assert near.sum() > 0.5 * s.sum()
    assert np.all(elementwise[near] <= 2e-6)


def test_fixed_point_when_consistent():
    gt = _rng(5).random((16, 16))
    m = make_mask("cartesian1d", 16, 16, 0.4, 0.1, seed=1)
    y = undersample(gt, m)
    for lam in (0.0, 1.0, 1e6):
        assert np.abs(data_fidelity(gt, y, lam) - gt).max() < 1e-12


def test_convex_combination_at_sampled():
    rng = _rng(6)
    x_in = rng.random((8, 8))
    m = make_mask("random2d", 8, 8, 0.4, 0.05, seed=2)
    y = undersample(rng.random((8, 8)), m)
    lam = 2.5
    K = fft2(x_in)
    Kp = fidelity_spectrum(x_in, y.values, m.grid, lam)
    w = lam / (lam + 1)
    npt.assert_allclose(Kp[m.grid], w * y.values[m.grid] + (1 - w) * K[m.grid], atol=1e-14)


def test_negative_lambda_rejected():
    y = undersample(np.zeros((8, 8)), full_mask(8, 8))
    with pytest.raises(ParameterError):
        data_fidelity(np.zeros((8, 8)), y, -1.0)


def test_per_contrast_lambda_broadcast():
    rng = _rng(7)
    x = rng.random((3, 8, 8))
    grids = np.stack([make_mask("random2d", 8, 8, 0.4, 0.05, seed=s).grid for s in range(3)])
    yv = np.where(grids, fft2(rng.random((3, 8, 8))), 0)
    lam = np.array([0.0, 1.0, 10.0])[:, None, None]
    out = fidelity_spectrum(x, yv, grids, lam)
    for i in range(3):
        npt.assert_allclose(out[i], fidelity_spectrum(x[i], yv[i], grids[i], float(lam[i, 0, 0])))


# ----------------------------------------------------------------- vjp


def test_vjp_lambda_zero_identity():
    u = _rng().standard_normal((8, 8))
    assert np.abs(data_fidelity_vjp(u, np.ones((8, 8), bool) & False, 0.0) - u).max() < 1e-12


def test_vjp_matches_finite_differences():
    rng = _rng(8)
    x = rng.standard_normal((4, 4))
    u = rng.standard_normal((4, 4))
    m = make_mask("random2d", 4, 4, 0.5, 0.1, seed=3)
    y = undersample(rng.random((4, 4)), m)
    for lam in (0.0, 1.0, 7.0):
        f = lambda z: float(np.sum(u * data_fidelity(z, y, lam)))
        fd = np.zeros_like(x)
        eps = 1e-6
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            fd[idx] = (f(xp) - f(xm)) / (2 * eps)
        g = data_fidelity_vjp(u, m, lam)
        assert np.linalg.norm(g - fd) / np.linalg.norm(g) <= 1e-8


def test_vjp_self_adjoint():
    rng = _rng(9)
    u, v = rng.standard_normal((2, 8, 8))
    m = make_mask("cartesian1d", 8, 8, 0.5, 0.1, seed=1)
    Ju = data_fidelity_vjp(u, m, 3.0)
    Jv = data_fidelity_vjp(v, m, 3.0)
    assert abs(np.sum(Ju * v) - np.sum(u * Jv)) < 1e-12
