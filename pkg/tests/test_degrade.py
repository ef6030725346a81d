import numpy as np
import pytest
import torch
from scipy.ndimage import convolve1d

from isorecon.degrade import (
    LinearDegradation,
    PSFKernel,
    make_average_operator,
    make_exact_operator,
    make_imputation_operator,
    make_interpolation_operator,
    make_operator,
    penrose_residuals,
    range_space_replace,
)


def oracle_exact_A(sigma, f, n):
    """Blur each unit vector with scipy's wrap-mode convolution, keep every f-th row."""
    r = int(np.ceil(3 * sigma))
    k = np.arange(-r, r + 1)
    w = np.exp(-k**2 / (2 * sigma**2))
    w /= w.sum()
    P = np.stack([convolve1d(e, w, mode="wrap") for e in np.eye(n)], axis=1)
    return P[::f]


def test_psf_kernel_invariants():
    for sigma in (0.5, 1, 2, 4):
        psf = PSFKernel.gaussian(sigma)
        assert abs(psf.weights.sum() - 1) < 1e-12
        np.testing.assert_array_equal(psf.weights, psf.weights[::-1])
        assert psf.radius >= np.ceil(3 * sigma)
    with pytest.raises(ValueError):
        PSFKernel.gaussian(2.0, radius=3)


def test_exact_shapes():
    op = make_exact_operator(PSFKernel.gaussian(1.5), 4, 16)
    assert op.A.shape == (4, 16) and op.A_pinv.shape == (16, 4)
    assert op.m == 4


def test_exact_delta_kernel_is_subsampling():
    op = make_exact_operator(PSFKernel.gaussian(0.0), 4, 16)
    S = np.zeros((4, 16))
    S[np.arange(4), np.arange(0, 16, 4)] = 1
    np.testing.assert_allclose(op.A, S, atol=1e-15)
    np.testing.assert_allclose(op.A_pinv, S.T, atol=1e-12)


def test_exact_against_dense_oracle():
    op = make_exact_operator(PSFKernel.gaussian(2.0), 4, 32)
    A = oracle_exact_A(2.0, 4, 32)
    np.testing.assert_allclose(op.A, A, atol=1e-14)
    np.testing.assert_allclose(op.A_pinv, np.linalg.pinv(A), atol=1e-9)
    assert np.linalg.norm(op.A @ op.A_pinv @ op.A - op.A) < 1e-8
    assert max(penrose_residuals(op.A, op.A_pinv)) < 1e-8


def test_factor_must_divide():
    for build in (
        lambda: make_exact_operator(PSFKernel.gaussian(1.0), 3, 16),
        lambda: make_interpolation_operator(3, 16),
        lambda: make_average_operator(5, 16),
        lambda: make_imputation_operator(0, 16),
    ):
        with pytest.raises(ValueError):
            build()


def test_interpolation_constants():
    for method in ("linear", "cubic", "lanczos"):
        for f, n in [(2, 8), (4, 32), (8, 64)]:
            op = make_interpolation_operator(f, n, method)
            np.testing.assert_allclose(op.A @ np.full(n, 3.5), 3.5, atol=1e-12)
            np.testing.assert_allclose(op.A_pinv @ np.full(n // f, 3.5), 3.5, atol=1e-12)
            np.testing.assert_allclose(op.A_pinv @ op.A @ np.full(n, -2.0), -2.0, atol=1e-12)


def test_linear_interpolation_clamps_edge():
    op = make_interpolation_operator(2, 4, "linear")
    np.testing.assert_allclose(op.A_pinv @ np.array([0.0, 1.0]), [0, 0.5, 1, 1], atol=1e-15)


def test_linear_interpolation_passes_through_samples():
    op = make_interpolation_operator(8, 64, "linear")
    y = np.random.default_rng(0).standard_normal(8)
    np.testing.assert_allclose((op.A_pinv @ y)[::8], y, atol=1e-14)
    assert not op.exact_pinv


def test_unknown_method():
    with pytest.raises(ValueError):
        make_interpolation_operator(2, 8, "nearest")


def test_average_examples():
    op = make_average_operator(2, 4)
    np.testing.assert_allclose(op.A @ np.array([1.0, 3, 5, 7]), [2, 6])
    np.testing.assert_allclose(op.A @ np.full(4, 9.0), 9.0)
    assert max(penrose_residuals(op.A, op.A_pinv)) < 1e-12


def test_imputation_examples():
    op = make_imputation_operator(4, 8)
    x = np.arange(1.0, 9.0)
    np.testing.assert_array_equal(op.A @ x, [1, 5])
    proj = op.A_pinv @ op.A @ x
    np.testing.assert_array_equal(proj, np.where(np.arange(8) % 4 == 0, x, 0))
    assert max(penrose_residuals(op.A, op.A_pinv)) == 0


def test_imputation_replacement_is_inpainting(rng):
    op = make_imputation_operator(4, 16)
    x = rng.standard_normal((16, 5))
    y = rng.standard_normal((4, 5))
    out = range_space_replace(x, y, op)
    kept = np.arange(16) % 4 == 0
    np.testing.assert_allclose(out[kept], y, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(out[~kept], x[~kept])


def test_apply_is_separable(rng):
    op = make_exact_operator(PSFKernel.gaussian(1.0), 2, 16)
    col = rng.standard_normal(16)
    img = np.repeat(col[:, None], 6, axis=1)
    out = op.apply(img)
    np.testing.assert_allclose(out, np.repeat((op.A @ col)[:, None], 6, axis=1), atol=1e-15)
    np.testing.assert_allclose(op.apply(np.full((16, 3), 0.7)), 0.7, atol=1e-14)


def test_apply_matches_dense_2d_oracle(rng):
    for op in (
        make_exact_operator(PSFKernel.gaussian(2.0), 4, 32),
        make_interpolation_operator(4, 32, "cubic"),
        make_average_operator(2, 16),
    ):
        W = 8
        x = rng.standard_normal((op.n, W))
        # row-major vec: vec(A x) = (A kron I_W) vec(x)
        dense_A = np.kron(op.A, np.eye(W))
        dense_P = np.kron(op.A_pinv, np.eye(W))
        np.testing.assert_allclose(op.apply(x).ravel(), dense_A @ x.ravel(), atol=1e-10)
        np.testing.assert_allclose(op.apply_pinv(op.apply(x)).ravel(), dense_P @ dense_A @ x.ravel(), atol=1e-10)


def test_apply_torch_batch(rng):
    op = make_exact_operator(PSFKernel.gaussian(1.0), 4, 16)
    x = rng.standard_normal((3, 16, 5))
    out = op.apply(torch.from_numpy(x))
    assert isinstance(out, torch.Tensor) and out.shape == (3, 4, 5)
    np.testing.assert_allclose(out.numpy(), op.A @ x, atol=1e-14)


def test_apply_axis_mismatch():
    op = make_average_operator(2, 8)
    with pytest.raises(ValueError):
        op.apply(np.zeros((6, 3)))
    with pytest.raises(ValueError):
        op.apply_pinv(np.zeros((8, 3)))
    with pytest.raises(ValueError):
        range_space_replace(np.zeros((8, 3)), np.zeros((4, 2)), op)


EXACT_BUILDERS = [
    lambda f, n: make_exact_operator(PSFKernel.gaussian(2.0), f, n),
    make_average_operator,
    make_imputation_operator,
]


@pytest.mark.parametrize("build", EXACT_BUILDERS)
def test_replacement_properties(build, rng):
    op = build(4, 32)
    x = rng.standard_normal((32, 6))
    x_gt = rng.standard_normal((32, 6))
    y = op.apply(x_gt)
    out = range_space_replace(x, y, op)
    assert np.abs(op.apply(out) - y).max() < 1e-8
    np.testing.assert_allclose(range_space_replace(out, y, op), out, atol=1e-8)
    np.testing.assert_allclose(range_space_replace(x_gt, y, op), x_gt, atol=1e-10)
    np.testing.assert_allclose(range_space_replace(np.zeros_like(x), y, op), op.apply_pinv(y), atol=1e-15)


def test_interpolation_replacement_low_pass_from_y(rng):
    # A A_pinv != I for antialiased downsampling, so the guided part is the
    # interpolated observation itself: out - (I - A_pinv A) x depends on y only
    op = make_interpolation_operator(4, 32, "linear")
    x = rng.standard_normal((32, 5))
    y = rng.standard_normal((8, 5))
    out = range_space_replace(x, y, op)
    np.testing.assert_allclose(out - (x - op.apply_pinv(op.apply(x))), op.apply_pinv(y), atol=1e-12)
    assert np.abs(op.A @ op.A_pinv - np.eye(8)).max() > 1e-3
    np.testing.assert_allclose(range_space_replace(np.zeros_like(x), y, op), op.apply_pinv(y), atol=1e-15)


def test_make_operator_dispatch():
    assert make_operator("exact-psf", 2, 8, sigma=1.0).kind == "exact-psf"
    assert make_operator("interpolation", 2, 8, method="cubic").method == "cubic"
    assert make_operator("average", 2, 8).kind == "average"
    assert make_operator("imputation", 2, 8).kind == "imputation"
    with pytest.raises(ValueError):
        make_operator("exact-psf", 2, 8)
    with pytest.raises(ValueError):
        make_operator("bogus", 2, 8)


def test_operators_are_cached_and_immutable():
    a = make_average_operator(2, 8)
    assert make_average_operator(2, 8) is a
    with pytest.raises(ValueError):
        a.A[0, 0] = 5.0


def test_shape_validation():
    with pytest.raises(ValueError):
        LinearDegradation("imputation", 2, 8, np.zeros((4, 8)), np.zeros((4, 8)))
