"""Degradation operators acting along the z axis and the range-space replacement.

Every operator is a pair of dense matrices: ``A`` (m x n) maps a high-resolution
z profile to the observed one, ``A_pinv`` (n x m) maps back.  Images are acted
on separably: the matrix multiplies axis -2 (z) and every column is treated
identically, so a 2D image has shape ``(n, W)`` and a batch ``(..., n, W)``.

Low-resolution sample ``i`` sits on high-resolution row ``i * f``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

KINDS = ("exact-psf", "interpolation", "average", "imputation")
METHODS = ("linear", "cubic", "lanczos")
SVD_RCOND = 1e-10
PENROSE_TOL = 1e-8


@dataclass(frozen=True)
class PSFKernel:
    sigma: float
    radius: int
    weights: np.ndarray = field(repr=False)

    @classmethod
    def gaussian(cls, sigma: float, radius: int | None = None) -> "PSFKernel":
        if sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        min_radius = math.ceil(3 * sigma)
        radius = min_radius if radius is None else int(radius)
        if radius < min_radius:
            raise ValueError(f"radius {radius} below ceil(3*sigma) = {min_radius}")
        if sigma == 0:
            w = np.zeros(2 * radius + 1)
            w[radius] = 1.0
        else:
            k = np.arange(-radius, radius + 1, dtype=np.float64)
            w = np.exp(-0.5 * (k / sigma) ** 2)
            w = 0.5 * (w + w[::-1])
            w /= w.sum()
        w.setflags(write=False)
        return cls(sigma=float(sigma), radius=radius, weights=w)


def circular_convolution_matrix(psf: PSFKernel, n: int) -> np.ndarray:
    """Dense n x n matrix of wrap-around convolution with ``psf``."""
    P = np.zeros((n, n))
    rows = np.arange(n)
    for k, w in zip(range(-psf.radius, psf.radius + 1), psf.weights):
        np.add.at(P, (rows, (rows + k) % n), w)
    return P


def penrose_residuals(A: np.ndarray, Ap: np.ndarray) -> tuple[float, float, float, float]:
    """Frobenius residuals of the four Moore-Penrose conditions."""
    AAp = A @ Ap
    ApA = Ap @ A
    return (
        float(np.linalg.norm(AAp @ A - A)),
        float(np.linalg.norm(ApA @ Ap - Ap)),
        float(np.linalg.norm(AAp.T - AAp)),
        float(np.linalg.norm(ApA.T - ApA)),
    )


def svd_pinv(A: np.ndarray, rcond: float = SVD_RCOND) -> np.ndarray:
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rcond * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


@dataclass(frozen=True, eq=False)
class LinearDegradation:
    kind: str
    f: int
    n: int
    A: np.ndarray = field(repr=False)
    A_pinv: np.ndarray = field(repr=False)
    sigma: float | None = None
    method: str | None = None
    _torch_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.A.shape != (self.m, self.n) or self.A_pinv.shape != (self.n, self.m):
            raise ValueError(
                f"operator shapes {self.A.shape}, {self.A_pinv.shape} do not match m={self.m}, n={self.n}"
            )
        self.A.setflags(write=False)
        self.A_pinv.setflags(write=False)

    @property
    def m(self) -> int:
        return self.n // self.f

    @property
    def exact_pinv(self) -> bool:
        """Whether A_pinv is the Moore-Penrose inverse of A."""
        return self.kind in ("exact-psf", "average", "imputation")

    def spec(self) -> dict:
        out = {"kind": self.kind, "f": self.f}
        if self.sigma is not None:
            out["sigma"] = self.sigma
        if self.method is not None:
            out["method"] = self.method
        return out

    def _matrix_like(self, M: np.ndarray, name: str, x):
        if isinstance(x, torch.Tensor):
            key = (name, x.dtype, x.device)
            if key not in self._torch_cache:
                self._torch_cache[key] = torch.tensor(M, dtype=x.dtype, device=x.device)
            return self._torch_cache[key]
        return M

    def _mul(self, M: np.ndarray, name: str, x, expect: int):
        if x.ndim < 2 or x.shape[-2] != expect:
            raise ValueError(f"{name} expects axis -2 of length {expect}, got shape {tuple(x.shape)}")
        return self._matrix_like(M, name, x) @ x

    def apply(self, img):
        """A along z: (..., n, W) -> (..., m, W)."""
        return self._mul(self.A, "A", img, self.n)

    def apply_pinv(self, img):
        """A_pinv along z: (..., m, W) -> (..., n, W)."""
        return self._mul(self.A_pinv, "A_pinv", img, self.m)


def range_space_replace(x0t, y, op: LinearDegradation):
    """A_pinv y + (I - A_pinv A) x0t, evaluated operator-wise."""
    if x0t.shape[-2] != op.n or y.shape[-2] != op.m or x0t.shape[-1] != y.shape[-1]:
        raise ValueError(
            f"shape mismatch: x0t {tuple(x0t.shape)}, y {tuple(y.shape)} for n={op.n}, m={op.m}"
        )
    return x0t + op.apply_pinv(y - op.apply(x0t))


def _check_factor(f: int, n: int) -> None:
    if int(f) != f or f < 1:
        raise ValueError(f"factor must be a positive integer, got {f}")
    if int(n) != n or n < 1 or n % f:
        raise ValueError(f"factor {f} does not divide length {n}")


def subsampling_matrix(f: int, n: int) -> np.ndarray:
    S = np.zeros((n // f, n))
    S[np.arange(n // f), np.arange(0, n, f)] = 1.0
    return S


@lru_cache(maxsize=64)
def _exact(sigma: float, radius: int, f: int, n: int) -> LinearDegradation:
    psf = PSFKernel.gaussian(sigma, radius)
    A = subsampling_matrix(f, n) @ circular_convolution_matrix(psf, n)
    try:
        Ap = svd_pinv(A)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"SVD failed for exact-psf operator (sigma={sigma}, f={f}, n={n})") from exc
    res = penrose_residuals(A, Ap)
    # absolute for small operators, relative to |A_pinv| for large ones
    tol = PENROSE_TOL * max(1.0, float(np.linalg.norm(Ap)))
    if max(res) > tol:
        raise RuntimeError(f"pseudo-inverse failed Penrose check: residuals {res}")
    return LinearDegradation("exact-psf", f, n, A, Ap, sigma=float(sigma))


def make_exact_operator(psf: PSFKernel | float, f: int, n: int) -> LinearDegradation:
    """A = S_f P with circular Gaussian blur P; A_pinv by truncated SVD."""
    _check_factor(f, n)
    if not isinstance(psf, PSFKernel):
        psf = PSFKernel.gaussian(float(psf))
    return _exact(psf.sigma, psf.radius, int(f), int(n))


def _kernel(method: str):
    if method == "linear":
        return 1.0, lambda u: np.clip(1.0 - np.abs(u), 0.0, None)
    if method == "cubic":
        a = -0.5

        def cubic(u):
            u = np.abs(u)
            near = ((a + 2) * u - (a + 3)) * u * u + 1
            far = ((u - 5) * u + 8) * u * a - 4 * a
            return np.where(u <= 1, near, np.where(u < 2, far, 0.0))

        return 2.0, cubic
    if method == "lanczos":
        lobes = 3

        def lanczos(u):
            return np.where(np.abs(u) < lobes, np.sinc(u) * np.sinc(u / lobes), 0.0)

        return float(lobes), lanczos
    raise ValueError(f"unknown interpolation method {method!r}; expected one of {METHODS}")


def _resample_matrix(src: int, positions: np.ndarray, support: float, kernel, scale: float) -> np.ndarray:
    """Rows of kernel weights at fractional ``positions`` on a grid of ``src`` samples.

    ``scale`` stretches the kernel (antialiasing when downsampling).  Indices
    beyond the grid are clamped to the edge sample; each row is normalized.
    """
    M = np.zeros((len(positions), src))
    reach = support * scale
    for r, p in enumerate(positions):
        taps = np.arange(math.floor(p - reach), math.ceil(p + reach) + 1)
        w = kernel((taps - p) / scale)
        np.add.at(M, (r, np.clip(taps, 0, src - 1)), w)
        M[r] /= M[r].sum()
    return M


@lru_cache(maxsize=64)
def _interp(f: int, n: int, method: str) -> LinearDegradation:
    support, kernel = _kernel(method)
    m = n // f
    A = _resample_matrix(n, np.arange(m) * float(f), support, kernel, float(f))
    Ap = _resample_matrix(m, np.arange(n) / f, support, kernel, 1.0)
    return LinearDegradation("interpolation", f, n, A, Ap, method=method)


def make_interpolation_operator(f: int, n: int, method: str = "linear") -> LinearDegradation:
    """Blind-PSF pair: antialiased downsampling A and interpolating A_pinv.

    A_pinv is not the pseudo-inverse of A; the pair only fixes the low-pass
    content of a replaced estimate to the interpolated observation.
    """
    _check_factor(f, n)
    _kernel(method)
    return _interp(int(f), int(n), method)


@lru_cache(maxsize=64)
def _average(f: int, n: int) -> LinearDegradation:
    A = np.kron(np.eye(n // f), np.full((1, f), 1.0 / f))
    return LinearDegradation("average", f, n, A, f * A.T)


def make_average_operator(f: int, n: int) -> LinearDegradation:
    _check_factor(f, n)
    return _average(int(f), int(n))


@lru_cache(maxsize=64)
def _imputation(f: int, n: int) -> LinearDegradation:
    S = subsampling_matrix(f, n)
    return LinearDegradation("imputation", f, n, S, S.T.copy())


def make_imputation_operator(f: int, n: int) -> LinearDegradation:
    _check_factor(f, n)
    return _imputation(int(f), int(n))


def make_operator(kind: str, f: int, n: int, sigma: float | None = None, method: str = "linear") -> LinearDegradation:
    """Build an operator from a run-config style spec."""
    if kind == "exact-psf":
        if sigma is None:
            raise ValueError("exact-psf operator needs sigma")
        return make_exact_operator(PSFKernel.gaussian(sigma), f, n)
    if kind == "interpolation":
        return make_interpolation_operator(f, n, method)
    if kind == "average":
        return make_average_operator(f, n)
    if kind == "imputation":
        return make_imputation_operator(f, n)
    raise ValueError(f"unknown operator kind {kind!r}; expected one of {KINDS}")
