"""Synthetic anisotropy and per-plane image-quality scoring."""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .degrade import PSFKernel, make_exact_operator

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03
WIN_SIZE, WIN_SIGMA = 11, 1.5
PLANES = ("ZY", "ZX", "XY")


def _as_array(vol) -> np.ndarray:
    return np.asarray(getattr(vol, "data", vol))


def simulate_anisotropy(vol, sigma: float, f: int) -> np.ndarray:
    """Blur along z with a circular Gaussian PSF and keep every f-th slice.

    Uses the exact-psf operator, so the result equals ``op.apply`` column-wise.
    """
    data = _as_array(vol).astype(np.float64)
    n = data.shape[0]
    op = make_exact_operator(PSFKernel.gaussian(sigma), f, n)
    return op.apply(data.reshape(n, -1)).reshape(op.m, *data.shape[1:])


def psnr(a, b, peak: float = 1.0) -> float:
    """20 log10(peak) - 10 log10(MSE); ``inf`` for identical inputs."""
    a = _as_array(a).astype(np.float64)
    b = _as_array(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 20 * math.log10(peak) - 10 * math.log10(mse)


def _gaussian_window(size: int) -> np.ndarray:
    k = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (k / WIN_SIGMA) ** 2)
    return w / w.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    for axis in (1, 2):
        x = correlate1d(x, win, axis=axis, mode="reflect")
    h, w = x.shape[1:]
    return x[:, r:h - (len(win) - 1 - r), r:w - (len(win) - 1 - r)]


def _ssim_terms(a: np.ndarray, b: np.ndarray, data_range: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-plane mean SSIM and contrast-structure term over the valid region."""
    win = _gaussian_window(min(WIN_SIZE, *a.shape[1:]))
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a**2
    var_b = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return (lum * cs).mean(axis=(1, 2)), cs.mean(axis=(1, 2))


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[1] // 2 * 2, x.shape[2] // 2 * 2
    x = x[:, :h, :w]
    return 0.25 * (x[:, 0::2, 0::2] + x[:, 1::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 1::2])


def ms_ssim_scales(side: int) -> int:
    """Largest scale count (up to 5) whose coarsest image still spans the window."""
    scales = len(MS_SSIM_WEIGHTS)
    while scales > 1 and side <= (WIN_SIZE - 1) * 2 ** (scales - 1):
        scales -= 1
    return scales


def ms_ssim(a, b, data_range: float = 1.0, scales: int | None = None) -> float:
    """Multi-scale SSIM of a 2D image or the mean over a (P, H, W) plane stack.

    Planes smaller than 161 px drop the coarsest scales (with a warning) and the
    remaining exponents are renormalized to sum to one.
    """
    a = _as_array(a).astype(np.float64)
    b = _as_array(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    side = min(a.shape[1:])
    if scales is None:
        scales = ms_ssim_scales(side)
        if scales < len(MS_SSIM_WEIGHTS):
            warnings.warn(f"plane side {side} too small for 5-scale MS-SSIM; using {scales} scales", stacklevel=2)
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    value = np.ones(a.shape[0])
    for j in range(scales):
        ssim_j, cs_j = _ssim_terms(a, b, data_range)
        term = ssim_j if j == scales - 1 else cs_j
        value *= np.clip(term, 0.0, None) ** weights[j]
        if j < scales - 1:
            a, b = _pool2(a), _pool2(b)
    return float(np.clip(value.mean(), 0.0, 1.0))


def plane_stack(vol: np.ndarray, plane: str) -> np.ndarray:
    """All slices of one orthogonal plane family as (P, H, W)."""
    if plane == "ZY":
        return np.moveaxis(vol, 2, 0)
    if plane == "ZX":
        return np.moveaxis(vol, 1, 0)
    if plane == "XY":
        return vol
    raise ValueError(f"unknown plane {plane!r}")


@dataclass
class PlaneRow:
    plane: str
    psnr: float
    ms_ssim: float
    extra: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    rows: list[PlaneRow]
    method: str = "recon"
    operator: str = ""
    peak: float = 1.0
    convention: str = "float, normalized to [0, 1]"
    runtime_s: float = 0.0

    def row(self, plane: str) -> PlaneRow:
        for r in self.rows:
            if r.plane == plane:
                return r
        raise KeyError(plane)

    def to_dict(self) -> dict:
        d = asdict(self)
        for r in d["rows"]:
            if math.isinf(r["psnr"]):
                r["psnr"] = "inf"
        return d

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        rows = [PlaneRow(r["plane"], float(r["psnr"]), r["ms_ssim"], r.get("extra", {})) for r in d.pop("rows")]
        return cls(rows=rows, **d)

    def table(self) -> str:
        extras = sorted({k for r in self.rows for k in r.extra})
        head = ["plane", "PSNR", "MS-SSIM", *extras]
        lines = [f"# {self.method} [{self.operator}] peak={self.peak:g} ({self.convention})", " | ".join(head)]
        for r in self.rows:
            cells = [r.plane, f"{r.psnr:.2f}", f"{r.ms_ssim:.3f}", *(f"{r.extra.get(k, float('nan')):.3f}" for k in extras)]
            lines.append(" | ".join(cells))
        return "\n".join(lines)

    def merge_external(self, path: str | Path, metric: str = "lpips") -> None:
        """Merge per-plane scores from an external tool (e.g. LPIPS).

        Accepts JSON ``{"ZY": v, "ZX": v, "XY": v}`` or CSV with columns
        ``plane,<metric>``.
        """
        path = Path(path)
        if path.suffix.lower() == ".csv":
            with path.open() as fh:
                scores = {r["plane"]: float(r[metric]) for r in csv.DictReader(fh)}
        else:
            scores = {k: float(v) for k, v in json.loads(path.read_text()).items()}
        for r in self.rows:
            if r.plane in scores:
                r.extra[metric] = scores[r.plane]


def per_plane_eval(recon, gt, peak: float = 1.0, method: str = "recon", operator: str = "") -> EvalReport:
    """PSNR and MS-SSIM averaged over the slices of the ZY, ZX and XY families."""
    t0 = time.perf_counter()
    recon = _as_array(recon).astype(np.float64)
    gt = _as_array(gt).astype(np.float64)
    if recon.shape != gt.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {gt.shape}")
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for plane in PLANES:
            r, g = plane_stack(recon, plane), plane_stack(gt, plane)
            p = float(np.mean([psnr(ri, gi, peak) for ri, gi in zip(r, g)]))
            rows.append(PlaneRow(plane, p, ms_ssim(r, g, data_range=peak)))
    return EvalReport(rows, method=method, operator=operator, peak=peak, runtime_s=time.perf_counter() - t0)
