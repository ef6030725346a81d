"""Null-space constrained DDIM sampling chained slice by slice through a volume.

All sampler arithmetic runs in float64 torch; the noise predictor is any
callable ``model(x_t, t) -> eps_hat`` returning a tensor shaped like ``x_t``.
A 2D slice has shape ``(z, lateral)``; the degradation acts on axis -2.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .degrade import LinearDegradation, range_space_replace
from .schedule import NoiseSchedule, ddim_sigma

log = logging.getLogger(__name__)

NoisePredictor = Callable[[torch.Tensor, int], torch.Tensor]


def uniform_levels(start: int, stop: int, count: int) -> list[int]:
    """``count`` evenly spaced integer levels from ``start`` to ``stop`` inclusive."""
    if count == 1:
        return [int(start)]
    levels = np.rint(np.linspace(start, stop, count)).astype(int).tolist()
    if any(a == b for a, b in zip(levels, levels[1:])):
        raise ValueError(f"cannot place {count} distinct levels between {start} and {stop}")
    return levels


@dataclass(frozen=True)
class StepPlan:
    """Level grids for one chained slice.

    The first (unchained) slice runs ``first_slice_steps`` reverse steps from
    ``T``; ``first_slice_steps=None`` visits every level.
    """

    T: int = 1000
    R: int = 200
    encode_steps: int = 4
    decode_steps: int = 50
    first_slice_steps: int | None = None

    def __post_init__(self):
        if not 1 <= self.R <= self.T:
            raise ValueError(f"R must lie in [1, T={self.T}], got {self.R}")
        if not 1 <= self.encode_steps <= self.R:
            raise ValueError(f"encode_steps must lie in [1, R={self.R}], got {self.encode_steps}")
        if not 1 <= self.decode_steps <= self.R:
            raise ValueError(f"decode_steps must lie in [1, R={self.R}], got {self.decode_steps}")
        if self.first_slice_steps is not None and not 1 <= self.first_slice_steps <= self.T:
            raise ValueError(f"first_slice_steps must lie in [1, T={self.T}], got {self.first_slice_steps}")

    @property
    def first_slice_T(self) -> int:
        return self.T

    def encode_levels(self) -> list[int]:
        """0 = l_0 < l_1 < ... < l_k = R."""
        return uniform_levels(0, self.R, self.encode_steps + 1)

    def decode_levels(self) -> list[int]:
        """R = l_0 > ... > l_{k-1} = 1."""
        return uniform_levels(self.R, 1, self.decode_steps)

    def first_slice_levels(self) -> list[int]:
        return uniform_levels(self.T, 1, self.first_slice_steps or self.T)


def estimate_x0(x_t, t: int, eps_hat, sched: NoiseSchedule):
    """(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    if tuple(x_t.shape) != tuple(eps_hat.shape):
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(eps_hat.shape)}")
    t = sched.check_level(t, lo=0)
    ab = sched.alpha_bars[t]
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def _levels(plan_or_levels, attr: str) -> list[int]:
    if isinstance(plan_or_levels, StepPlan):
        return getattr(plan_or_levels, attr)()
    return [int(v) for v in plan_or_levels]


@torch.no_grad()
def ddim_encode(x0: torch.Tensor, plan: StepPlan | Sequence[int], model: NoisePredictor, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM inversion of ``x0`` up to level R (no noise injected).

    ``plan`` may be a StepPlan or an explicit increasing level list starting at 0.
    """
    levels = _levels(plan, "encode_levels")
    if levels[0] != 0 or any(b <= a for a, b in zip(levels, levels[1:])) or levels[-1] > sched.T:
        raise ValueError(f"encode levels must increase from 0 to at most T: {levels}")
    x = x0
    for t, nxt in zip(levels, levels[1:]):
        eps = model(x, t)
        x0t = estimate_x0(x, t, eps, sched)
        ab = sched.alpha_bars[nxt]
        x = math.sqrt(ab) * x0t + math.sqrt(1.0 - ab) * eps
    return x


@torch.no_grad()
def ddnm_decode(
    x_start: torch.Tensor,
    levels: StepPlan | Sequence[int],
    y: torch.Tensor,
    op: LinearDegradation,
    model: NoisePredictor,
    sched: NoiseSchedule,
    rng: torch.Generator | None,
    deterministic: bool = False,
) -> torch.Tensor:
    """Reverse diffusion with range-space replacement after every x0 estimate.

    ``levels`` is the decreasing grid (``levels[0]`` is the noise level of
    ``x_start``), or a StepPlan whose decode grid is used.  Returns the
    replaced estimate from the last level, which satisfies ``A x = A A_pinv y``.
    """
    levels = _levels(levels, "decode_levels")
    if any(b >= a for a, b in zip(levels, levels[1:])) or levels[-1] < 1 or levels[0] > sched.T:
        raise ValueError(f"decode levels must decrease within [1, T]: {levels}")
    if x_start.shape[-2] != op.n or y.shape[-2] != op.m:
        raise ValueError(f"shape mismatch: x {tuple(x_start.shape)}, y {tuple(y.shape)} for operator n={op.n}, m={op.m}")
    x = x_start
    for j, t in enumerate(levels):
        nxt = levels[j + 1] if j + 1 < len(levels) else 0
        eps = model(x, t)
        x0t = estimate_x0(x, t, eps, sched)
        x0h = range_space_replace(x0t, y, op)
        if nxt == 0:
            return x0h
        sigma = ddim_sigma(sched, t, deterministic=deterministic, t_prev=nxt)
        ab = sched.alpha_bars[nxt]
        x = math.sqrt(ab) * x0h + math.sqrt(max(1.0 - ab - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype, device="cpu").to(x.device)
    raise AssertionError("unreachable")


@dataclass
class SliceChain:
    """Running state of a sequential reconstruction along one axis."""

    axis: str
    rng: torch.Generator
    prev_x0: torch.Tensor | None = None
    chain: bool = True

    @classmethod
    def start(cls, axis: str, seed: int, chain: bool = True) -> "SliceChain":
        if axis not in ("x", "y"):
            raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
        return cls(axis=axis, rng=torch.Generator().manual_seed(int(seed)), chain=chain)


def reconstruct_slice(
    y_i: torch.Tensor,
    chain: SliceChain,
    op: LinearDegradation,
    plan: StepPlan,
    model: NoisePredictor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Reconstruct one (n, W) slice from its (m, W) observation and advance ``chain``."""
    if y_i.ndim != 2 or y_i.shape[0] != op.m:
        raise ValueError(f"observation must have shape (m={op.m}, W), got {tuple(y_i.shape)}")
    if plan.T != sched.T:
        raise ValueError(f"plan T={plan.T} does not match schedule T={sched.T}")
    shape = (op.n, y_i.shape[1])
    if chain.prev_x0 is not None and tuple(chain.prev_x0.shape) != shape:
        raise ValueError(f"previous slice shape {tuple(chain.prev_x0.shape)} != {shape}")
    y_i = y_i.to(torch.float64)
    if chain.prev_x0 is None or not chain.chain:
        x_T = torch.randn(shape, generator=chain.rng, dtype=torch.float64)
        out = ddnm_decode(x_T, plan.first_slice_levels(), y_i, op, model, sched, chain.rng)
    else:
        x_R = ddim_encode(chain.prev_x0, plan, model, sched)
        out = ddnm_decode(x_R, plan.decode_levels(), y_i, op, model, sched, chain.rng)
    chain.prev_x0 = out
    return out


@dataclass
class SliceRecord:
    index: int
    residual: float
    seconds: float

    def line(self) -> str:
        return f"{self.index} {self.residual:.3e} {self.seconds:.3f}"


@dataclass
class Reconstruction:
    volume: np.ndarray  # (n, Y, X) float64, normalized units
    axis: str
    records: list[SliceRecord] = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return max((r.residual for r in self.records), default=0.0)


def _slice(vol: np.ndarray, axis: str, i: int) -> np.ndarray:
    return vol[:, :, i] if axis == "x" else vol[:, i, :]


def _save_state(path: Path, out: np.ndarray, next_index: int, chain: SliceChain, records: list[SliceRecord]) -> None:
    tmp = path.with_name(path.name + ".tmp.npz")
    prev = np.zeros(0) if chain.prev_x0 is None else chain.prev_x0.numpy()
    np.savez(
        tmp,
        volume=out,
        next_index=next_index,
        prev_x0=prev,
        rng_state=chain.rng.get_state().numpy(),
        records=np.array([(r.index, r.residual, r.seconds) for r in records]).reshape(-1, 3),
    )
    tmp.replace(path)


def reconstruct_volume(
    vol_low: np.ndarray,
    axis: str,
    op: LinearDegradation,
    plan: StepPlan,
    model: NoisePredictor,
    sched: NoiseSchedule,
    seed: int,
    chain: bool = True,
    state_path: str | Path | None = None,
    checkpoint_every: int = 0,
    progress: Callable[[SliceRecord], None] | None = None,
) -> Reconstruction:
    """Reconstruct a normalized (m, Y, X) stack into (n, Y, X) slice by slice.

    ``axis='x'`` walks ZY slices along x; ``axis='y'`` walks ZX slices along y.
    Slices are visited in ascending order and each one starts from the
    encoded previous result unless ``chain`` is False.  With ``state_path``
    and ``checkpoint_every`` the partial volume is saved every K slices and an
    existing state file is resumed from.
    """
    vol_low = np.asarray(vol_low, dtype=np.float64)
    if vol_low.ndim != 3:
        raise ValueError("vol_low must be a 3D (z, y, x) array")
    m, Y, X = vol_low.shape
    if m != op.m:
        raise ValueError(f"volume z-extent {m} != operator low-res length {op.m}")
    state = SliceChain.start(axis, seed, chain)
    out = np.zeros((op.n, Y, X))
    count = X if axis == "x" else Y
    records: list[SliceRecord] = []
    start = 0

    state_path = Path(state_path) if state_path is not None else None
    if state_path is not None and state_path.exists():
        saved = np.load(state_path)
        if saved["volume"].shape == out.shape:
            out = saved["volume"].copy()
            start = int(saved["next_index"])
            if saved["prev_x0"].size:
                state.prev_x0 = torch.from_numpy(saved["prev_x0"].copy())
            state.rng.set_state(torch.from_numpy(saved["rng_state"].copy()))
            records = [SliceRecord(int(i), float(r), float(s)) for i, r, s in saved["records"]]
            log.info("resuming %s-pass at slice %d from %s", axis, start, state_path)

    for i in range(start, count):
        t0 = time.perf_counter()
        y_i = torch.from_numpy(np.ascontiguousarray(_slice(vol_low, axis, i)))
        x_i = reconstruct_slice(y_i, state, op, plan, model, sched)
        residual = float((op.apply(x_i) - y_i).abs().max())
        if axis == "x":
            out[:, :, i] = x_i.numpy()
        else:
            out[:, i, :] = x_i.numpy()
        rec = SliceRecord(i, residual, time.perf_counter() - t0)
        records.append(rec)
        log.debug("slice %s", rec.line())
        if progress is not None:
            progress(rec)
        if state_path is not None and checkpoint_every and (i + 1) % checkpoint_every == 0 and i + 1 < count:
            _save_state(state_path, out, i + 1, state, records)
    return Reconstruction(out, axis, records)


def ensemble(vol_a: np.ndarray, vol_b: np.ndarray) -> np.ndarray:
    """Voxel-wise mean of two reconstructions."""
    vol_a = np.asarray(vol_a)
    vol_b = np.asarray(vol_b)
    if vol_a.shape != vol_b.shape:
        raise ValueError(f"shape mismatch: {vol_a.shape} vs {vol_b.shape}")
    return 0.5 * (vol_a + vol_b)
