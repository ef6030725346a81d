"""Noise predictor: a time-conditioned 2D U-Net, its training loop and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .schedule import NoiseSchedule
from .volume import Volume, normalize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "isorecon-denoiser/1"


@dataclass(frozen=True)
class DenoiserConfig:
    in_size: int = 256
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    attention_resolutions: tuple[int, ...] = (2, 3)  # stage indices, 0 = finest
    time_embed_dim: int = 256
    num_res_blocks: int = 2
    dropout: float = 0.0
    sigma_data: float | None = 0.5  # output preconditioning scale; None = bare U-Net head

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(c) for c in self.channel_multipliers))
        object.__setattr__(self, "attention_resolutions", tuple(int(a) for a in self.attention_resolutions))
        if not self.channel_multipliers:
            raise ValueError("need at least one stage")
        if min(self.base_channels, self.time_embed_dim, self.num_res_blocks, *self.channel_multipliers) < 1:
            raise ValueError("all widths must be positive")
        if self.in_size % self.stage_factor:
            raise ValueError(f"in_size {self.in_size} not divisible by {self.stage_factor}")
        if self.sigma_data is not None and not self.sigma_data > 0:
            raise ValueError(f"sigma_data must be positive or None, got {self.sigma_data}")
        bad = [a for a in self.attention_resolutions if not 0 <= a < len(self.channel_multipliers)]
        if bad:
            raise ValueError(f"attention stages {bad} out of range")

    @property
    def stage_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    batch: int = 4
    steps: int = 100_000
    ema_decay: float = 0.9999
    seed: int = 0
    log_every: int = 100
    grad_clip: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 0 <= self.ema_decay < 1:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")


# --- network -------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(32, ch) if ch % min(32, ch) == 0 else 1, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, dropout: float):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = _norm(cout)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.drop(F.silu(self.norm2(h))))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm = _norm(ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, emb=None):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        out = F.scaled_dot_product_attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2))
        return x + self.proj(out.transpose(1, 2).reshape(b, c, h, w))


class UNet(nn.Module):
    """DDPM-style U-Net predicting the noise in a single-channel image."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        base, temb = cfg.base_channels, cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.inp = nn.Conv2d(1, base, 3, padding=1)

        widths = [base * m for m in cfg.channel_multipliers]
        self.down = nn.ModuleList()
        skips = [base]
        ch = base
        for i, w in enumerate(widths):
            for _ in range(cfg.num_res_blocks):
                layers = [ResBlock(ch, w, temb, cfg.dropout)]
                if i in cfg.attention_resolutions:
                    layers.append(Attention(w))
                self.down.append(nn.ModuleList(layers))
                ch = w
                skips.append(ch)
            if i < len(widths) - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)

        self.mid = nn.ModuleList([ResBlock(ch, ch, temb, cfg.dropout), Attention(ch), ResBlock(ch, ch, temb, cfg.dropout)])

        self.up = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            for _ in range(cfg.num_res_blocks + 1):
                layers = [ResBlock(ch + skips.pop(), w, temb, cfg.dropout)]
                if i in cfg.attention_resolutions:
                    layers.append(Attention(w))
                self.up.append(nn.ModuleList(layers))
                ch = w
            if i > 0:
                self.up.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, ch, 3, padding=1)))

        self.out = nn.Sequential(_norm(ch), nn.SiLU(), nn.Conv2d(ch, 1, 3, padding=1))
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels))
        h = self.inp(x)
        hs = [h]
        for mod in self.down:
            if isinstance(mod, nn.ModuleList):
                for layer in mod:
                    h = layer(h, emb)
            else:
                h = mod(h)
            hs.append(h)
        for layer in self.mid:
            h = layer(h, emb)
        for mod in self.up:
            if isinstance(mod, nn.ModuleList):
                h = torch.cat([h, hs.pop()], dim=1)
                for layer in mod:
                    h = layer(h, emb)
            else:
                h = mod(h)
        return self.out(h)


class NoisePredictor(nn.Module):
    """eps_theta(x_t, t) = c_skip(t) x_t + c_out(t) F(x_t, t) around a U-Net F.

    With a = sqrt(abar_t), b = sqrt(1 - abar_t) and data scale s, c_skip =
    b / (a^2 s^2 + b^2) is the best linear noise estimate and c_out =
    a s / sqrt(a^2 s^2 + b^2) the spread of what is left.  Near t = T this
    pins eps_hat to x_t, so x0 = (x_t - b eps_hat) / a is bounded by F instead
    of amplifying the network's error by 1/a.  The optimum is unchanged.
    """

    def __init__(self, cfg: DenoiserConfig, alpha_bars):
        super().__init__()
        if cfg.sigma_data is None:
            raise ValueError("NoisePredictor needs cfg.sigma_data")
        self.cfg = cfg
        self.unet = UNet(cfg)
        ab = torch.tensor(np.asarray(alpha_bars, dtype=np.float64))
        self.register_buffer("alpha_bars", ab, persistent=False)

    def coefficients(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        ab = self.alpha_bars[t]
        s2 = self.cfg.sigma_data ** 2
        denom = ab * s2 + (1 - ab)
        return (1 - ab).sqrt() / denom, ab.sqrt() * self.cfg.sigma_data / denom.sqrt()

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        c_skip, c_out = (c.to(x.dtype).view(-1, 1, 1, 1) for c in self.coefficients(t))
        return c_skip * x + c_out * self.unet(x, t)


def build_network(cfg: DenoiserConfig, sched: NoiseSchedule) -> nn.Module:
    if cfg.sigma_data is None:
        return UNet(cfg)
    if len(sched.alpha_bars) != sched.T + 1:
        raise ValueError("schedule must include abar_0")
    return NoisePredictor(cfg, sched.alpha_bars)


# --- data ----------------------------------------------------------------------


def extract_lateral_slices(vol: Volume, crop: int, count: int, seed: int,
                           value_range: tuple[float, float] | None = None) -> np.ndarray:
    """Seeded random XY-plane crops normalized to [-1, 1], shape (count, crop, crop).

    Each crop gets a random flip / 90-degree rotation within the plane.
    """
    _, Y, X = vol.shape
    if crop > Y or crop > X:
        raise ValueError(f"volume lateral extent {(Y, X)} smaller than crop {crop}")
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(seed)
    vr = vol.value_range if value_range is None else value_range
    out = np.empty((count, crop, crop), dtype=np.float32)
    for k in range(count):
        z = rng.integers(vol.shape[0])
        y0 = rng.integers(Y - crop + 1)
        x0 = rng.integers(X - crop + 1)
        img = vol.data[z, y0:y0 + crop, x0:x0 + crop]
        img = np.rot90(img, k=int(rng.integers(4)))
        if rng.integers(2):
            img = img[:, ::-1]
        out[k] = normalize(img, vr)
    return out


def dataset_fingerprint(data: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(data).tobytes()).hexdigest()[:16]


# --- checkpoint ----------------------------------------------------------------


@dataclass
class DenoiserCheckpoint:
    ema: dict[str, torch.Tensor]
    raw: dict[str, torch.Tensor]
    denoiser_config: DenoiserConfig
    schedule: dict
    normalization: tuple[float, float]
    provenance: dict = field(default_factory=dict)
    _metadata: str | None = field(default=None, repr=False)

    def metadata_record(self) -> str:
        if self._metadata is not None:
            return self._metadata
        return json.dumps(
            {
                "format": CHECKPOINT_FORMAT,
                "denoiser_config": asdict(self.denoiser_config),
                "schedule": self.schedule,
                "normalization": list(self.normalization),
                "provenance": self.provenance,
            },
            sort_keys=True,
        )

    def to_bytes(self) -> bytes:
        tensors = {f"ema.{k}": v.contiguous() for k, v in self.ema.items()}
        tensors.update({f"raw.{k}": v.contiguous() for k, v in self.raw.items()})
        return st_save(tensors, metadata={"isorecon": self.metadata_record()})

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DenoiserCheckpoint":
        header_len = int.from_bytes(blob[:8], "little")
        header = json.loads(blob[8:8 + header_len])
        text = header.get("__metadata__", {}).get("isorecon")
        if text is None:
            raise ValueError("not an isorecon checkpoint (missing metadata record)")
        meta = json.loads(text)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        tensors = st_load(blob)
        ema = {k[4:]: v for k, v in tensors.items() if k.startswith("ema.")}
        raw = {k[4:]: v for k, v in tensors.items() if k.startswith("raw.")}
        return cls(
            ema=ema,
            raw=raw,
            denoiser_config=DenoiserConfig(**meta["denoiser_config"]),
            schedule=meta["schedule"],
            normalization=tuple(meta["normalization"]),
            provenance=meta["provenance"],
            _metadata=text,
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DenoiserCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.from_params(self.schedule)

    def denoiser(self, device: str | torch.device = "cpu") -> "Denoiser":
        net = build_network(self.denoiser_config, self.noise_schedule())
        net.load_state_dict(self.ema)
        return Denoiser(net.to(device))


class Denoiser:
    """Inference wrapper around the EMA network.

    Called as ``denoiser(x_t, t)`` with ``x_t`` of shape ``(H, W)`` or
    ``(B, H, W)`` and an integer level ``t``; returns the predicted noise in the
    input's dtype.  The network itself runs in float32.
    """

    def __init__(self, net: nn.Module):
        self.net = net.eval()
        self.stage_factor = net.cfg.stage_factor
        self.device = next(net.parameters()).device

    @torch.no_grad()
    def __call__(self, x_t: torch.Tensor, t) -> torch.Tensor:
        if not torch.isfinite(x_t).all():
            raise ValueError("x_t contains non-finite values")
        h, w = x_t.shape[-2:]
        if h % self.stage_factor or w % self.stage_factor:
            raise ValueError(f"spatial shape {(h, w)} not divisible by {self.stage_factor}")
        lead = x_t.shape[:-2]
        x = x_t.reshape(-1, 1, h, w).to(self.device, torch.float32)
        tt = torch.as_tensor(t, device=self.device).reshape(-1).expand(x.shape[0])
        eps = self.net(x, tt)
        return eps.reshape(*lead, h, w).to(x_t.device, x_t.dtype)


def predict_noise(denoiser: Callable, x_t: torch.Tensor, t) -> torch.Tensor:
    return denoiser(x_t, t)


# --- training ------------------------------------------------------------------


def diffusion_loss(net: nn.Module, x0: torch.Tensor, sched: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    """Monte-Carlo estimate of E ||eps - eps_theta(sqrt(abar) x0 + sqrt(1-abar) eps, t)||^2 (per-pixel mean)."""
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator)
    ab = torch.tensor(sched.alpha_bars, dtype=torch.float32)[t].view(b, 1, 1, 1)
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    return F.mse_loss(net(x_t, t), eps)


@torch.no_grad()
def _ema_update(ema: nn.Module, net: nn.Module, decay: float) -> None:
    for pe, p in zip(ema.parameters(), net.parameters()):
        pe.lerp_(p, 1.0 - decay)
    for be, b in zip(ema.buffers(), net.buffers()):
        be.copy_(b)


def train_denoiser(
    data: np.ndarray,
    sched: NoiseSchedule,
    dcfg: DenoiserConfig,
    tcfg: TrainConfig,
    normalization: tuple[float, float] = (-1.0, 1.0),
    log_sink: Callable[[str], None] | None = None,
) -> DenoiserCheckpoint:
    """Fit the noise predictor on ``data`` (N, H, W) in [-1, 1].

    Each log line is ``step loss ema_loss``; ``ema_loss`` is an exponential
    moving average of the batch loss.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError("training set must be a non-empty (N, H, W) stack")
    if data.shape[1] % dcfg.stage_factor or data.shape[2] % dcfg.stage_factor:
        raise ValueError(f"crop {data.shape[1:]} not divisible by {dcfg.stage_factor}")

    torch.manual_seed(tcfg.seed)
    gen = torch.Generator().manual_seed(tcfg.seed)
    net = build_network(dcfg, sched)
    ema = copy.deepcopy(net).requires_grad_(False)
    opt = torch.optim.Adam(net.parameters(), lr=tcfg.lr)
    x_all = torch.from_numpy(data).unsqueeze(1)

    smoothed = None
    for step in range(1, tcfg.steps + 1):
        idx = torch.randint(0, len(x_all), (tcfg.batch,), generator=gen)
        loss = diffusion_loss(net, x_all[idx], sched, gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {step}: loss={loss.item()} (lr={tcfg.lr})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if tcfg.grad_clip:
            nn.utils.clip_grad_norm_(net.parameters(), tcfg.grad_clip)
        opt.step()
        # warm-up keeps early EMA weights from being dominated by the random init
        _ema_update(ema, net, min(tcfg.ema_decay, (1 + step) / (10 + step)))

        value = loss.item()
        smoothed = value if smoothed is None else 0.99 * smoothed + 0.01 * value
        if step % tcfg.log_every == 0 or step == tcfg.steps:
            line = f"{step} {value:.6f} {smoothed:.6f}"
            log.info("train %s", line)
            if log_sink is not None:
                log_sink(line)

    return DenoiserCheckpoint(
        ema={k: v.detach().clone() for k, v in ema.state_dict().items()},
        raw={k: v.detach().clone() for k, v in net.state_dict().items()},
        denoiser_config=dcfg,
        schedule=sched.params(),
        normalization=(float(normalization[0]), float(normalization[1])),
        provenance={
            "seed": tcfg.seed,
            "steps": tcfg.steps,
            "train_config": asdict(tcfg),
            "dataset": dataset_fingerprint(data),
            "final_loss": smoothed,
        },
    )


@torch.no_grad()
def evaluate_loss(denoiser_or_net, x0: np.ndarray | torch.Tensor, sched: NoiseSchedule, draws: int, seed: int,
                  batch: int = 64) -> tuple[float, float]:
    """Mean and standard error of the per-pixel loss over ``draws`` (t, eps) samples."""
    net = denoiser_or_net.net if isinstance(denoiser_or_net, Denoiser) else denoiser_or_net
    x0 = torch.as_tensor(np.asarray(x0, dtype=np.float32))
    if x0.ndim == 3:
        x0 = x0.unsqueeze(1)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    done = 0
    while done < draws:
        b = min(batch, draws - done)
        idx = torch.randint(0, len(x0), (b,), generator=gen)
        t = torch.randint(1, sched.T + 1, (b,), generator=gen)
        eps = torch.randn((b, *x0.shape[1:]), generator=gen)
        ab = torch.tensor(sched.alpha_bars, dtype=torch.float32)[t].view(b, 1, 1, 1)
        x_t = ab.sqrt() * x0[idx] + (1 - ab).sqrt() * eps
        losses.append(((net(x_t, t) - eps) ** 2).mean(dim=(1, 2, 3)))
        done += b
    per = torch.cat(losses).double()
    return per.mean().item(), (per.std() / math.sqrt(len(per))).item()


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def iter_log(lines: Iterable[str]) -> list[tuple[int, float, float]]:
    """Parse training log lines back into (step, loss, ema_loss) tuples."""
    out = []
    for line in lines:
        s, a, b = line.split()
        out.append((int(s), float(a), float(b)))
    return out
