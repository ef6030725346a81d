"""Command line interface: train, simulate, reconstruct, evaluate, pipeline.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
``ISORECON_DEVICE`` selects the torch device (default ``cpu``).
"""

from __future__ import annotations

import functools
import logging
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import config as C
from .degrade import make_operator
from .evaluate import per_plane_eval, simulate_anisotropy
from .model import DenoiserCheckpoint, extract_lateral_slices, train_denoiser
from .phantom import membrane_phantom
from .sampler import SliceRecord, ensemble, reconstruct_volume
from .schedule import make_cosine_schedule
from .volume import Volume, denormalize, normalize, percentile_range, read_volume, to_dtype, write_volume

log = logging.getLogger("isorecon")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _device() -> str:
    return os.environ.get("ISORECON_DEVICE", "cpu")


def _suffix(cfg: dict, reference: str | None) -> str:
    fmt = cfg["data"]["format"]
    if fmt:
        return ".raw" if fmt == "raw" else ".tif"
    if reference and Path(reference).suffix.lower() in (".tif", ".tiff", ".raw"):
        return Path(reference).suffix.lower()
    return ".tif"


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["data"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _append(path: Path, line: str) -> None:
    with path.open("a") as fh:
        fh.write(line + "\n")


# --- command bodies (importable, used by tests and the pipeline) ---------------


def run_simulate(cfg: dict) -> Path:
    vol = read_volume(cfg["data"]["input"])
    f = cfg["simulate"]["f"] or cfg["operator"]["f"]
    if vol.shape[0] % f:
        raise C.ConfigError([f"z-extent {vol.shape[0]} of data.input is not divisible by f={f}"])
    low = simulate_anisotropy(vol.data, float(cfg["simulate"]["sigma"]), f)
    out = Volume(to_dtype(low, vol.dtype), vol.value_range, vol.voxel_size)
    path = write_volume(_out_dir(cfg) / f"low{_suffix(cfg, cfg['data']['input'])}", out)
    click.echo(f"simulated {vol.shape} -> {out.shape} (sigma={cfg['simulate']['sigma']}, f={f}): {path}")
    return path


def run_train(cfg: dict) -> Path:
    vol = read_volume(cfg["data"]["input"])
    dcfg = C.denoiser_config_from(cfg)
    tcfg = C.train_config_from(cfg)
    crop = cfg["train"]["crop"]
    if crop > min(vol.shape[1:]):
        raise C.ConfigError([f"train.crop {crop} exceeds lateral extent {vol.shape[1:]}"])
    out = _out_dir(cfg)
    vr = percentile_range(vol.data)
    data = extract_lateral_slices(vol, crop, cfg["train"]["count"], cfg["train"]["seed"], value_range=vr)
    sched = make_cosine_schedule(cfg["steps"]["T"], cfg["steps"]["s"])
    log_path = out / "train.log"
    log_path.write_text("# step loss ema_loss\n")
    ck = train_denoiser(data, sched, dcfg, tcfg, normalization=vr, log_sink=functools.partial(_append, log_path))
    path = ck.save(cfg["data"]["checkpoint"] or out / "denoiser.safetensors")
    click.echo(f"trained {tcfg.steps} steps, final smoothed loss {ck.provenance['final_loss']}: {path}")
    return path


def run_reconstruct(cfg: dict, input_path: str | None = None) -> dict[str, Path]:
    input_path = input_path or cfg["data"]["input"]
    ck = DenoiserCheckpoint.load(cfg["data"]["checkpoint"])
    sched = ck.noise_schedule()
    errors = []
    if sched.T != cfg["steps"]["T"]:
        errors.append(f"checkpoint schedule T={sched.T} does not match steps.T={cfg['steps']['T']}")
    vol = read_volume(input_path)
    m, Y, X = vol.shape
    f = cfg["operator"]["f"]
    sf = ck.denoiser_config.stage_factor
    if Y % sf or X % sf:
        errors.append(f"lateral extents {(Y, X)} must be divisible by the model stage factor {sf}")
    if (m * f) % sf:
        errors.append(f"reconstructed z-extent {m * f} must be divisible by the model stage factor {sf}")
    if errors:
        raise C.ConfigError(errors)

    op_cfg = cfg["operator"]
    sigma = op_cfg["sigma"] if op_cfg["sigma"] is not None else cfg["simulate"]["sigma"]
    op = make_operator(op_cfg["kind"], f, m * f, sigma=sigma, method=op_cfg["method"])
    plan = C.plan_from(cfg)
    model = ck.denoiser(_device())
    low = normalize(vol.data, ck.normalization)
    out = _out_dir(cfg)
    suffix = _suffix(cfg, input_path)
    axes = ["x", "y"] if cfg["axes"] == "both" else [cfg["axes"]]

    results = {}
    paths = {}
    for k, axis in enumerate(axes):
        log_path = out / f"reconstruct_{axis}.log"
        log_path.write_text("# slice residual seconds\n")

        def progress(rec: SliceRecord, log_path=log_path):
            _append(log_path, rec.line())

        rec = reconstruct_volume(low, axis, op, plan, model, sched, seed=cfg["seed"] + k,
                                 chain=cfg["steps"]["chain"], progress=progress)
        click.echo(f"{axis}-pass: {len(rec.records)} slices, max residual {rec.max_residual:.3e}")
        results[axis] = rec.volume
    if len(axes) == 2:
        results["ensemble"] = ensemble(results["x"], results["y"])
    for name, data in results.items():
        phys = denormalize(np.clip(data, -1.0, 1.0), ck.normalization)
        vs = vol.voxel_size
        if vs is not None:
            vs = (vs[0] / f, vs[1], vs[2])
        out_vol = Volume(to_dtype(phys, vol.dtype), vol.value_range, vs)
        paths[name] = write_volume(out / f"recon_{name}{suffix}", out_vol)
    return paths


def run_evaluate(cfg: dict, recon_path: str | None = None, gt_path: str | None = None, method: str = "recon") -> Path:
    recon = read_volume(recon_path or cfg["data"]["input"])
    gt = read_volume(gt_path or cfg["data"]["gt"])
    if recon.shape != gt.shape:
        raise C.ConfigError([f"reconstruction shape {recon.shape} != ground truth shape {gt.shape}"])
    peak = cfg["eval"]["peak"] or gt.peak
    report = per_plane_eval(recon.data, gt.data, peak=peak, method=method, operator=cfg["operator"]["kind"])
    report.convention = f"{gt.dtype} data, peak {peak:g}"
    if cfg["eval"]["external"]:
        report.merge_external(cfg["eval"]["external"])
    path = report.save(_out_dir(cfg) / f"report_{method}.json")
    click.echo(report.table())
    return path


def run_pipeline(cfg: dict) -> dict[str, Path]:
    """simulate -> (train if no checkpoint) -> reconstruct -> evaluate, plus the interpolation baseline."""
    gt_path = cfg["data"]["input"]
    low_path = run_simulate(cfg)
    ck_path = cfg["data"]["checkpoint"]
    if not ck_path or not Path(ck_path).exists():
        train_cfg = {**cfg, "data": {**cfg["data"], "input": str(low_path)}}
        ck_path = str(run_train(train_cfg))
    cfg = {**cfg, "data": {**cfg["data"], "checkpoint": ck_path}}
    paths = run_reconstruct(cfg, str(low_path))

    low = read_volume(low_path)
    f = cfg["operator"]["f"]
    interp = make_operator("interpolation", f, low.shape[0] * f, method="linear")
    base = interp.apply_pinv(low.data.astype(np.float64).reshape(low.shape[0], -1)).reshape(-1, *low.shape[1:])
    base_path = write_volume(_out_dir(cfg) / f"baseline{Path(low_path).suffix}",
                             Volume(to_dtype(base, low.dtype), low.value_range, None))
    reports = {"baseline": run_evaluate(cfg, str(base_path), gt_path, method="baseline")}
    for name, p in paths.items():
        reports[name] = run_evaluate(cfg, str(p), gt_path, method=name)
    return reports


# --- click wiring --------------------------------------------------------------


def _resolve(command: str, config_path, sets, flags: dict) -> dict:
    overrides = [C.parse_assignment(s) for s in sets]
    overrides.append({k: v for k, v in flags.items() if v is not None and not isinstance(v, dict)})
    overrides.extend(v for v in flags.values() if isinstance(v, dict))
    cfg = C.load_config(config_path, overrides)
    errors = C.validate(cfg, command)
    if errors:
        raise C.ConfigError(errors)
    C.dump(cfg, _out_dir(cfg) / f"config.{command}.yaml")
    return cfg


def _run(command: str, body, config_path, sets, flags: dict):
    try:
        cfg = _resolve(command, config_path, sets, flags)
        t0 = time.perf_counter()
        body(cfg)
        log.info("%s finished in %.1fs", command, time.perf_counter() - t0)
    except C.ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        log.exception("%s failed", command)
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


def common(fn):
    fn = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a config key, e.g. steps.R=200.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(), help="YAML run config.")(fn)
    fn = click.option("--input", "input_", help="data.input")(fn)
    fn = click.option("--output-dir", help="data.output_dir")(fn)
    return fn


def _data(input_=None, output_dir=None, **extra):
    d = {"input": input_, "output_dir": output_dir, **extra}
    d = {k: v for k, v in d.items() if v is not None}
    return {"data": d} if d else {}


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int):
    """Isotropic volume reconstruction with a laterally trained 2D diffusion prior."""
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(asctime)s %(name)s %(message)s")


@main.command()
@common
@click.option("--checkpoint", help="data.checkpoint (output path)")
def train(config_path, sets, input_, output_dir, checkpoint):
    """Train the noise predictor on lateral (XY) planes of data.input."""
    _run("train", run_train, config_path, sets, {"d": _data(input_, output_dir, checkpoint=checkpoint)})


@main.command()
@common
@click.option("--sigma", type=float, help="simulate.sigma")
@click.option("-f", "--factor", type=int, help="simulate.f")
def simulate(config_path, sets, input_, output_dir, sigma, factor):
    """Blur along z and keep every f-th slice of an isotropic volume."""
    sim = {k: v for k, v in {"sigma": sigma, "f": factor}.items() if v is not None}
    _run("simulate", run_simulate, config_path, sets, {"d": _data(input_, output_dir), "s": {"simulate": sim} if sim else {}})


def _recon_flags(fn):
    fn = click.option("--operator", type=click.Choice(["exact-psf", "interpolation", "average", "imputation"]), help="operator.kind")(fn)
    fn = click.option("--no-chain", is_flag=True, help="Start every slice from pure noise (ablation).")(fn)
    fn = click.option("--axes", type=click.Choice(["x", "y", "both"]), help="Reconstruction axes.")(fn)
    fn = click.option("--seed", type=int, help="Sampling seed.")(fn)
    return fn


def _recon_overrides(operator, no_chain, axes, seed) -> dict:
    out: dict = {}
    if operator:
        out["operator"] = {"kind": operator}
    if no_chain:
        out["steps"] = {"chain": False}
    if axes:
        out["axes"] = axes
    if seed is not None:
        out["seed"] = seed
    return out


@main.command()
@common
@click.option("--checkpoint", help="data.checkpoint")
@_recon_flags
def reconstruct(config_path, sets, input_, output_dir, checkpoint, operator, no_chain, axes, seed):
    """Reconstruct an anisotropic volume slice by slice."""
    flags = {"d": _data(input_, output_dir, checkpoint=checkpoint), "r": _recon_overrides(operator, no_chain, axes, seed)}
    _run("reconstruct", run_reconstruct, config_path, sets, flags)


@main.command()
@common
@click.option("--gt", help="data.gt")
def evaluate(config_path, sets, input_, output_dir, gt):
    """Score data.input against data.gt per viewing plane."""
    _run("evaluate", run_evaluate, config_path, sets, {"d": _data(input_, output_dir, gt=gt)})


@main.command()
@common
@click.option("--checkpoint", help="data.checkpoint (trained first if missing)")
@_recon_flags
def pipeline(config_path, sets, input_, output_dir, checkpoint, operator, no_chain, axes, seed):
    """simulate -> reconstruct -> evaluate on an isotropic volume."""
    flags = {"d": _data(input_, output_dir, checkpoint=checkpoint), "r": _recon_overrides(operator, no_chain, axes, seed)}
    _run("pipeline", run_pipeline, config_path, sets, flags)


@main.command()
@click.argument("output", type=click.Path())
@click.option("--size", type=int, default=64)
@click.option("--seed", type=int, default=0)
@click.option("--dtype", type=click.Choice(["float32", "uint8", "uint16"]), default="float32")
def phantom(output, size, seed, dtype):
    """Write a seeded isotropic membrane phantom."""
    data = membrane_phantom(size, seed=seed).astype(np.float64)
    if dtype != "float32":
        data = data * np.iinfo(dtype).max
    vr = (0.0, 1.0) if dtype == "float32" else None
    path = write_volume(output, Volume.from_array(to_dtype(data, dtype), value_range=vr))
    click.echo(f"wrote {path}")


@main.command("show-config")
@click.option("--config", "config_path", type=click.Path())
@click.option("--set", "sets", multiple=True)
def show_config(config_path, sets):
    """Print the resolved configuration (defaults applied)."""
    import yaml

    try:
        cfg = C.load_config(config_path, [C.parse_assignment(s) for s in sets])
    except C.ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(yaml.safe_dump(cfg, sort_keys=False))


if __name__ == "__main__":
    main()
