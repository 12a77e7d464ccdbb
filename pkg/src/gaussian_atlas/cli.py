"""gatlas: batch conversion between splat clouds and Gaussian atlases.

Exit codes: 0 success, 1 validation, 2 I/O, 3 numerical-contract failure.
Options can also come from a TOML file given with ``--config``; top-level keys
apply to every command, ``[command]`` tables to one command, and flags given
on the command line always win.
"""

from __future__ import annotations

import functools
import glob
import hashlib
import json
import logging
import sys
import tempfile
import time
from pathlib import Path

import click
import numpy as np

from .atlas import (
    denormalize, fit_stats, load_atlas, load_stats, normalize, plane_cost, plane_index_path,
    save_atlas, save_stats,
)
from .errors import AtlasError, ContractError, ValidationError
from .model import load_splat_file, save_cloud, save_ply
from .pipeline import PipelineConfig, convert_many, decode_atlas_file, lattice_and_index, roundtrip
from .prune import STRATEGIES, assess_visibility, prune_to, save_report
from .render import Camera, render, ring_cameras, save_png
from .schedule import VARIANTS, build_schedule, identity_errors
from .sphere import generate_lattice
from .transport import load_index, row_costs

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("gaussian_atlas")


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {"time": round(record.created, 3), "level": record.levelname.lower(),
                 "logger": record.name, "event": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, default=str)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level.upper())
    log.propagate = False


def _emit(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True, default=str))


def _load_config_file(ctx: click.Context, _param, value):
    if value is None:
        return None
    try:
        with open(value, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise click.BadParameter(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise click.BadParameter(f"invalid TOML: {exc}") from exc
    shared = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
    default_map = {}
    for name, cmd in ctx.command.commands.items():
        params = {p.name for p in cmd.params}
        section = {k.replace("-", "_"): v for k, v in data.get(name, {}).items()}
        merged = {k: v for k, v in {**shared, **section}.items() if k in params}
        if merged:
            default_map[name] = merged
    ctx.default_map = default_map
    return value


def handles_errors(fn):
    """Map library errors to exit codes and report them as one JSON line."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            code = fn(*args, **kwargs)
        except AtlasError as exc:
            log.error(str(exc), extra={"fields": {"kind": type(exc).__name__}})
            ctx.exit(exc.exit_code)
        except OSError as exc:
            log.error(str(exc), extra={"fields": {"kind": type(exc).__name__}})
            ctx.exit(2)
        ctx.exit(code or 0)

    return wrapper


def config_options(fn):
    """Options that feed PipelineConfig."""
    d = PipelineConfig.__dataclass_fields__
    opts = [
        click.option("--n", type=int, default=d["n"].default, show_default=True, help="Atlas size (perfect square)."),
        click.option("--tau", type=int, default=d["tau"].default, show_default=True, help="Prune bound."),
        click.option("--allow-small-tau", is_flag=True, help="Permit tau < n."),
        click.option("--prune-strategy", type=click.Choice(STRATEGIES), default="visibility", show_default=True),
        click.option("--prune-views", type=int, default=32, show_default=True),
        click.option("--exact-max-sources", type=int, default=4096, show_default=True,
                     help="Largest problem solved exactly; bigger ones use the auction."),
        click.option("--epsilon-min", type=float, default=None, help="Auction final epsilon (default 1e-7 x mean cost)."),
        click.option("--epsilon-scale", type=float, default=0.25, show_default=True),
        click.option("--cache-dir", type=click.Path(file_okay=False, path_type=Path),
                     default=Path(".gatlas-cache"), show_default=True),
        click.option("--threads", type=int, default=1, show_default=True, help="Worker processes."),
        click.option("--seed", type=int, default=0, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def ring_options(fn):
    opts = [
        click.option("--views", type=int, default=8, show_default=True),
        click.option("--elevation", type=float, default=20.0, show_default=True, help="Degrees."),
        click.option("--fov", type=float, default=60.0, show_default=True, help="Degrees."),
        click.option("--resolution", type=int, default=256, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _config(**kw) -> PipelineConfig:
    return PipelineConfig.from_dict(kw)


class AtlasGroup(click.Group):
    """Click group whose usage errors exit 1 (validation) instead of click's 2."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        if not standalone_mode:
            return super().main(args, prog_name, complete_var, standalone_mode, **extra)
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as exc:
            exc.show()
            sys.exit(1)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(1)
        sys.exit(rv if isinstance(rv, int) else 0)


@click.group(cls=AtlasGroup)
@click.option("--config", type=click.Path(dir_okay=False), callback=_load_config_file, is_eager=True,
              expose_value=False, help="TOML file with option defaults.")
@click.option("--log-level", default="info", show_default=True,
              type=click.Choice(["debug", "info", "warning", "error"]))
def cli(log_level):
    """Convert 3D Gaussian splat clouds to 2D atlases and back."""
    _setup_logging(log_level)


@cli.command("index")
@config_options
@click.option("--check-rows", type=int, default=64, show_default=True, help="Rows spot-checked after loading.")
@handles_errors
def cmd_index(check_rows, **kw):
    """Build (or verify) the cached plane-offset index for n."""
    cfg = _config(**kw)
    lattice = generate_lattice(cfg.n)
    path = plane_index_path(cfg.cache_dir, lattice)
    existed = path.exists()
    t = time.perf_counter()
    try:
        lattice_and_index(cfg)
    except AtlasError as exc:
        raise type(exc)(f"{exc}; delete {path} and re-run `gatlas index --n {cfg.n}`") from exc
    index, header = load_index(path, lattice.lattice_hash)
    # spot-check rows against a direct wrap-aware recomputation
    rng = np.random.default_rng(cfg.seed)
    rows = rng.choice(cfg.n, size=min(check_rows, cfg.n), replace=False)
    cost = plane_cost(lattice)
    du = np.abs(cost.source_points[rows, 0] - cost.target_points[index.mapping[rows], 0]) % 1.0
    du = np.minimum(du, 1.0 - du)
    dv = cost.source_points[rows, 1] - cost.target_points[index.mapping[rows], 1]
    direct = du * du + dv * dv
    if not np.allclose(row_costs(cost, index.mapping)[rows], direct, rtol=0, atol=1e-12):
        raise ContractError(f"{path}: spot-checked row costs disagree; delete it and regenerate")
    _emit({
        "index": str(path), "n": cfg.n, "reused": existed, "solver": header["solver"],
        "total_cost": header.get("total_cost"), "rows_checked": int(len(rows)),
        "sha256": hashlib.sha256(path.read_bytes()).hexdigest(), "seconds": time.perf_counter() - t,
    })


@cli.command("to-atlas")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(path_type=Path))
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--previews/--no-previews", default=False, help="Also write PNG channel previews.")
@config_options
@handles_errors
def cmd_to_atlas(inputs, out_dir, previews, **kw):
    """Convert PLY / GCLD clouds to GATL atlases."""
    cfg = _config(**kw)
    results = convert_many(inputs, out_dir, cfg, previews)
    for r in results:
        _emit(r)
    failures = [r for r in results if "error" in r]
    _emit({"converted": len(results) - len(failures), "failed": len(failures)})
    return max((r["exit_code"] for r in failures), default=0)


@cli.command("from-atlas")
@click.argument("atlas_path", type=click.Path(path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Output cloud; .ply writes a 3DGS PLY, anything else GCLD.")
@click.option("--stats", "stats_prefix", default=None, help="Stats prefix, needed for normalized atlases.")
@click.option("--cull", type=float, default=1e-3, show_default=True, help="Drop pixels below this opacity.")
@config_options
@handles_errors
def cmd_from_atlas(atlas_path, out, stats_prefix, cull, **kw):
    """Decode a GATL atlas back into a cloud in scene units."""
    cfg = _config(**kw)
    atlas = load_atlas(atlas_path)
    if atlas.normalized:
        if stats_prefix is None:
            raise ValidationError("atlas is normalized; pass --stats to denormalize it")
        atlas = denormalize(atlas, load_stats(stats_prefix))
        with tempfile.TemporaryDirectory() as tmp:
            save_atlas(atlas, Path(tmp) / "a.gatl")
            _, cloud = decode_atlas_file(Path(tmp) / "a.gatl", cfg, cull)
    else:
        _, cloud = decode_atlas_file(atlas_path, cfg, cull)
    (save_ply if out.suffix == ".ply" else save_cloud)(cloud, out)
    _emit({"input": str(atlas_path), "output": str(out), "n_gaussians": len(cloud)})


@cli.command("render")
@click.argument("input_path", type=click.Path(path_type=Path))
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--background", nargs=3, type=float, default=(0.0, 0.0, 0.0), show_default=True)
@click.option("--raw", is_flag=True, help="Also save float32 .npy images.")
@ring_options
@config_options
@handles_errors
def cmd_render(input_path, out_dir, background, raw, views, elevation, fov, resolution, **kw):
    """Render a cloud or an atlas from a ring of cameras."""
    cfg = _config(**kw)
    with open(input_path, "rb") as fh:
        is_atlas = fh.read(6) == b"GATL1\n"
    cloud = decode_atlas_file(input_path, cfg)[1] if is_atlas else load_splat_file(input_path)
    if len(cloud) == 0:
        raise ValidationError("nothing to render: cloud is empty")
    out_dir.mkdir(parents=True, exist_ok=True)
    b = cloud.bounds
    written = []
    for k, cam in enumerate(ring_cameras(b.center, 2.5 * b.radius, views, elevation, fov, (resolution, resolution))):
        out = render(cloud, cam, background)
        path = out_dir / f"{input_path.stem}_view{k:02d}.png"
        save_png(out.color, path)
        if raw:
            np.save(out_dir / f"{input_path.stem}_view{k:02d}.npy", out.color.astype(np.float32))
        written.append(str(path))
    _emit({"input": str(input_path), "images": written})


@cli.command("roundtrip")
@click.argument("input_path", type=click.Path(path_type=Path))
@click.option("--report", "report_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@ring_options
@config_options
@handles_errors
def cmd_roundtrip(input_path, report_path, views, elevation, fov, resolution, **kw):
    """cloud -> atlas -> cloud; exit 3 if any view is below 60 dB or any attribute error above 1e-5."""
    cfg = _config(views=views, elevation=elevation, fov=fov, resolution=resolution, **kw)
    with tempfile.TemporaryDirectory() as tmp:
        report = roundtrip(input_path, cfg, tmp)
    if report_path is not None:
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    _emit(report)
    return 0 if report["passed"] else ContractError.exit_code


@cli.command("prune")
@click.argument("input_path", type=click.Path(path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--bound", type=int, required=True, help="Keep at most this many Gaussians.")
@click.option("--strategy", type=click.Choice(STRATEGIES), default="visibility", show_default=True)
@click.option("--views", type=int, default=32, show_default=True)
@click.option("--resolution", type=int, default=256, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--report-out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write the visibility report as JSON.")
@handles_errors
def cmd_prune(input_path, out, bound, strategy, views, resolution, seed, report_out):
    """Reduce a cloud to at most --bound Gaussians."""
    cloud = load_splat_file(input_path)
    report = None
    if strategy == "visibility" or report_out is not None:
        report = assess_visibility(cloud, views, seed, resolution)
        if report_out is not None:
            save_report(report, report_out)
    kept = prune_to(cloud, bound, strategy, report)
    (save_ply if out.suffix == ".ply" else save_cloud)(kept, out)
    _emit({"input": str(input_path), "output": str(out), "n_input": len(cloud), "n_kept": len(kept)})


@cli.command("stats")
@click.argument("patterns", nargs=-1, required=True)
@click.option("--out", "prefix", required=True, help="Output prefix for <prefix>.mean.gatl / .std.gatl.")
@click.option("--floor", type=float, default=1e-4, show_default=True, help="Minimum std.")
@click.option("--per-channel", is_flag=True, help="Pool pixels per channel (small corpora).")
@click.option("--histogram", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="CSV of Gaussian counts per atlas.")
@click.option("--bins", type=int, default=16, show_default=True)
@handles_errors
def cmd_stats(patterns, prefix, floor, per_channel, histogram, bins):
    """Fit per-pixel normalization statistics over a corpus of atlases."""
    files = sorted({p for pat in patterns for p in glob.glob(pat)})
    if not files:
        raise ValidationError(f"no atlas files match {' '.join(patterns)}")
    counts = []

    def stream():
        for f in files:
            atlas = load_atlas(f)
            counts.append(int((atlas.pixels()[:, 3] > 0).sum()))
            yield atlas

    stats = fit_stats(stream(), floor, per_channel)
    paths = save_stats(stats, prefix)
    if histogram is not None:
        edges = np.linspace(0, stats.side ** 2, bins + 1)
        hist, _ = np.histogram(counts, bins=edges)
        lines = ["bin_start,bin_end,count"]
        lines += [f"{int(a)},{int(b)},{int(c)}" for a, b, c in zip(edges[:-1], edges[1:], hist)]
        histogram.write_text("\n".join(lines) + "\n")
    _emit({"files": len(files), "mean": str(paths[0]), "std": str(paths[1]), "stats_ref": stats.ref})


@cli.command("noise-check")
@click.argument("atlas_path", type=click.Path(path_type=Path))
@click.option("--stats", "stats_prefix", default=None, help="Stats prefix used to normalize the atlas.")
@click.option("--variant", type=click.Choice(VARIANTS), default="scaled_linear", show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@handles_errors
def cmd_noise_check(atlas_path, stats_prefix, variant, steps, seed, tol):
    """Check the schedule and v-parameterization identities on an atlas, for every step."""
    atlas = load_atlas(atlas_path)
    if not atlas.normalized:
        if stats_prefix is None:
            raise ValidationError("atlas is not normalized; pass --stats")
        atlas = normalize(atlas, load_stats(stats_prefix))
    sched = build_schedule(variant, steps)
    noise = np.random.default_rng(seed).standard_normal(atlas.data.shape)
    worst = {"variance": float(np.abs(sched.alphas ** 2 + sched.sigmas ** 2 - 1).max()), "x0": 0.0, "noise": 0.0}
    for t in range(steps):
        e_x0, e_eps = identity_errors(atlas, noise, t, sched)
        worst["x0"] = max(worst["x0"], e_x0)
        worst["noise"] = max(worst["noise"], e_eps)
    passed = all(v <= tol for v in worst.values())
    _emit({"input": str(atlas_path), "variant": variant, "steps": steps, "max_error": worst, "passed": passed})
    return 0 if passed else ContractError.exit_code


def main(argv=None):
    cli.main(args=argv, prog_name="gatlas")


if __name__ == "__main__":
    main()
