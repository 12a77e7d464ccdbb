"""Per-file conversion steps shared by the CLI and the experiment scripts."""

from __future__ import annotations

import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .atlas import (
    AtlasGrid, SolverConfig, from_atlas, load_atlas, normalized_positions, pixel_of, plane_offset_index,
    save_atlas, save_previews, to_atlas, unpack,
)
from .errors import AtlasError, ValidationError
from .model import GaussianCloud, load_splat_file
from .prune import assess_visibility, prune_to
from .render import psnr, render, ring_cameras
from .sphere import SphereLattice, generate_lattice, grid_side
from .transport import AuctionConfig

log = logging.getLogger(__name__)

ROUNDTRIP_MIN_PSNR = 60.0
ROUNDTRIP_MAX_ERROR = 1e-5


@dataclass
class PipelineConfig:
    n: int = 16384
    tau: int = 36864
    allow_small_tau: bool = False
    prune_strategy: str = "visibility"
    prune_views: int = 32
    prune_resolution: int = 256
    exact_max_sources: int = 4096
    epsilon_start: float | None = None
    epsilon_scale: float = 0.25
    epsilon_min: float | None = None
    max_bids_per_phase: int | None = None
    views: int = 8
    elevation: float = 20.0
    fov: float = 60.0
    resolution: int = 256
    cull: float = 1e-3
    cache_dir: Path = field(default_factory=lambda: Path(".gatlas-cache"))
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        self.cache_dir = Path(self.cache_dir)
        grid_side(self.n)
        if self.tau < self.n and not self.allow_small_tau:
            raise ValidationError(f"tau={self.tau} is below n={self.n}; pass allow_small_tau to override")
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_json(self) -> dict:
        d = asdict(self)
        d["cache_dir"] = str(self.cache_dir)
        return d

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.exact_max_sources, AuctionConfig(
            self.epsilon_start, self.epsilon_scale, self.epsilon_min, self.max_bids_per_phase,
        ))

    def cameras(self, cloud: GaussianCloud):
        b = cloud.bounds
        return ring_cameras(b.center, 2.5 * b.radius, self.views, self.elevation, self.fov,
                            (self.resolution, self.resolution))


def lattice_and_index(cfg: PipelineConfig, n: int | None = None):
    lattice = generate_lattice(n or cfg.n)
    return lattice, plane_offset_index(lattice, cfg.cache_dir, cfg.solver)


def bound_cloud(cloud: GaussianCloud, cfg: PipelineConfig) -> GaussianCloud:
    """Apply the dataset bound tau, then drop the smallest scales down to n."""
    if len(cloud) > cfg.tau:
        report = None
        if cfg.prune_strategy == "visibility":
            report = assess_visibility(cloud, cfg.prune_views, cfg.seed, cfg.prune_resolution)
        cloud = prune_to(cloud, cfg.tau, cfg.prune_strategy, report)
    if len(cloud) > cfg.n:
        cloud = prune_to(cloud, cfg.n, "scale")
    return cloud


def convert_file(path, out_dir, cfg: PipelineConfig, previews: bool = False) -> dict:
    path, out_dir = Path(path), Path(out_dir)
    t0 = time.perf_counter()
    cloud = load_splat_file(path)
    t1 = time.perf_counter()
    kept = bound_cloud(cloud, cfg)
    t2 = time.perf_counter()
    lattice, plane = lattice_and_index(cfg)
    atlas, assignment = to_atlas(kept, lattice, plane, cfg.solver)
    t3 = time.perf_counter()
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"{path.stem}.gatl"
    save_atlas(atlas, out)
    if previews:
        save_previews(atlas, out_dir / "previews", path.stem)
    result = {
        "input": str(path), "output": str(out), "n_input": len(cloud), "n_kept": len(kept),
        "solver": assignment.solver, "sphere_cost": assignment.total_cost,
        "seconds": {"load": t1 - t0, "prune": t2 - t1, "atlas": t3 - t2, "total": time.perf_counter() - t0},
    }
    log.info("converted", extra={"fields": result})
    return result


def _convert_guarded(path, out_dir, cfg_dict: dict, previews: bool) -> dict:
    try:
        return convert_file(path, out_dir, PipelineConfig.from_dict(cfg_dict), previews)
    except AtlasError as exc:
        return {"input": str(path), "error": str(exc), "exit_code": exc.exit_code}
    except OSError as exc:
        return {"input": str(path), "error": str(exc), "exit_code": 2}


def convert_many(paths, out_dir, cfg: PipelineConfig, previews: bool = False) -> list[dict]:
    """Convert files with at most ``cfg.threads`` worker processes; failures are reported, not raised."""
    paths = [Path(p) for p in paths]
    lattice_and_index(cfg)  # build the shared index once before workers start
    workers = min(cfg.threads, len(paths))
    args = [(p, out_dir, cfg.to_json(), previews) for p in paths]
    if workers <= 1:
        return [_convert_guarded(*a) for a in args]
    # numba's threading layers are not fork-safe
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_convert_guarded, *zip(*args)))


def decode_atlas_file(path, cfg: PipelineConfig, cull: float | None = None) -> tuple[AtlasGrid, GaussianCloud]:
    atlas = load_atlas(path)
    lattice, plane = lattice_and_index(cfg, atlas.n)
    return atlas, from_atlas(atlas, lattice, plane, cfg.cull if cull is None else cull)


def attribute_errors(cloud: GaussianCloud, atlas: AtlasGrid, lattice: SphereLattice, plane, assignment) -> dict:
    """Max abs error per attribute between a cloud and its decoded atlas, matched by pixel.

    Positions are compared in normalized space.
    """
    if len(cloud) == 0:
        return dict.fromkeys(("position", "albedo", "opacity", "scale", "rotation"), 0.0)
    decoded, pixels = unpack(atlas, lattice, plane, cull=0.0, return_pixels=True)
    where = np.full(lattice.n, -1)
    where[pixels] = np.arange(len(pixels))
    k = where[pixel_of(assignment, plane)]
    if (k < 0).any():
        return dict.fromkeys(("position", "albedo", "opacity", "scale", "rotation"), float("inf"))
    d = decoded.subset(k)

    def err(a, b):
        return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).max())

    return {
        "position": err(d.positions, normalized_positions(cloud)),
        "albedo": err(d.albedo, cloud.albedo),
        "opacity": err(d.opacity, cloud.opacity),
        "scale": err(d.scale, cloud.scale),
        "rotation": err(d.rotation, cloud.rotation),
    }


def roundtrip(path, cfg: PipelineConfig, work_dir) -> dict:
    """cloud -> GATL file -> cloud, with attribute errors and per-view render PSNR."""
    timings = {}
    t = time.perf_counter()
    cloud = bound_cloud(load_splat_file(path), cfg)
    lattice, plane = lattice_and_index(cfg)
    timings["load"] = time.perf_counter() - t

    t = time.perf_counter()
    atlas, assignment = to_atlas(cloud, lattice, plane, cfg.solver)
    tmp = Path(work_dir) / f"{Path(path).stem}.roundtrip.gatl"
    save_atlas(atlas, tmp)
    timings["to_atlas"] = time.perf_counter() - t

    t = time.perf_counter()
    loaded = load_atlas(tmp)
    decoded = from_atlas(loaded, lattice, plane, cfg.cull)
    errors = attribute_errors(cloud, loaded, lattice, plane, assignment)
    timings["from_atlas"] = time.perf_counter() - t

    t = time.perf_counter()
    views = []
    if len(cloud):
        for cam in cfg.cameras(cloud):
            views.append(psnr(render(cloud, cam).color, render(decoded, cam).color))
    timings["render"] = time.perf_counter() - t

    max_error = max(errors.values())
    passed = all(v >= ROUNDTRIP_MIN_PSNR for v in views) and max_error <= ROUNDTRIP_MAX_ERROR
    return {
        "input": str(path), "n_gaussians": len(cloud),
        "psnr": [_json_float(v) for v in views],
        "min_psnr": _json_float(min(views)) if views else None,
        "attribute_error": errors, "max_attribute_error": max_error,
        "seconds": timings, "passed": passed,
    }


def _json_float(x: float):
    # strict JSON has no infinity; identical renders report the string "inf"
    return x if np.isfinite(x) else "inf"
