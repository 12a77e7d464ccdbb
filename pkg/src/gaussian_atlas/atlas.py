"""Cloud <-> atlas transformation.

A cloud is normalized to the unit ball, its centres are matched to the points
of a Fibonacci sphere lattice (sphere offsetting), and the lattice is matched
once and for all to the vertices of a square grid (plane offsetting). Each
Gaussian then owns one pixel of a 16-channel grid holding its residual offset
from the lattice point plus its attributes, so the transformation is exactly
invertible.
"""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CapacityError, ParseError, StaleCacheError, StateError, ValidationError
from .model import Bounds, GaussianCloud, canonicalize_quaternions, read_container, write_container
from .sphere import SphereLattice, grid_side
from .transport import (
    AssignmentIndex, AuctionConfig, CostSpec, EXACT_MAX_SOURCES, cost_of, load_index, save_index, solve,
)

log = logging.getLogger(__name__)

GATL_MAGIC = b"GATL1\n"
CHANNEL_NAMES = (
    "offset_x", "offset_y", "offset_z", "opacity_a",
    "albedo_r", "albedo_g", "albedo_b", "opacity_b",
    "scale_x", "scale_y", "scale_z", "opacity_c",
    "rot_w", "rot_x", "rot_y", "rot_z",
)
NUM_CHANNELS = len(CHANNEL_NAMES)
OFFSET = slice(0, 3)
ALBEDO = slice(4, 7)
SCALE = slice(8, 11)
ROTATION = slice(12, 16)
OPACITY = (3, 7, 11)
DEFAULT_CULL = 1e-3
DEFAULT_FLOOR = 1e-4


@dataclass(frozen=True)
class SolverConfig:
    """Which assignment solver to use for a given problem size."""

    exact_max_sources: int = EXACT_MAX_SOURCES
    auction: AuctionConfig = field(default_factory=AuctionConfig)

    def solve(self, cost: CostSpec) -> AssignmentIndex:
        return solve(cost, self.exact_max_sources, self.auction)


@dataclass(frozen=True, eq=False)
class AtlasGrid:
    side: int
    data: np.ndarray  # (16, side, side) float32, channel-major
    lattice_hash: str
    normalized: bool = False
    source_id: str = ""
    bounds: Bounds | None = None
    stats_ref: str | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.shape != (NUM_CHANNELS, self.side, self.side):
            raise ValidationError(
                f"atlas data has shape {data.shape}, expected {(NUM_CHANNELS, self.side, self.side)}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.side * self.side

    @property
    def channel_names(self) -> tuple[str, ...]:
        return CHANNEL_NAMES

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNEL_NAMES.index(name)]

    def pixels(self) -> np.ndarray:
        """(n, 16) view, one row per pixel in row-major order."""
        return self.data.reshape(NUM_CHANNELS, -1).T


def normalized_positions(cloud: GaussianCloud) -> np.ndarray:
    """Positions mapped into the unit ball using the cloud's bounds."""
    if len(cloud) == 0:
        return np.zeros((0, 3))
    b = cloud.bounds
    return (cloud.positions.astype(np.float64) - np.asarray(b.center)) / b.radius


# ---------------------------------------------------------------- offsetting


def sphere_offset(cloud: GaussianCloud, lattice: SphereLattice,
                  solver: SolverConfig | None = None) -> tuple[AssignmentIndex, np.ndarray]:
    """Match normalized centres to lattice points; returns (assignment, position - point)."""
    if len(cloud) > lattice.n:
        raise CapacityError(
            f"cloud has {len(cloud)} Gaussians but the lattice only {lattice.n}; "
            "reduce it with prune_to first"
        )
    solver = solver or SolverConfig()
    pos = normalized_positions(cloud)
    index = solver.solve(CostSpec(pos, lattice.points))
    return index, pos - lattice.points[index.mapping]


def grid_vertices(side: int) -> np.ndarray:
    """Pixel centres (u, v) = ((col + 0.5)/side, (row + 0.5)/side) in row-major order."""
    c = (np.arange(side) + 0.5) / side
    v, u = np.meshgrid(c, c, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def plane_cost(lattice: SphereLattice) -> CostSpec:
    return CostSpec(lattice.flat_coords, grid_vertices(lattice.side), wraparound=(1.0, None))


def plane_index_path(cache_dir, lattice: SphereLattice) -> Path:
    return Path(cache_dir) / f"plane_{lattice.n}_{lattice.lattice_hash[:16]}.gidx"


_PLANE_MEMO: dict[str, AssignmentIndex] = {}


def plane_offset_index(lattice: SphereLattice, cache_dir=None,
                       solver: SolverConfig | None = None) -> AssignmentIndex:
    """Lattice point -> grid pixel assignment, computed once per lattice.

    With a ``cache_dir`` the index is persisted as a GIDX file and later calls
    load it, checking the lattice hash and the stored cost.
    """
    key = lattice.lattice_hash
    path = plane_index_path(cache_dir, lattice) if cache_dir is not None else None
    if path is not None and path.exists():
        index = load_plane_index(path, lattice)
    else:
        index = _PLANE_MEMO.get(key) or (solver or SolverConfig()).solve(plane_cost(lattice))
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            os.close(fd)
            save_index(index, tmp, lattice.lattice_hash)
            os.replace(tmp, path)
            log.info("wrote plane index %s", path)
    _PLANE_MEMO[key] = index
    return index


def load_plane_index(path, lattice: SphereLattice) -> AssignmentIndex:
    index, header = load_index(path, expected_hash=lattice.lattice_hash)
    if index.n_source != lattice.n or index.n_target != lattice.n:
        raise StaleCacheError(f"{path} holds a {index.n_source}-entry index, expected {lattice.n}")
    recomputed = cost_of(plane_cost(lattice), index.mapping)
    stored = header.get("total_cost")
    if stored is not None and abs(recomputed - stored) > 1e-9 * max(1.0, abs(stored)):
        raise StaleCacheError(f"{path}: stored cost {stored} does not match {recomputed}; regenerate it")
    return index


# ---------------------------------------------------------------- packing


def _padding_record(cloud: GaussianCloud) -> np.ndarray:
    rec = np.zeros(NUM_CHANNELS)
    if len(cloud) == 0:
        rec[ROTATION] = (1.0, 0.0, 0.0, 0.0)
        return rec
    # argmin returns the lowest index among ties
    k = int(np.argmin(np.linalg.norm(cloud.scale.astype(np.float64), axis=1)))
    rec[ALBEDO] = cloud.albedo[k]
    rec[SCALE] = cloud.scale[k]
    rec[ROTATION] = cloud.rotation[k]
    return rec


def pack(cloud: GaussianCloud, lattice: SphereLattice, plane_index: AssignmentIndex,
         sphere_assignment: AssignmentIndex, offsets: np.ndarray) -> AtlasGrid:
    side = grid_side(lattice.n)
    if plane_index.n_target != side * side or plane_index.n_source != lattice.n:
        raise ValidationError(f"plane index of size {plane_index.n_target} does not fit lattice n={lattice.n}")
    if sphere_assignment.n_source != len(cloud) or sphere_assignment.n_target != lattice.n:
        raise ValidationError("sphere assignment does not match the cloud and lattice")
    offsets = np.asarray(offsets, dtype=np.float64).reshape(len(cloud), 3)

    rows = np.tile(_padding_record(cloud), (lattice.n, 1))
    if len(cloud):
        g = np.empty((len(cloud), NUM_CHANNELS))
        g[:, OFFSET] = offsets
        g[:, ALBEDO] = cloud.albedo
        g[:, SCALE] = cloud.scale
        g[:, ROTATION] = cloud.rotation
        for ch in OPACITY:
            g[:, ch] = cloud.opacity
        rows[plane_index.mapping[sphere_assignment.mapping]] = g
    return AtlasGrid(
        side, rows.T.reshape(NUM_CHANNELS, side, side), lattice.lattice_hash,
        source_id=cloud.source_id, bounds=cloud.bounds,
    )


def unpack(atlas: AtlasGrid, lattice: SphereLattice, plane_index: AssignmentIndex,
           cull: float = DEFAULT_CULL, to_scene: bool = False,
           return_pixels: bool = False):
    """Decode an atlas into a cloud, in pixel order.

    Positions are in normalized space unless ``to_scene`` maps them back with
    the stored bounds. Pixels whose mean opacity is below ``cull`` are dropped,
    and so are zero-scale pixels (the padding of an empty cloud).
    """
    if atlas.normalized:
        raise StateError("atlas is normalized; denormalize it before unpacking")
    if atlas.lattice_hash != lattice.lattice_hash:
        raise ValidationError("atlas was built for a different lattice")
    if atlas.n != lattice.n or plane_index.n_target != lattice.n:
        raise ValidationError("atlas, lattice and plane index sizes disagree")
    px = atlas.pixels().astype(np.float64)
    opacity = np.clip(px[:, OPACITY].sum(axis=1) / 3.0, 0.0, 1.0)
    keep = (opacity >= cull) & (px[:, SCALE] > 0).all(axis=1)
    pixels = np.flatnonzero(keep)
    lattice_idx = plane_index.inverse()[pixels]
    pos = lattice.points[lattice_idx] + px[pixels, OFFSET]
    if to_scene:
        if atlas.bounds is None:
            raise StateError("atlas carries no bounds to map positions back to the scene")
        pos = pos * atlas.bounds.radius + np.asarray(atlas.bounds.center)
    rot = px[pixels, ROTATION]
    if len(pixels):
        rot = canonicalize_quaternions(rot)
    cloud = GaussianCloud(
        pos, px[pixels, ALBEDO], opacity[pixels], px[pixels, SCALE], rot, source_id=atlas.source_id,
    )
    return (cloud, pixels) if return_pixels else cloud


def to_atlas(cloud: GaussianCloud, lattice: SphereLattice, plane_index: AssignmentIndex,
             solver: SolverConfig | None = None) -> tuple[AtlasGrid, AssignmentIndex]:
    assignment, offsets = sphere_offset(cloud, lattice, solver)
    return pack(cloud, lattice, plane_index, assignment, offsets), assignment


def from_atlas(atlas: AtlasGrid, lattice: SphereLattice, plane_index: AssignmentIndex,
               cull: float = DEFAULT_CULL) -> GaussianCloud:
    return unpack(atlas, lattice, plane_index, cull=cull, to_scene=True)


def pixel_of(sphere_assignment: AssignmentIndex, plane_index: AssignmentIndex) -> np.ndarray:
    """Pixel owned by each input Gaussian."""
    return plane_index.mapping[sphere_assignment.mapping]


# ---------------------------------------------------------------- statistics


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray  # (16, side, side) float32
    std: np.ndarray
    corpus_size: int
    floor: float = DEFAULT_FLOOR
    lattice_hash: str = ""
    per_channel: bool = False

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float32)
        std = np.maximum(np.array(self.std, dtype=np.float32), _f32_at_least(self.floor))
        if mean.shape != std.shape or mean.ndim != 3 or mean.shape[0] != NUM_CHANNELS:
            raise ValidationError(f"stats grids must be (16, side, side), got {mean.shape} / {std.shape}")
        for arr in (mean, std):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def side(self) -> int:
        return self.mean.shape[1]

    @property
    def ref(self) -> str:
        h = hashlib.sha256(self.mean.astype("<f4").tobytes())
        h.update(self.std.astype("<f4").tobytes())
        return h.hexdigest()[:16]


def _f32_at_least(x: float) -> np.float32:
    f = np.float32(x)
    return np.nextafter(f, np.float32(np.inf)) if f < x else f


class StatsAccumulator:
    """Per-pixel, per-channel Welford accumulator; shards merge with Chan's formula."""

    def __init__(self):
        self.count = 0
        self.mean: np.ndarray | None = None
        self.m2: np.ndarray | None = None
        self.side: int | None = None
        self.lattice_hash: str | None = None

    def update(self, atlas: AtlasGrid) -> "StatsAccumulator":
        if atlas.normalized:
            raise StateError("statistics must be fitted on unnormalized atlases")
        if self.side is None:
            self.side, self.lattice_hash = atlas.side, atlas.lattice_hash
            self.mean = np.zeros(atlas.data.shape)
            self.m2 = np.zeros(atlas.data.shape)
        elif atlas.side != self.side:
            raise ValidationError(f"mixed atlas sides in corpus: {self.side} and {atlas.side}")
        elif atlas.lattice_hash != self.lattice_hash:
            raise ValidationError("mixed lattices in corpus")
        x = atlas.data.astype(np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)
        return self

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                                  for k, v in other.__dict__.items()})
            return self
        if other.side != self.side or other.lattice_hash != self.lattice_hash:
            raise ValidationError("cannot merge statistics of different atlas layouts")
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        self.count = n
        return self

    def finalize(self, floor: float = DEFAULT_FLOOR, per_channel: bool = False) -> NormStats:
        if self.count == 0:
            raise ValidationError("cannot fit statistics on an empty corpus")
        mean, var = self.mean, self.m2 / self.count
        if per_channel:
            # pool all pixels of a channel: equal counts, so pooled variance is
            # the mean within-pixel variance plus the variance of pixel means
            cm = mean.mean(axis=(1, 2), keepdims=True)
            var = (var + (mean - cm) ** 2).mean(axis=(1, 2), keepdims=True)
            mean = np.broadcast_to(cm, self.mean.shape)
            var = np.broadcast_to(var, self.mean.shape)
        return NormStats(mean, np.maximum(np.sqrt(var), floor), self.count, floor,
                         self.lattice_hash or "", per_channel)


def fit_stats(atlases: Iterable[AtlasGrid], floor: float = DEFAULT_FLOOR,
              per_channel: bool = False) -> NormStats:
    acc = StatsAccumulator()
    for atlas in atlases:
        acc.update(atlas)
    return acc.finalize(floor, per_channel)


def _check_stats(atlas: AtlasGrid, stats: NormStats) -> None:
    if stats.side != atlas.side:
        raise ValidationError(f"stats side {stats.side} does not match atlas side {atlas.side}")


def normalize(atlas: AtlasGrid, stats: NormStats) -> AtlasGrid:
    if atlas.normalized:
        raise StateError("atlas is already normalized")
    _check_stats(atlas, stats)
    x = (atlas.data.astype(np.float64) - stats.mean) / stats.std.astype(np.float64)
    return replace(atlas, data=x, normalized=True, stats_ref=stats.ref)


def denormalize(atlas: AtlasGrid, stats: NormStats) -> AtlasGrid:
    if not atlas.normalized:
        raise StateError("atlas is not normalized")
    _check_stats(atlas, stats)
    if atlas.stats_ref is not None and atlas.stats_ref != stats.ref:
        raise ValidationError(f"atlas was normalized with stats {atlas.stats_ref}, not {stats.ref}")
    x = atlas.data.astype(np.float64) * stats.std + stats.mean
    return replace(atlas, data=x, normalized=False, stats_ref=None)


# ---------------------------------------------------------------- GATL files


def _gatl_header(atlas: AtlasGrid, **extra) -> dict:
    header = {
        "side": atlas.side,
        "channel_names": list(CHANNEL_NAMES),
        "normalized": atlas.normalized,
        "lattice_hash": atlas.lattice_hash,
        "bounds": atlas.bounds.to_json() if atlas.bounds is not None else None,
        "source_id": atlas.source_id,
        "stats_ref": atlas.stats_ref,
    }
    header.update(extra)
    return header


def _write_gatl(path, header: dict, data: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_container(fh, GATL_MAGIC, header, np.ascontiguousarray(data, dtype="<f4").tobytes())


def save_atlas(atlas: AtlasGrid, path) -> None:
    _write_gatl(path, _gatl_header(atlas), atlas.data)


def _read_gatl(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        header, payload = read_container(fh, GATL_MAGIC, path)
    for key in ("side", "channel_names", "normalized", "lattice_hash"):
        if key not in header:
            raise ParseError(f"{path}: missing header field {key!r}")
    if list(header["channel_names"]) != list(CHANNEL_NAMES):
        raise ParseError(f"{path}: unexpected channel layout {header['channel_names']}")
    side = int(header["side"])
    if len(payload) != 4 * NUM_CHANNELS * side * side:
        raise ParseError(f"{path}: payload holds {len(payload)} bytes, expected {4 * NUM_CHANNELS * side * side}")
    return header, np.frombuffer(payload, dtype="<f4").reshape(NUM_CHANNELS, side, side)


def load_atlas(path) -> AtlasGrid:
    header, data = _read_gatl(path)
    bounds = header.get("bounds")
    return AtlasGrid(
        int(header["side"]), data, header["lattice_hash"], bool(header["normalized"]),
        header.get("source_id", ""), Bounds.from_json(bounds) if bounds else None, header.get("stats_ref"),
    )


def stats_paths(prefix) -> tuple[Path, Path]:
    prefix = str(prefix)
    return Path(prefix + ".mean.gatl"), Path(prefix + ".std.gatl")


def save_stats(stats: NormStats, prefix) -> tuple[Path, Path]:
    """Write the statistics as a (mean, std) pair of GATL files."""
    paths = stats_paths(prefix)
    for role, arr, path in zip(("mean", "std"), (stats.mean, stats.std), paths):
        header = {
            "side": stats.side,
            "channel_names": list(CHANNEL_NAMES),
            "normalized": False,
            "lattice_hash": stats.lattice_hash,
            "bounds": None,
            "source_id": f"stats:{role}",
            "stats_ref": stats.ref,
            "role": role,
            "corpus_size": stats.corpus_size,
            "floor": stats.floor,
            "per_channel": stats.per_channel,
        }
        _write_gatl(path, header, arr)
    return paths


def load_stats(prefix) -> NormStats:
    mean_path, std_path = stats_paths(prefix)
    mh, mean = _read_gatl(mean_path)
    sh, std = _read_gatl(std_path)
    if mh.get("role") != "mean" or sh.get("role") != "std":
        raise ParseError(f"{prefix}: not a mean/std statistics pair")
    if mh.get("stats_ref") != sh.get("stats_ref"):
        raise ParseError(f"{prefix}: mean and std files come from different fits")
    stats = NormStats(mean, std, int(mh["corpus_size"]), float(mh["floor"]), mh["lattice_hash"],
                      bool(mh.get("per_channel", False)))
    if stats.ref != mh["stats_ref"]:
        raise ParseError(f"{prefix}: statistics payload does not match its reference hash")
    return stats


def save_previews(atlas: AtlasGrid, out_dir, stem: str | None = None) -> list[Path]:
    """One 8-bit PNG per attribute group, each channel min-max scaled on its own."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or atlas.source_id or "atlas"
    groups = {"offset": OFFSET, "albedo": ALBEDO, "opacity": slice(3, 4), "scale": SCALE, "rotation": ROTATION}
    modes = {1: "L", 3: "RGB", 4: "RGBA"}
    written = []
    for name, sl in groups.items():
        planes = atlas.data[sl].astype(np.float64)
        lo = planes.min(axis=(1, 2), keepdims=True)
        span = planes.max(axis=(1, 2), keepdims=True) - lo
        scaled = np.where(span > 0, (planes - lo) / np.where(span > 0, span, 1.0), 0.0)
        img = np.round(scaled * 255).astype(np.uint8).transpose(1, 2, 0)
        if img.shape[2] == 1:
            img = img[:, :, 0]
        path = out_dir / f"{stem}_{name}.png"
        Image.fromarray(img, mode=modes[planes.shape[0]]).save(path)
        written.append(path)
    return written
