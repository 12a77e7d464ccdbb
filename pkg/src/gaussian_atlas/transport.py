"""Hard optimal transport between point sets with uniform unit masses.

Every source is matched to a distinct target (rectangular assignment,
``len(sources) <= len(targets)``) minimising the summed squared distance,
optionally periodic along some axes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import _auction
from .errors import CapacityError, ParseError, SolverError, StaleCacheError, ValidationError
from .model import read_container, write_container

log = logging.getLogger(__name__)

GIDX_MAGIC = b"GIDX1\n"
EXACT_MAX_SOURCES = 4096
SOLVERS = ("exact", "auction")


@dataclass(frozen=True, eq=False)
class CostSpec:
    source_points: np.ndarray
    target_points: np.ndarray
    metric: str = "squared_euclidean"
    wraparound: tuple[float | None, ...] | None = None

    def __post_init__(self):
        src = np.ascontiguousarray(self.source_points, dtype=np.float64)
        tgt = np.ascontiguousarray(self.target_points, dtype=np.float64)
        if tgt.ndim != 2:
            raise ValidationError("target points must be an (N, d) array")
        if src.size == 0:
            src = src.reshape(0, tgt.shape[1])
        if src.ndim != 2 or src.shape[1] != tgt.shape[1]:
            raise ValidationError("source and target points must share dimension d")
        if tgt.shape[1] not in (2, 3):
            raise ValidationError(f"dimension must be 2 or 3, got {tgt.shape[1]}")
        if len(src) > len(tgt):
            raise ValidationError(f"{len(src)} sources cannot be injected into {len(tgt)} targets")
        if self.metric != "squared_euclidean":
            raise ValidationError(f"unsupported metric {self.metric!r}")
        if self.wraparound is not None:
            if len(self.wraparound) != tgt.shape[1]:
                raise ValidationError("wraparound needs one entry per dimension")
            if any(p is not None and p <= 0 for p in self.wraparound):
                raise ValidationError("wraparound periods must be positive")
        object.__setattr__(self, "source_points", src)
        object.__setattr__(self, "target_points", tgt)

    @property
    def periods(self) -> np.ndarray:
        """Per-dimension period, 0 where the axis is not periodic."""
        d = self.target_points.shape[1]
        if self.wraparound is None:
            return np.zeros(d)
        return np.array([0.0 if p is None else float(p) for p in self.wraparound])

    def mean_cost(self) -> float:
        """Exact mean of the cost over all source/target pairs."""
        src, tgt = self.source_points, self.target_points
        if len(src) == 0:
            return 0.0
        total = 0.0
        for d, p in enumerate(self.periods):
            a, b = src[:, d], tgt[:, d]
            if p > 0:
                total += _auction.mean_periodic_sq(a, b, p)
            else:
                total += a.var() + b.var() + (a.mean() - b.mean()) ** 2
        return float(total)

    def dense(self) -> np.ndarray:
        src, tgt = self.source_points, self.target_points
        cost = np.zeros((len(src), len(tgt)))
        buf = np.empty_like(cost)
        for d, p in enumerate(self.periods):
            np.subtract.outer(src[:, d], tgt[:, d], out=buf)
            if p > 0:
                np.abs(buf, out=buf)
                np.mod(buf, p, out=buf)
                np.minimum(buf, p - buf, out=buf)
            np.square(buf, out=buf)
            cost += buf
        return cost


@dataclass(frozen=True, eq=False)
class AssignmentIndex:
    mapping: np.ndarray
    total_cost: float
    solver: str
    epsilon_final: float
    n_target: int

    def __post_init__(self):
        mp = np.array(self.mapping, dtype=np.int64).reshape(-1)
        _check_mapping(mp, self.n_target)
        if self.solver not in SOLVERS:
            raise ValidationError(f"unknown solver {self.solver!r}")
        mp.setflags(write=False)
        object.__setattr__(self, "mapping", mp)

    @property
    def n_source(self) -> int:
        return len(self.mapping)

    def inverse(self) -> np.ndarray:
        """target -> source, -1 for unmatched targets."""
        inv = np.full(self.n_target, -1, dtype=np.int64)
        inv[self.mapping] = np.arange(len(self.mapping))
        return inv


@dataclass(frozen=True)
class AuctionConfig:
    epsilon_start: float | None = None  # default: mean pairwise cost / 8
    epsilon_scale: float = 0.25
    epsilon_min: float | None = None  # default: 1e-7 * mean pairwise cost
    max_bids_per_phase: int | None = None  # default: 1000 * n_target
    window: int = 64

    def resolve(self, mean_cost: float) -> tuple[float, float]:
        scale = mean_cost if mean_cost > 0 else 1.0
        eps_min = self.epsilon_min if self.epsilon_min is not None else 1e-7 * scale
        eps_start = self.epsilon_start if self.epsilon_start is not None else scale / 8.0
        if not (0 < self.epsilon_scale < 1):
            raise ValidationError("epsilon_scale must lie in (0, 1)")
        if eps_min <= 0:
            raise ValidationError("epsilon_min must be positive")
        return max(eps_start, eps_min), eps_min


def _check_mapping(mapping: np.ndarray, n_target: int) -> None:
    if len(mapping) and (mapping.min() < 0 or mapping.max() >= n_target):
        raise ValidationError("assignment index out of range")
    if len(np.unique(mapping)) != len(mapping):
        raise ValidationError("assignment maps two sources to the same target")


def row_costs(cost: CostSpec, mapping) -> np.ndarray:
    """Per-source cost of the given assignment."""
    mp = np.asarray(mapping, dtype=np.int64).reshape(-1)
    if len(mp) != len(cost.source_points):
        raise ValidationError(f"mapping has {len(mp)} entries for {len(cost.source_points)} sources")
    _check_mapping(mp, len(cost.target_points))
    delta = np.abs(cost.source_points - cost.target_points[mp])
    for d, p in enumerate(cost.periods):
        if p > 0:
            w = np.mod(delta[:, d], p)
            delta[:, d] = np.minimum(w, p - w)
    return (delta * delta).sum(axis=1)


def cost_of(cost: CostSpec, mapping) -> float:
    return float(row_costs(cost, mapping).sum())


def solve_exact(cost: CostSpec, max_sources: int = EXACT_MAX_SOURCES) -> AssignmentIndex:
    """Globally optimal rectangular assignment (shortest augmenting path, LAPJV family)."""
    m, n = len(cost.source_points), len(cost.target_points)
    if m > max_sources:
        raise CapacityError(
            f"{m} sources exceed the exact-solver guard of {max_sources}; use solve_scalable"
        )
    if m == 0:
        return AssignmentIndex(np.zeros(0, np.int64), 0.0, "exact", 0.0, n)
    rows, cols = linear_sum_assignment(cost.dense())
    mapping = np.empty(m, dtype=np.int64)
    mapping[rows] = cols
    return AssignmentIndex(mapping, cost_of(cost, mapping), "exact", 0.0, n)


def solve_scalable(cost: CostSpec, config: AuctionConfig | None = None) -> AssignmentIndex:
    """Auction with epsilon-scaling.

    The returned total cost is within ``len(sources) * epsilon_min`` of the
    optimum. Bidders are processed in a fixed FIFO order and ties go to the
    lowest target index, so the output is a pure function of the inputs.
    """
    config = config or AuctionConfig()
    m, n = len(cost.source_points), len(cost.target_points)
    if m == 0:
        return AssignmentIndex(np.zeros(0, np.int64), 0.0, "auction", 0.0, n)
    eps_start, eps_min = config.resolve(cost.mean_cost())
    # dummy bidders pad the problem to n persons; shrink the last epsilon so
    # the n * eps optimality gap of the square problem stays m * eps_min
    eps_final = eps_min * m / n
    max_bids = config.max_bids_per_phase or 1000 * n
    mapping, eps, bids, status = _auction.auction(
        cost.source_points, cost.target_points, cost.periods,
        float(eps_start), float(config.epsilon_scale), float(eps_final), int(max_bids), int(config.window),
    )
    if status != _auction.STATUS_OK:
        raise SolverError(f"auction did not converge within {max_bids} bids at epsilon={eps:.3e}")
    log.debug("auction m=%d n=%d bids=%d eps_final=%.3e", m, n, bids, eps)
    return AssignmentIndex(mapping, cost_of(cost, mapping), "auction", float(eps), n)


def solve(cost: CostSpec, exact_max_sources: int = EXACT_MAX_SOURCES,
          config: AuctionConfig | None = None) -> AssignmentIndex:
    """Exact below the size guard, auction above it."""
    if len(cost.source_points) <= exact_max_sources:
        return solve_exact(cost, exact_max_sources)
    return solve_scalable(cost, config)


# ---------------------------------------------------------------- GIDX


def save_index(index: AssignmentIndex, path, lattice_hash: str) -> None:
    header = {
        "n_source": index.n_source,
        "n_target": index.n_target,
        "solver": index.solver,
        "epsilon_final": index.epsilon_final,
        "lattice_hash": lattice_hash,
        "total_cost": index.total_cost,
    }
    with open(path, "wb") as fh:
        write_container(fh, GIDX_MAGIC, header, index.mapping.astype("<u4").tobytes())


def load_index(path, expected_hash: str | None = None) -> tuple[AssignmentIndex, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        header, payload = read_container(fh, GIDX_MAGIC, path)
    for key in ("n_source", "n_target", "solver", "epsilon_final", "lattice_hash"):
        if key not in header:
            raise ParseError(f"{path}: missing header field {key!r}")
    if expected_hash is not None and header["lattice_hash"] != expected_hash:
        raise StaleCacheError(
            f"{path} was built for lattice {header['lattice_hash'][:12]}..., "
            f"expected {expected_hash[:12]}...; delete it and regenerate the index"
        )
    n_source = int(header["n_source"])
    if len(payload) != 4 * n_source:
        raise ParseError(f"{path}: payload holds {len(payload)} bytes, expected {4 * n_source}")
    mapping = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    index = AssignmentIndex(
        mapping, float(header.get("total_cost", float("nan"))), header["solver"],
        float(header["epsilon_final"]), int(header["n_target"]),
    )
    return index, header
