"""Fibonacci unit-sphere lattice and the equirectangular map to [0, 1) x [0, 1]."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError

LATTICE_SCHEME = "fibonacci-spiral"
LATTICE_VERSION = 1
GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


def lattice_hash(n: int) -> str:
    key = f"{LATTICE_SCHEME}|v{LATTICE_VERSION}|n={n}"
    return hashlib.sha256(key.encode("ascii")).hexdigest()


def grid_side(n: int) -> int:
    side = math.isqrt(n) if n >= 0 else -1
    if n < 1 or side * side != n:
        raise ValidationError(f"n={n} is not a positive perfect square")
    return side


@dataclass(frozen=True, eq=False)
class SphereLattice:
    n: int
    points: np.ndarray  # (n, 3) float64, unit norm
    flat_coords: np.ndarray  # (n, 2) float64, (u, v)
    lattice_hash: str

    @property
    def side(self) -> int:
        return grid_side(self.n)


def equirect_many(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    u = (np.arctan2(y, x) + np.pi) / (2.0 * np.pi)
    u[u >= 1.0] = 0.0
    u[(x == 0.0) & (y == 0.0)] = 0.0
    v = (np.arcsin(np.clip(z, -1.0, 1.0)) + np.pi / 2.0) / np.pi
    return np.stack([u, v], axis=1)


def equirect(point) -> np.ndarray:
    """Unit vector -> (u, v); u is longitude in [0, 1), v latitude in [0, 1].

    The longitude is undefined at the poles; u = 0 there.
    """
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,):
        raise ValidationError(f"expected a 3-vector, got shape {p.shape}")
    if abs(np.linalg.norm(p) - 1.0) > 1e-6:
        raise ValidationError(f"point {p.tolist()} is not unit length")
    return equirect_many(p[None])[0]


def equirect_inverse_many(uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    lon = 2.0 * np.pi * uv[:, 0] - np.pi
    lat = np.pi * uv[:, 1] - np.pi / 2.0
    c = np.cos(lat)
    out = np.stack([c * np.cos(lon), c * np.sin(lon), np.sin(lat)], axis=1)
    out[uv[:, 1] == 0.0] = (0.0, 0.0, -1.0)
    out[uv[:, 1] == 1.0] = (0.0, 0.0, 1.0)
    return out


def equirect_inverse(uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    if uv.shape != (2,):
        raise ValidationError(f"expected a 2-vector, got shape {uv.shape}")
    u, v = uv
    if not (0.0 <= u < 1.0 and 0.0 <= v <= 1.0):
        raise ValidationError(f"uv {uv.tolist()} outside [0,1) x [0,1]")
    return equirect_inverse_many(uv[None])[0]


@lru_cache(maxsize=8)
def generate_lattice(n: int) -> SphereLattice:
    """Fibonacci spiral: z_i = 1 - 2(i + 0.5)/n, longitude 2*pi*i/phi^2 (mod 2*pi)."""
    grid_side(n)
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    lon = np.mod(2.0 * np.pi * i / (GOLDEN_RATIO * GOLDEN_RATIO), 2.0 * np.pi)
    r = np.sqrt(1.0 - z * z)
    points = np.stack([r * np.cos(lon), r * np.sin(lon), z], axis=1)
    flat = equirect_many(points)
    points.setflags(write=False)
    flat.setflags(write=False)
    return SphereLattice(n, points, flat, lattice_hash(n))
