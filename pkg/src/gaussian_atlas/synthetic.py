"""Seeded synthetic clouds for tests, scripts and benchmarks."""

from __future__ import annotations

import numpy as np

from .model import GaussianCloud, canonicalize_quaternions


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    return canonicalize_quaternions(rng.normal(size=(n, 4))) if n else np.zeros((0, 4))


def random_cloud(n: int, seed: int = 0, radius: float = 1.0, center=(0.0, 0.0, 0.0),
                 source_id: str | None = None) -> GaussianCloud:
    """Gaussians scattered through a ball, with object-scale sizes and opacities in [0.05, 1]."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(n, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    r = radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
    pos = np.asarray(center) + direction * r
    scale = radius * np.exp(rng.uniform(np.log(0.005), np.log(0.05), size=(n, 3)))
    return GaussianCloud(
        pos,
        rng.uniform(0.0, 1.0, size=(n, 3)),
        rng.uniform(0.05, 1.0, size=n),
        scale,
        random_quaternions(rng, n),
        source_id=source_id if source_id is not None else f"random-{n}-{seed}",
    )


def shell_with_core(shell: int = 100, core: int = 100, seed: int = 0) -> GaussianCloud:
    """An opaque unit shell of flat tangent splats around a hidden core.

    The shell comes first in the returned order. Core Gaussians sit within
    radius 0.2 and their 3-sigma extent stays inside the shell, yet their
    scale norm is slightly larger than a shell splat's. Ranking by scale
    therefore keeps the core while ranking by visibility keeps the shell.
    """
    rng = np.random.default_rng(seed)
    i = np.arange(shell) + 0.5
    zc = 1.0 - 2.0 * i / shell
    lon = np.pi * (1.0 + np.sqrt(5.0)) * i
    rc = np.sqrt(1.0 - zc * zc)
    normals = np.stack([rc * np.cos(lon), rc * np.sin(lon), zc], axis=1)
    # rotation taking +z to the outward normal, so the thin axis is radial
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, normals)
    s = np.linalg.norm(axis, axis=1)
    c = normals @ z
    half = np.arctan2(s, c) / 2.0
    axis_n = np.where(s[:, None] > 1e-12, axis / np.maximum(s, 1e-12)[:, None], [1.0, 0.0, 0.0])
    quat = np.concatenate([np.cos(half)[:, None], axis_n * np.sin(half)[:, None]], axis=1)
    # tangent sigma matched to 100 splats on the unit sphere, thinner for denser shells
    tangent = 0.3 * min(1.0, np.sqrt(100.0 / max(shell, 1)))
    shell_scale = np.tile([tangent, tangent, 0.005], (shell, 1))

    d = rng.normal(size=(core, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    core_pos = d * 0.2 * rng.uniform(0.0, 1.0, size=(core, 1)) ** (1.0 / 3.0)
    core_scale = np.full((core, 3), 1.02 * np.linalg.norm(shell_scale[0]) / np.sqrt(3.0))

    return GaussianCloud(
        np.concatenate([normals, core_pos]),
        np.concatenate([rng.uniform(0.2, 1.0, size=(shell, 3)), rng.uniform(0.0, 1.0, size=(core, 3))]),
        np.concatenate([np.ones(shell), rng.uniform(0.5, 1.0, size=core)]),
        np.concatenate([shell_scale, core_scale]),
        np.concatenate([canonicalize_quaternions(quat), random_quaternions(rng, core)]),
        source_id=f"shell-{shell}-core-{core}",
    )
