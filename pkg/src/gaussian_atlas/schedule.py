"""Variance-preserving noise schedules and v-parameterization targets for atlas diffusion training.

Grids are handled as float64 arrays. An ``AtlasGrid`` is accepted anywhere an
array is, but must be normalized first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .atlas import AtlasGrid, save_atlas
from .errors import StateError, ValidationError

VARIANTS = ("scaled_linear", "cosine")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    steps: int
    alphas: np.ndarray  # signal coefficient per step, non-increasing
    sigmas: np.ndarray  # noise coefficient per step, sqrt(1 - alpha^2)
    variant: str

    def coefficients(self, t: int) -> tuple[float, float]:
        if not 0 <= t < self.steps:
            raise ValidationError(f"timestep {t} outside [0, {self.steps})")
        return float(self.alphas[t]), float(self.sigmas[t])


def build_schedule(variant: str = "scaled_linear", steps: int = 1000,
                   beta_start: float = 0.00085, beta_end: float = 0.012,
                   cosine_offset: float = 0.008) -> NoiseSchedule:
    if steps < 1:
        raise ValidationError("steps must be at least 1")
    if variant == "scaled_linear":
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), steps) ** 2
    elif variant == "cosine":
        s = np.arange(steps + 1) / steps
        f = np.cos((s + cosine_offset) / (1 + cosine_offset) * np.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
    else:
        raise ValidationError(f"unknown schedule variant {variant!r}; choose from {VARIANTS}")
    alpha_bar = np.cumprod(1.0 - betas)
    alphas, sigmas = np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar)
    for arr in (alphas, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(steps, alphas, sigmas, variant)


def _grid(x) -> np.ndarray:
    if isinstance(x, AtlasGrid):
        if not x.normalized:
            raise StateError("diffusion targets are defined on normalized atlases; normalize first")
        return x.data.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = _grid(a), _grid(b)
    if a.shape != b.shape:
        raise ValidationError(f"{what} shapes differ: {a.shape} vs {b.shape}")
    return a, b


def add_noise(x0, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    """x_t = alpha_t x0 + sigma_t noise."""
    x0, noise = _pair(x0, noise, "x0/noise")
    a, s = sched.coefficients(t)
    return a * x0 + s * noise


def velocity_target(x0, noise, t: int, sched: NoiseSchedule) -> np.ndarray:
    """v_t = alpha_t noise - sigma_t x0."""
    x0, noise = _pair(x0, noise, "x0/noise")
    a, s = sched.coefficients(t)
    return a * noise - s * x0


def reconstruct_x0(x_t, v, t: int, sched: NoiseSchedule) -> np.ndarray:
    x_t, v = _pair(x_t, v, "x_t/v")
    a, s = sched.coefficients(t)
    return a * x_t - s * v


def recover_noise(x_t, v, t: int, sched: NoiseSchedule) -> np.ndarray:
    x_t, v = _pair(x_t, v, "x_t/v")
    a, s = sched.coefficients(t)
    return s * x_t + a * v


def identity_errors(x0, noise, t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """Max abs error of the x0 and noise reconstructions at step t."""
    x0, noise = _pair(x0, noise, "x0/noise")
    x_t = add_noise(x0, t, noise, sched)
    v = velocity_target(x0, noise, t, sched)
    e_x0 = float(np.abs(reconstruct_x0(x_t, v, t, sched) - x0).max(initial=0.0))
    e_eps = float(np.abs(recover_noise(x_t, v, t, sched) - noise).max(initial=0.0))
    return e_x0, e_eps


def write_training_sample(x0: AtlasGrid, noise, t: int, sched: NoiseSchedule, prefix) -> list[Path]:
    """Dump (x_t, v) as normalized GATL files plus a JSON sidecar holding t."""
    x_t = add_noise(x0, t, noise, sched)
    v = velocity_target(x0, noise, t, sched)
    prefix = str(prefix)
    paths = [Path(prefix + ".xt.gatl"), Path(prefix + ".v.gatl"), Path(prefix + ".json")]
    save_atlas(replace(x0, data=x_t), paths[0])
    save_atlas(replace(x0, data=v), paths[1])
    a, s = sched.coefficients(t)
    meta = {
        "t": t, "alpha": a, "sigma": s, "variant": sched.variant, "steps": sched.steps,
        "source_id": x0.source_id, "stats_ref": x0.stats_ref,
    }
    paths[2].write_text(json.dumps(meta, sort_keys=True))
    return paths
