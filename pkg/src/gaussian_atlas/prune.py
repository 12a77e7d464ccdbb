"""Bounding the Gaussian count: visibility ranking from sampled renders, or largest scales."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .model import GaussianCloud
from .render import Camera, render

STRATEGIES = ("visibility", "scale")


@dataclass(frozen=True, eq=False)
class VisibilityReport:
    scores: np.ndarray  # (N,) float64, summed blend weight over all views
    views_used: int
    seed: int

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if scores.size and scores.min() < 0:
            raise ValidationError("visibility scores must be non-negative")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def ranking(self) -> np.ndarray:
        """Indices by descending score, lower index first among ties."""
        return np.argsort(-self.scores, kind="stable")

    def to_json(self) -> dict:
        return {"scores": self.scores.tolist(), "views_used": self.views_used, "seed": self.seed}


def save_report(report: VisibilityReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json()))


def load_report(path) -> VisibilityReport:
    try:
        d = json.loads(Path(path).read_text())
        return VisibilityReport(d["scores"], int(d["views_used"]), int(d["seed"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: not a visibility report ({exc})") from exc


def sample_cameras(center, radius: float, views: int, seed: int, resolution: int = 256,
                   fov_deg: float = 60.0) -> list[Camera]:
    """Cameras placed uniformly at random on a sphere around ``center``, all looking at it."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(views, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    center = np.asarray(center, dtype=np.float64)
    return [
        Camera.look_at(center + radius * di, center, fov_deg=fov_deg, resolution=(resolution, resolution))
        for di in d
    ]


def assess_visibility(cloud: GaussianCloud, views: int = 32, seed: int = 0, resolution: int = 256,
                      distance_factor: float = 2.5, fov_deg: float = 60.0) -> VisibilityReport:
    """Sum each Gaussian's composited weight over renders from ``views`` random cameras."""
    if views < 1:
        raise ValidationError("need at least one view")
    if len(cloud) == 0:
        return VisibilityReport(np.zeros(0), 0, seed)
    b = cloud.bounds
    scores = np.zeros(len(cloud))
    for cam in sample_cameras(b.center, distance_factor * b.radius, views, seed, resolution, fov_deg):
        scores += render(cloud, cam).visibility
    return VisibilityReport(scores, views, seed)


def scale_ranking(cloud: GaussianCloud) -> np.ndarray:
    norms = np.linalg.norm(cloud.scale.astype(np.float64), axis=1)
    return np.argsort(-norms, kind="stable")


def prune_to(cloud: GaussianCloud, bound: int, strategy: str = "visibility",
             report: VisibilityReport | None = None) -> GaussianCloud:
    """Keep the ``bound`` best-ranked Gaussians, in their original order.

    ``visibility`` keeps the most visible ones and needs a report for this
    cloud; ``scale`` keeps the largest scale norms, dropping the smallest.
    """
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown prune strategy {strategy!r}")
    if bound < 0:
        raise ValidationError("bound must be non-negative")
    if strategy == "visibility":
        if report is None:
            raise ValidationError("visibility pruning needs a VisibilityReport")
        if len(report.scores) != len(cloud):
            raise ValidationError(f"report covers {len(report.scores)} Gaussians, cloud has {len(cloud)}")
    if len(cloud) <= bound:
        return cloud
    ranking = report.ranking if strategy == "visibility" else scale_ranking(cloud)
    return cloud.subset(np.sort(ranking[:bound]))
