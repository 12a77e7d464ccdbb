"""Lossless conversion of 3D Gaussian splat clouds to dense 2D atlases and back."""

import os

# the TBB layer shipped with some numba wheels is too old and warns on import
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .atlas import (  # noqa: E402
    AtlasGrid, NormStats, SolverConfig, denormalize, fit_stats, from_atlas, load_atlas, normalize,
    pack, plane_offset_index, save_atlas, sphere_offset, to_atlas, unpack,
)
from .model import GaussianCloud, compute_bounds, load_splat_file, save_cloud  # noqa: E402
from .sphere import SphereLattice, equirect, equirect_inverse, generate_lattice  # noqa: E402
from .transport import AssignmentIndex, CostSpec, cost_of, solve_exact, solve_scalable  # noqa: E402

__all__ = [
    "AssignmentIndex", "AtlasGrid", "CostSpec", "GaussianCloud", "NormStats", "SolverConfig",
    "SphereLattice", "compute_bounds", "cost_of", "denormalize", "equirect", "equirect_inverse",
    "fit_stats", "from_atlas", "generate_lattice", "load_atlas", "load_splat_file", "normalize",
    "pack", "plane_offset_index", "save_atlas", "save_cloud", "solve_exact", "solve_scalable",
    "sphere_offset", "to_atlas", "unpack",
]
