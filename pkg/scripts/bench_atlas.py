"""Time one full-size atlas build with the plane index already cached.

    python scripts/bench_atlas.py --n 16384 --repeats 3 --out bench.json

The first run of a fresh cache directory also builds the plane index; that
time is reported separately and excluded from the build timings.
"""

import json
import time
from pathlib import Path

import click

from gaussian_atlas.atlas import plane_offset_index, save_atlas, to_atlas
from gaussian_atlas.sphere import generate_lattice
from gaussian_atlas.synthetic import random_cloud


@click.command()
@click.option("--n", type=int, default=16384, show_default=True)
@click.option("--repeats", type=int, default=3, show_default=True)
@click.option("--cache-dir", type=click.Path(file_okay=False, path_type=Path),
              default=Path(".gatlas-cache"), show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--budget", type=float, default=120.0, show_default=True, help="Seconds allowed per build.")
def main(n, repeats, cache_dir, out, budget):
    t = time.perf_counter()
    lattice = generate_lattice(n)
    plane = plane_offset_index(lattice, cache_dir)
    index_seconds = time.perf_counter() - t

    builds = []
    for seed in range(repeats):
        cloud = random_cloud(n, seed=seed, radius=3.0)
        t = time.perf_counter()
        atlas, assignment = to_atlas(cloud, lattice, plane)
        save_atlas(atlas, cache_dir / f"bench_{seed}.gatl")
        builds.append({"seed": seed, "seconds": time.perf_counter() - t, "solver": assignment.solver})
    worst = max(b["seconds"] for b in builds)
    result = {"n": n, "index_seconds": index_seconds, "builds": builds,
              "worst_seconds": worst, "budget_seconds": budget, "passed": worst <= budget}
    click.echo(json.dumps(result, indent=2))
    if out is not None:
        out.write_text(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
