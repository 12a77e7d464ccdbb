"""Compare visibility and scale pruning on the occlusion fixture.

    python scripts/prune_compare.py --shell 100 --core 100 --keep 100

For each strategy the pruned cloud is rendered from a ring of views and
compared with the full cloud, and the surviving core Gaussians are counted.
"""

import json

import click
import numpy as np

from gaussian_atlas.prune import STRATEGIES, assess_visibility, prune_to
from gaussian_atlas.render import psnr, render, ring_cameras, ssim
from gaussian_atlas.synthetic import shell_with_core


@click.command()
@click.option("--shell", type=int, default=100, show_default=True)
@click.option("--core", type=int, default=100, show_default=True)
@click.option("--keep", type=int, default=None, help="Prune bound (default: half the cloud).")
@click.option("--views", type=int, default=32, show_default=True, help="Visibility views.")
@click.option("--resolution", type=int, default=256, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def main(shell, core, keep, views, resolution, seed):
    cloud = shell_with_core(shell, core, seed)
    keep = keep or len(cloud) // 2
    report = assess_visibility(cloud, views, seed, resolution)
    b = cloud.bounds
    cams = ring_cameras(b.center, 2.5 * b.radius, 8, resolution=(resolution, resolution))
    reference = [render(cloud, c).color for c in cams]
    rows = []
    for strategy in STRATEGIES:
        kept = prune_to(cloud, keep, strategy, report)
        images = [render(kept, c).color for c in cams]
        rows.append({
            "strategy": strategy, "kept": len(kept),
            # core Gaussians are the ones well inside the unit shell
            "core_kept": int((np.linalg.norm(kept.positions, axis=1) < 0.5).sum()),
            "min_psnr": min(psnr(r, i) for r, i in zip(reference, images)),
            "mean_ssim": float(np.mean([ssim(r, i) for r, i in zip(reference, images)])),
        })
    for row in rows:
        click.echo(json.dumps(row, default=str))


if __name__ == "__main__":
    main()
