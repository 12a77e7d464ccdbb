"""Regenerate the frozen oracle fixtures under tests/fixtures.

Every value here is computed without the package under test: brute-force
enumeration for assignment optima and a hand-rolled ``struct`` PLY writer.

    python scripts/make_oracle_fixtures.py
"""

import itertools
import json
import math
import struct
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def brute_force(cost: np.ndarray) -> tuple[float, list[int]]:
    """Minimum over every injection of rows into columns."""
    m, n = cost.shape
    best, arg = math.inf, None
    for perm in itertools.permutations(range(n), m):
        c = sum(cost[i, j] for i, j in enumerate(perm))
        if c < best:
            best, arg = c, perm
    return best, list(arg)


def ot_7x9(seed: int = 7) -> dict:
    rng = np.random.default_rng(seed)
    src = rng.uniform(-1, 1, size=(7, 3))
    tgt = rng.uniform(-1, 1, size=(9, 3))
    cost = ((src[:, None, :] - tgt[None, :, :]) ** 2).sum(-1)
    best, arg = brute_force(cost)
    return {"seed": seed, "sources": src.tolist(), "targets": tgt.tolist(),
            "injections": math.perm(9, 7), "min_cost": best, "argmin": arg}


def plane_2x2() -> dict:
    # Fibonacci lattice for n = 4, written out from the closed form
    golden = (1 + math.sqrt(5)) / 2
    pts = []
    for i in range(4):
        z = 1 - 2 * (i + 0.5) / 4
        lon = math.fmod(2 * math.pi * i / golden ** 2, 2 * math.pi)
        r = math.sqrt(1 - z * z)
        x, y = r * math.cos(lon), r * math.sin(lon)
        u = (math.atan2(y, x) + math.pi) / (2 * math.pi)
        v = (math.asin(z) + math.pi / 2) / math.pi
        pts.append((0.0 if u >= 1 else u, v))
    grid = [((c + 0.5) / 2, (r + 0.5) / 2) for r in range(2) for c in range(2)]
    cost = np.zeros((4, 4))
    for i, (u, v) in enumerate(pts):
        for j, (gu, gv) in enumerate(grid):
            du = abs(u - gu) % 1.0
            du = min(du, 1 - du)
            cost[i, j] = du * du + (v - gv) ** 2
    best, arg = brute_force(cost)
    return {"flat_coords": pts, "min_cost": best, "argmin": arg, "permutations": 24}


def three_gaussian_ply(path: Path) -> None:
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    rows = [
        [0.0, 0.0, 0.0, 0.5, -0.25, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        [1.5, -2.0, 0.25, -1.0, 0.0, 0.125, 2.0, -1.0, -2.0, -3.0, 0.6, 0.8, 0.0, 0.0],
        [-0.5, 3.0, 1.0, 2.0, 1.0, -2.0, -3.5, -4.0, -0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
    ]
    header = "ply\nformat binary_little_endian 1.0\nelement vertex 3\n"
    header += "".join(f"property float {n}\n" for n in names) + "end_header\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for row in rows:
            fh.write(struct.pack("<14f", *row))


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "ot_7x9.json").write_text(json.dumps(ot_7x9(), indent=1))
    (OUT / "plane_2x2.json").write_text(json.dumps(plane_2x2(), indent=1))
    three_gaussian_ply(OUT / "three.ply")
    print("wrote", sorted(p.name for p in OUT.iterdir()))


if __name__ == "__main__":
    main()
