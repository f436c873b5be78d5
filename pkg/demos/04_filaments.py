"""Fit disjoint segments to a synthetic catalog of points along filaments.

Points are scattered around three random line segments plus a uniform
background.  The polyline runs in disjoint mode: odd segments carry no
mass and act as free "jumps", so the even segments can settle on separate
filaments.

    python demos/04_filaments.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from polyot import AtomicMeasure, ShapeConfig, SolverConfig, optimize_polyline
from polyot.io import polyline_pieces, random_walk_polyline, render_svg, write_points

out = Path(sys.argv[1] if len(sys.argv) > 1 else "filaments-out")
out.mkdir(exist_ok=True)
rng = np.random.default_rng(7)

pts = []
for _ in range(3):
    a, b = rng.random(2) * 0.8 + 0.1, rng.random(2) * 0.8 + 0.1
    t = rng.random(150)
    pts.append(a + t[:, None] * (b - a) + 0.01 * rng.standard_normal((150, 2)))
pts.append(rng.random((40, 2)))
mu = AtomicMeasure.uniform(np.vstack(pts))
write_points(out / "catalog.csv", mu)

nu0 = random_walk_polyline(11, seed=3, disjoint_mode=True)
nu, hist, _ = optimize_polyline(mu, nu0, SolverConfig(grad_tol=1e-9),
                                ShapeConfig(max_iter=100, backtracking=True))
render_svg(nu, out / "filaments.svg", mu)
print(f"G: {hist.G[0]:.5f} -> {hist.G[-1]:.5f} in {len(hist) - 1} iterations")
for k, (first, last) in enumerate(polyline_pieces(nu)):  # vertex ranges
    V = nu.vertices[first:last + 1]
    print(f"piece {k}: {V[0].round(3)} -> {V[-1].round(3)}")
