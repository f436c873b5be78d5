"""Draw a 64x64 grayscale test image: a lopsided ring on a black background.

The ring is thicker and brighter on its upper-left side, so a fitted curve
has something to resolve besides a circle.  The image used by the test
suite (``tests/data/ring64.pgm``) is of this kind.

    python demos/make_ring_image.py ring.pgm
"""
import sys

import numpy as np

from polyot.io import write_pgm


def ring_image(size=64, radius=0.3, width=0.07, seed=0):
    yy, xx = np.mgrid[0:size, 0:size]
    x = (xx + 0.5) / size - 0.5
    y = 0.5 - (yy + 0.5) / size
    r = np.hypot(x, y)
    theta = np.arctan2(y, x)
    # width and brightness peak towards the upper left
    lean = 0.5 * (1 + np.cos(theta - 3 * np.pi / 4))
    w = width * (0.7 + 0.6 * lean)
    img = np.exp(-0.5 * ((r - radius) / w) ** 2) * (0.6 + 0.4 * lean)
    img += 0.02 * np.random.default_rng(seed).random(img.shape)
    return np.round(255 * img / img.max())


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "ring.pgm"
    write_pgm(out, ring_image())
    print(f"wrote {out}")
