"""Writes the golden arc fixture used by the CLI tests.

A 180 degree bright arc (upper half of a circle) on a dark background with
multiplicative Rayleigh speckle, saved as binary PGM next to a metadata file.
"""

import sys
from pathlib import Path

import numpy as np

WIDTH, HEIGHT = 320, 240
CENTER = (171.3, 158.6)
RADIUS = 64.2


def render(seed=5):
    v, u = np.mgrid[0:HEIGHT, 0:WIDTH].astype(float)
    du, dv = u - CENTER[0], v - CENTER[1]
    d = np.hypot(du, dv)
    ridge = np.exp(-0.5 * (d - RADIUS) ** 2)
    upper = dv <= 0
    img = 20.0 + 180.0 * ridge * upper
    rng = np.random.default_rng(seed)
    img *= rng.rayleigh(np.sqrt(2 / np.pi), img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def main(out_dir):
    out = Path(out_dir)
    img = render()
    (out / "arc.pgm").write_bytes(f"P5\n{WIDTH} {HEIGHT}\n255\n".encode() + img.tobytes())
    (out / "arc.txt").write_text(
        f"center_u = {CENTER[0]} px\ncenter_v = {CENTER[1]} px\nradius = {RADIUS} px\n"
    )


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
