"""Writes the 256-entry inferno lookup table used for heatmap overlays."""

import pathlib

import numpy as np
from matplotlib import colormaps

OUT = pathlib.Path(__file__).resolve().parents[1] / "crates/core/src/xai/inferno.bin"

lut = colormaps["inferno"](np.linspace(0.0, 1.0, 256))[:, :3]
OUT.write_bytes(np.round(lut * 255).astype(np.uint8).tobytes())
print(f"wrote {OUT}")
