"""Event streams to rasters and back.

A DVS sensor produces (t, x, y, polarity) events. Attacks work on binned
rasters, so an attacked raster has to be turned back into events that a
sensor-side pipeline could replay. This walks through that loop.
"""

import numpy as np

from spikefool import event_data as ed
from _desk import show

rng = np.random.default_rng(0)
W, H = 12, 8
rows = sorted((int(rng.integers(0, 100_000)), int(rng.integers(W)), int(rng.integers(H)), int(rng.integers(2)))
              for _ in range(60))
events = ed.EventList.from_tuples(rows, W, H)
cfg = ed.RasterConfig(duration_us=100_000, n_bins=10)
raster = ed.rasterize(events, cfg)
print(f"{len(events)} events -> raster {raster.shape}, {int(raster.sum())} active voxels (capped at 1)")
show(raster, "first bins of the raster (# = ON, o = OFF, * = both):")

# pretend an attack switched on a few voxels in bin 3
adv = raster.copy()
adv[3, 1, 0, :4] = 1
merged = ed.raster_to_new_events(events, raster, adv, cfg)
print(f"\nafter merging the attack: {len(merged)} events, {len(merged) - len(events)} new ones")
print("new events are stamped at the bin centre:", cfg.bin_center(3), "us")
assert np.array_equal(ed.rasterize(merged, cfg), adv)
print("re-rasterizing the merged stream reproduces the attacked raster")

# binarized images for the frame-based MNIST pipeline
gray = np.array([[0, 127, 128, 255]])
print("\nbinarize_image", gray.tolist(), "->", ed.binarize_image(gray).tolist())
