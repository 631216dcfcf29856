"""Synthetic scene generation for desk-scale runs.

Produces a piecewise-constant class layout (voronoi cells over seeded
sites), gives every class a smooth, well-separated spectral signature, and
adds gaussian noise. The dense truth map comes with a sparse training mask
of k pixels per class.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .formats import HsiCube, LabelMap


def synth_scene(seed, height, width, bands, classes, labels_per_class=100,
                noise=0.1):
    """Returns (cube, dense truth LabelMap, sparse training LabelMap)."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if bands < 6:
        raise ConfigError(f"need at least 6 bands, got {bands}")
    if height * width < 2 * classes * labels_per_class:
        raise ConfigError(
            f"{height}x{width} scene is too small for {classes} classes "
            f"with {labels_per_class} labels each")
    rng = np.random.default_rng(seed)

    # voronoi layout; resample sites until every class owns enough pixels
    ys, xs = np.mgrid[0:height, 0:width]
    truth = None
    for _ in range(64):
        n_sites = 3 * classes
        sites = np.column_stack([rng.uniform(0, height, n_sites),
                                 rng.uniform(0, width, n_sites)])
        site_class = np.arange(n_sites) % classes + 1
        d2 = (ys[..., None] - sites[:, 0]) ** 2 + (xs[..., None] - sites[:, 1]) ** 2
        candidate = site_class[d2.argmin(axis=-1)]
        counts = np.bincount(candidate.ravel(), minlength=classes + 1)[1:]
        if counts.min() >= labels_per_class:
            truth = candidate
            break
    if truth is None:
        raise ConfigError("could not place classes with enough pixels; enlarge the scene")

    # smooth per-class spectra: offsets two apart, amplitudes below one,
    # so signatures stay separated at every band
    grid = np.arange(bands) / bands
    signatures = np.empty((classes, bands))
    for c in range(classes):
        amp = rng.uniform(0.3, 0.7)
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0.0, 1.0)
        signatures[c] = 2.0 * (c + 1) + amp * np.sin(2 * np.pi * (freq * grid + phase))

    cube = signatures[truth - 1]  # (H, W, L)
    cube = cube + noise * rng.standard_normal(cube.shape)
    cube = np.moveaxis(cube, -1, 0).astype(np.float32)  # band-sequential

    train = np.zeros((height, width), dtype=np.uint16)
    flat_truth = truth.ravel()
    for c in range(1, classes + 1):
        pool = np.nonzero(flat_truth == c)[0]
        chosen = rng.choice(pool, size=labels_per_class, replace=False)
        train.reshape(-1)[chosen] = c

    return HsiCube(cube), LabelMap(truth), LabelMap(train)
