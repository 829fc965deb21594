"""Density and coverage of a synthetic sample against real data (k-NN balls)."""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from ..exceptions import TooFewRealPoints

CHUNK = 2048


def knn_radii(real: np.ndarray, k_nn: int) -> np.ndarray:
    """Distance from each real point to its k-th nearest other real point."""
    out = np.empty(len(real))
    for a in range(0, len(real), CHUNK):
        d = cdist(real[a:a + CHUNK], real)
        d[np.arange(len(d)), np.arange(a, a + len(d))] = np.inf
        out[a:a + CHUNK] = np.partition(d, k_nn - 1, axis=1)[:, k_nn - 1]
    return out


def density_coverage(real, synth, k_nn: int = 5) -> tuple[float, float]:
    """Density (may exceed 1) and coverage in [0, 1]; ball membership uses ``<=``."""
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if len(real) <= k_nn:
        raise TooFewRealPoints(f"need more than {k_nn} real points, got {len(real)}")
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError("real and synthetic points live in different spaces")
    if not len(synth):
        return 0.0, 0.0
    radii = knn_radii(real, k_nn)
    inside = 0
    covered = np.zeros(len(real), dtype=bool)
    for a in range(0, len(real), CHUNK):
        hit = cdist(real[a:a + CHUNK], synth) <= radii[a:a + CHUNK, None]
        inside += int(hit.sum())
        covered[a:a + CHUNK] = hit.any(axis=1)
    return inside / (k_nn * len(synth)), float(covered.mean())
