"""Nearest-valid-pixel fill, the non-learned reference completion."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..depth_grid import DepthMap
from ..objective import EmptyEvalSet

_K = 8  # neighbours fetched per query before falling back to a radius search


def _nearest_index(valid_rc: np.ndarray, query_rc: np.ndarray) -> np.ndarray:
    """Index into ``valid_rc`` of the nearest point for each query.

    Ties in Euclidean distance go to the smaller row, then smaller column.
    Squared distances between integer coordinates are compared exactly.
    """
    tree = cKDTree(valid_rc)
    k = min(_K, len(valid_rc))
    _, idx = tree.query(query_rc, k=k)
    idx = idx.reshape(len(query_rc), k)
    d2 = ((valid_rc[idx] - query_rc[:, None]) ** 2).sum(axis=-1)
    best_d2 = d2.min(axis=1)
    # lexicographic choice among the exact minimum-distance candidates
    cand = np.where(d2 == best_d2[:, None], valid_rc[idx, 0] * (1 << 32) + valid_rc[idx, 1], np.iinfo(np.int64).max)
    out = idx[np.arange(len(query_rc)), cand.argmin(axis=1)]
    # when every fetched neighbour ties, more equidistant points may exist
    if k < len(valid_rc):
        full = np.flatnonzero(d2[:, -1] == best_d2)
        for q in full:
            ball = np.asarray(tree.query_ball_point(query_rc[q], np.sqrt(best_d2[q]) + 1e-6), dtype=np.int64)
            bd2 = ((valid_rc[ball] - query_rc[q]) ** 2).sum(axis=-1)
            ball = ball[bd2 == best_d2[q]]
            out[q] = ball[np.lexsort((valid_rc[ball, 1], valid_rc[ball, 0]))[0]]
    return out


def fill_array(sd: np.ndarray) -> np.ndarray:
    valid = sd > 0
    if not valid.any():
        raise EmptyEvalSet("cannot fill a depth map without any valid pixel")
    out = sd.astype(np.float64, copy=True)
    missing = ~valid
    if missing.any():
        valid_rc = np.argwhere(valid).astype(np.int64)
        query_rc = np.argwhere(missing).astype(np.int64)
        src = valid_rc[_nearest_index(valid_rc, query_rc)]
        out[missing] = sd[src[:, 0], src[:, 1]]
    return out


def baseline_fill(sd: DepthMap) -> DepthMap:
    """Every missing pixel takes the value of its nearest valid pixel."""
    return DepthMap(fill_array(sd.values))


def baseline_predictor(sd: np.ndarray, rgb=None) -> np.ndarray:
    """Batch form usable wherever a trained net is evaluated."""
    return np.stack([fill_array(s) for s in sd])
