"""Geometry kernels for rule evaluation and safety metrics.

The compiled extension ``evplan._geom`` is used when it has been built;
otherwise the numpy fallback in ``evplan._geom_py`` is used. Set
``EVPLAN_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from evplan import _geom_py

if os.environ.get("EVPLAN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _geom_py
else:
    try:
        from evplan import _geom as _impl
    except ImportError:  # extension not built
        _impl = _geom_py

BACKEND = "compiled" if _impl is not _geom_py else "python"

box_corners = _impl.box_corners
box_signed_distance = _impl.box_signed_distance
polygon_signed_distance = _impl.polygon_signed_distance


def project_polyline(points, poly, cum):
    """Arclength, signed lateral offset (left positive) and tangent of point projections.

    A single-vertex polyline is treated as a point facing +x.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) == 1:
        rel = points - poly[0]
        return rel[:, 0].copy(), rel[:, 1].copy(), np.zeros(len(points))
    return _impl.project_polyline(points, poly, cum)


def pack_rings(rings):
    """Concatenate polygon rings into (flat (M, 2), offsets (R+1,))."""
    if not rings:
        return np.zeros((0, 2)), np.zeros(1, dtype=np.int_)
    flat = np.concatenate([np.asarray(r, dtype=np.float64) for r in rings], axis=0)
    offsets = np.concatenate([[0], np.cumsum([len(r) for r in rings])]).astype(np.int_)
    return flat, offsets


def region_signed_distance(points, rings_flat, offsets):
    """Signed distance to the union of rings: max of per-ring values, -inf with no rings."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return _impl.region_signed_distance(points, rings_flat, offsets)


def clearance(ego, agents):
    """Per-step signed clearance (K, F) from each ego box to the nearest agent box.

    Args:
        ego: (K, F, 5) boxes (cx, cy, heading, length, width).
        agents: (A, F, 5) boxes; A may be zero, giving +inf everywhere.
    """
    ego = np.asarray(ego, dtype=np.float64)
    agents = np.asarray(agents, dtype=np.float64).reshape(-1, ego.shape[1], 5)
    return _impl.clearance(ego, agents)


def boxes_overlap(ego, agents):
    """(K,) whether each ego box sequence strictly overlaps any agent box at some step."""
    ego = np.asarray(ego, dtype=np.float64)
    agents = np.asarray(agents, dtype=np.float64).reshape(-1, ego.shape[1], 5)
    return _impl.boxes_overlap(ego, agents)
