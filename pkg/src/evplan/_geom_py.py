"""Pure numpy implementations of the geometry kernels.

Same signatures and semantics as the compiled ``_geom`` extension; selected at
import time by :mod:`evplan.geometry` when the extension is not built.
"""

import numpy as np


def project_polyline(points, poly, cum):
    """Project points onto a polyline.

    Args:
        points: (N, 2) query points.
        poly: (M, 2) polyline vertices, M >= 2, consecutive vertices distinct.
        cum: (M,) cumulative arclength at each vertex.

    Returns:
        (s, lateral, tangent): arclength of the projection (extrapolated past
        both ends), signed lateral offset (left positive) and tangent heading.
    """
    points = np.asarray(points, dtype=np.float64)
    poly = np.asarray(poly, dtype=np.float64)
    cum = np.asarray(cum, dtype=np.float64)
    a = poly[:-1]
    d = poly[1:] - a
    seg_len2 = np.einsum("ij,ij->i", d, d)
    seg_len = np.sqrt(seg_len2)
    rel = points[:, None, :] - a[None, :, :]
    t_raw = np.einsum("nmj,mj->nm", rel, d) / seg_len2
    t = np.clip(t_raw, 0.0, 1.0)
    closest = a[None] + t[..., None] * d[None]
    dist2 = np.sum((points[:, None, :] - closest) ** 2, axis=2)
    j = np.argmin(dist2, axis=1)
    n = len(points)
    rows = np.arange(n)
    tj = t[rows, j]
    traw = t_raw[rows, j]
    last = len(d) - 1
    tj = np.where((j == 0) & (traw < 0.0), traw, tj)
    tj = np.where((j == last) & (traw > 1.0), traw, tj)
    s = cum[j] + tj * seg_len[j]
    dj = d[j]
    relj = rel[rows, j]
    lateral = (dj[:, 0] * relj[:, 1] - dj[:, 1] * relj[:, 0]) / seg_len[j]
    tangent = np.arctan2(dj[:, 1], dj[:, 0])
    return s, lateral, tangent


def _point_segment_dist(points, a, b):
    d = b - a
    l2 = float(d @ d)
    rel = points - a
    t = np.clip(rel @ d / l2, 0.0, 1.0) if l2 > 0 else np.zeros(len(points))
    c = a + t[:, None] * d
    return np.hypot(points[:, 0] - c[:, 0], points[:, 1] - c[:, 1])


def _winding(points, ring):
    wn = np.zeros(len(points), dtype=np.int64)
    m = len(ring)
    for i in range(m):
        a = ring[i]
        b = ring[(i + 1) % m]
        cross = (b[0] - a[0]) * (points[:, 1] - a[1]) - (points[:, 0] - a[0]) * (b[1] - a[1])
        up = (a[1] <= points[:, 1]) & (b[1] > points[:, 1]) & (cross > 0)
        down = (a[1] > points[:, 1]) & (b[1] <= points[:, 1]) & (cross < 0)
        wn += up.astype(np.int64) - down.astype(np.int64)
    return wn


def polygon_signed_distance(points, ring):
    """Signed distance to a closed polygon ring, positive inside."""
    points = np.asarray(points, dtype=np.float64)
    ring = np.asarray(ring, dtype=np.float64)
    if len(ring) > 2 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    m = len(ring)
    dist = np.full(len(points), np.inf)
    for i in range(m):
        dist = np.minimum(dist, _point_segment_dist(points, ring[i], ring[(i + 1) % m]))
    inside = _winding(points, ring) != 0
    return np.where(inside, dist, -dist)


def region_signed_distance(points, rings_flat, offsets):
    """Max over rings of the per-ring signed distance (union of regions)."""
    points = np.asarray(points, dtype=np.float64)
    out = np.full(len(points), -np.inf)
    for r in range(len(offsets) - 1):
        ring = rings_flat[offsets[r] : offsets[r + 1]]
        out = np.maximum(out, polygon_signed_distance(points, ring))
    return out


def box_corners(boxes):
    """Corners (..., 4, 2) of boxes (..., 5) = (cx, cy, heading, length, width), CCW."""
    boxes = np.asarray(boxes, dtype=np.float64)
    c, s = np.cos(boxes[..., 2]), np.sin(boxes[..., 2])
    hl, hw = boxes[..., 3] / 2.0, boxes[..., 4] / 2.0
    signs = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
    lx = signs[:, 0] * hl[..., None]
    ly = signs[:, 1] * hw[..., None]
    x = boxes[..., 0, None] + c[..., None] * lx - s[..., None] * ly
    y = boxes[..., 1, None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([x, y], axis=-1)


def _sat_gap(ca, cb):
    best = -np.inf
    for corners in (ca, cb):
        for i in range(2):
            e = corners[i + 1] - corners[i]
            ax = np.array([-e[1], e[0]]) / np.hypot(e[0], e[1])
            pa = ca @ ax
            pb = cb @ ax
            gap = max(pb.min() - pa.max(), pa.min() - pb.max())
            best = max(best, gap)
    return best


def box_signed_distance(a, b):
    """Euclidean distance between two boxes, or minus the penetration depth."""
    ca = box_corners(np.asarray(a, dtype=np.float64))
    cb = box_corners(np.asarray(b, dtype=np.float64))
    gap = _sat_gap(ca, cb)
    if gap <= 0.0:
        return float(gap)
    best = np.inf
    for p, q in ((ca, cb), (cb, ca)):
        for i in range(4):
            best = min(best, float(_point_segment_dist(p, q[i], q[(i + 1) % 4]).min()))
    return best


def clearance(ego, agents):
    """Signed clearance (K, F) between each ego box and its nearest agent box per step."""
    ego = np.asarray(ego, dtype=np.float64)
    agents = np.asarray(agents, dtype=np.float64)
    k, f = ego.shape[:2]
    out = np.full((k, f), np.inf)
    for a in range(agents.shape[0]):
        for i in range(k):
            for t in range(f):
                d = box_signed_distance(ego[i, t], agents[a, t])
                if d < out[i, t]:
                    out[i, t] = d
    return out


def boxes_overlap(ego, agents):
    """(K,) True where any ego box strictly overlaps any agent box at a shared step."""
    ego = np.asarray(ego, dtype=np.float64)
    agents = np.asarray(agents, dtype=np.float64)
    k, f = ego.shape[:2]
    out = np.zeros(k, dtype=bool)
    ce = box_corners(ego)
    ca = box_corners(agents)
    for i in range(k):
        for t in range(f):
            for a in range(agents.shape[0]):
                if _sat_gap(ce[i, t], ca[a, t]) < 0.0:
                    out[i] = True
                    break
            if out[i]:
                break
    return out
