"""Geometric vocabulary shared by the whole pipeline.

Rotation handling uses the continuous 6D representation (first two columns
of a rotation matrix, column-major), decoded with Gram-Schmidt.  Proximity
features combine exact nearest-neighbor queries with an exponential
distance attention ``exp(-w * d)`` and fixed basis-point-set encodings.

All distances are in meters.  Every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_points, check_finite

DEGENERATE_EPS = 1e-12

# Exhaustive scan above this many pairwise distances switches to the
# uniform-grid accelerator; results are identical either way.
_GRID_THRESHOLD = 2_000_000


# ---------------------------------------------------------------------------
# 6D rotations
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Decode 6D rotation coefficients to rotation matrices.

    Args:
        r6: array of shape (..., 6); the first three entries are the raw
            first column, the last three the raw second column.

    Returns:
        Rotation matrices of shape (..., 3, 3) with orthonormal columns and
        determinant +1.

    Raises:
        ValueError: if the first column has near-zero norm or the two
            columns are parallel ("degenerate 6D rotation").
    """
    r6 = check_finite(r6, "rot6d coefficients")
    if r6.shape[-1] != 6:
        raise ValueError(f"rot6d coefficients must have trailing dim 6, got {r6.shape}")
    a = r6[..., :3]
    b = r6[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < DEGENERATE_EPS):
        raise ValueError("degenerate 6D rotation")
    x = a / na
    proj = np.sum(x * b, axis=-1, keepdims=True)
    u = b - proj * x
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(nu < DEGENERATE_EPS):
        raise ValueError("degenerate 6D rotation")
    y = u / nu
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def rot6d_backward(r6: np.ndarray, d_mat: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`rot6d_to_matrix`.

    Args:
        r6: the forward input, shape (..., 6).
        d_mat: cotangent w.r.t. the decoded matrices, shape (..., 3, 3).

    Returns:
        Cotangent w.r.t. the 6D coefficients, shape (..., 6).
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a = r6[..., :3]
    b = r6[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    x = a / na
    proj = np.sum(x * b, axis=-1, keepdims=True)
    u = b - proj * x
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    y = u / nu

    dx = d_mat[..., :, 0].copy()
    dy = d_mat[..., :, 1].copy()
    dz = d_mat[..., :, 2]

    # z = cross(x, y)
    dx += np.cross(y, dz)
    dy += np.cross(dz, x)

    # y = u / |u|
    du = (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / nu

    # u = b - (x . b) x
    du_dot_x = np.sum(du * x, axis=-1, keepdims=True)
    db = du - du_dot_x * x
    dx += -du_dot_x * b - proj * du

    # x = a / |a|
    da = (dx - x * np.sum(x * dx, axis=-1, keepdims=True)) / na
    return np.concatenate([da, db], axis=-1)


def matrix_to_rot6d(mat: np.ndarray) -> np.ndarray:
    """Encode rotation matrices as 6D coefficients (first two columns)."""
    mat = np.asarray(mat, dtype=np.float64)
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


# ---------------------------------------------------------------------------
# Distance attention
# ---------------------------------------------------------------------------

def attention(d, w: float):
    """Exponential proximity attention ``exp(-w * d)``.

    Strictly decreasing in ``d``, equal to one at ``d = 0``, range (0, 1].

    Args:
        d: nonnegative scalar or array of distances in meters.
        w: positive scalar weight.
    """
    if not np.isscalar(w) or not w > 0:
        raise ValueError("attention weight must be positive")
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0):
        raise ValueError("attention distances must be nonnegative")
    out = np.exp(-w * d_arr)
    return float(out) if np.isscalar(d) else out


# ---------------------------------------------------------------------------
# Exact nearest neighbors
# ---------------------------------------------------------------------------

def nearest_neighbor(source, target) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest target point for every source point.

    Ties are broken toward the lowest target index, so the result is
    deterministic and matches an exhaustive scan exactly.

    Args:
        source: (N, 3) query points.
        target: (M, 3) candidate points; must be nonempty.

    Returns:
        (indices, distances): int64 (N,) and float64 (N,) arrays.
    """
    src = as_points(source, "source")
    tgt = as_points(target, "target")
    if tgt.shape[0] == 0:
        raise ValueError("empty target set")
    if src.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    if src.shape[0] * tgt.shape[0] <= _GRID_THRESHOLD:
        idx, d2 = _nearest_scan(src, tgt)
    else:
        idx, d2 = _nearest_grid(src, tgt)
    return idx, np.sqrt(d2)


def _nearest_scan(src: np.ndarray, tgt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = src[:, None, :] - tgt[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    idx = np.argmin(d2, axis=1)  # first minimum == lowest-index tie-break
    return idx.astype(np.int64), d2[np.arange(src.shape[0]), idx]


def _nearest_grid(src: np.ndarray, tgt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-grid accelerated exact nearest neighbor.

    Bins target points into a cubic grid, then expands the searched cell
    ring per query until the ring's lower distance bound exceeds the best
    hit.  Ring bounds are compared non-strictly so equal-distance ties in
    farther rings are still visited before the lowest index wins.
    """
    lo = tgt.min(axis=0)
    hi = tgt.max(axis=0)
    span = float(np.max(hi - lo))
    n_cells = max(1, int(round(tgt.shape[0] ** (1.0 / 3.0))))
    cell = span / n_cells if span > 0 else 1.0
    if cell <= 0:
        cell = 1.0

    def cell_of(p):
        return tuple(np.minimum(((p - lo) / cell).astype(np.int64), n_cells - 1).clip(0))

    buckets: dict[tuple, list[int]] = {}
    for j in range(tgt.shape[0]):
        buckets.setdefault(cell_of(tgt[j]), []).append(j)

    out_idx = np.empty(src.shape[0], dtype=np.int64)
    out_d2 = np.empty(src.shape[0], dtype=np.float64)
    for i in range(src.shape[0]):
        p = src[i]
        c = np.clip(((p - lo) / cell).astype(np.int64), 0, n_cells - 1)
        best_d2 = np.inf
        best_j = -1
        ring = 0
        max_ring = n_cells + 1
        while ring <= max_ring:
            # lower bound on distance from p to any cell in this ring
            if ring > 0:
                bound = (ring - 1) * cell
                if bound * bound > best_d2:
                    break
            found_cell = False
            for cx in range(c[0] - ring, c[0] + ring + 1):
                for cy in range(c[1] - ring, c[1] + ring + 1):
                    for cz in range(c[2] - ring, c[2] + ring + 1):
                        if max(abs(cx - c[0]), abs(cy - c[1]), abs(cz - c[2])) != ring:
                            continue
                        pts = buckets.get((cx, cy, cz))
                        if not pts:
                            continue
                        found_cell = True
                        for j in pts:
                            dv = p - tgt[j]
                            d2 = float(np.sum(dv * dv))
                            if d2 < best_d2 or (d2 == best_d2 and j < best_j):
                                best_d2 = d2
                                best_j = j
            ring += 1
            if not found_cell and ring > n_cells:
                break
        out_idx[i] = best_j
        out_d2[i] = best_d2
    return out_idx, out_d2


# ---------------------------------------------------------------------------
# Attention-weighted offset fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OffsetField:
    """Per-source-vertex attention-scaled offset to the matched target vertex.

    ``offsets[i] = exp(-w * |s_i - t_k|) * (s_i - t_k)`` with ``k`` the
    nearest target index; the attention factor lies in (0, 1], so
    ``|offsets[i]| <= |s_i - t_k|``.
    """

    offsets: np.ndarray    # (N, 3)
    indices: np.ndarray    # (N,) matched target index
    distances: np.ndarray  # (N,) raw source-to-target distance


def weighted_offsets(source, target, w: float) -> OffsetField:
    """Compute the attention-weighted offset field from source to target."""
    src = as_points(source, "source")
    idx, dist = nearest_neighbor(src, target)
    tgt = as_points(target, "target")
    raw = src - tgt[idx]
    scale = attention(dist, w)
    return OffsetField(offsets=scale[:, None] * raw, indices=idx, distances=dist)


# ---------------------------------------------------------------------------
# Basis point sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BpsCode:
    """Fixed basis points plus per-point distance to the encoded surface."""

    basis: np.ndarray      # (K, 3)
    distances: np.ndarray  # (K,) all >= 0


def bps_basis(size: int = 1024, radius: float = 0.15, seed: int = 7) -> np.ndarray:
    """Sample a fixed basis uniformly inside a ball around the origin.

    The basis must be persisted with any model trained against it; encoding
    the same surface with a different basis gives incomparable codes.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    direction = rng.normal(size=(size, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * np.cbrt(rng.uniform(size=(size, 1)))
    return direction * r


def bps_encode(surface, basis) -> BpsCode:
    """Encode a surface point set as distances from fixed basis points.

    Invariant under permutations of the surface points.
    """
    surf = as_points(surface, "surface")
    if surf.shape[0] == 0:
        raise ValueError("empty surface")
    basis = as_points(basis, "basis")
    _, dist = nearest_neighbor(basis, surf)
    return BpsCode(basis=basis, distances=dist)
