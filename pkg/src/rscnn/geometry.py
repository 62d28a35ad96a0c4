"""Point-cloud geometry: normalization, sampling, neighborhoods, relations.

All spatial kernels are written once over batched arrays ``(B, N, 3)``;
the single-cloud operations are the ``B = 1`` view of the same code, so
what the tests check is exactly what the networks run.

Distances are compared in squared form (monotone equivalent of Euclidean,
strict ``d < r`` membership becomes ``d^2 < r^2``), and all tie-breaks fall
to the lowest index, which keeps every kernel deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

GROUP_ALL_RADIUS = float("inf")
_FRAME_DEGENERACY = 1e-8


class RelationKind(Enum):
    """Low-level geometric relation fed to the relation MLP."""

    DIST = "dist"
    DIST_DIFF = "dist_diff"
    FULL = "full"
    NORMAL_COS = "normal_cos"
    PLANAR_XY = "planar_xy"
    PLANAR_XZ = "planar_xz"
    PLANAR_YZ = "planar_yz"
    PLANAR_FUSION = "planar_fusion"


RELATION_CHANNELS = {
    RelationKind.DIST: 1,
    RelationKind.DIST_DIFF: 4,
    RelationKind.FULL: 10,
    RelationKind.NORMAL_COS: 7,
    RelationKind.PLANAR_XY: 10,
    RelationKind.PLANAR_XZ: 10,
    RelationKind.PLANAR_YZ: 10,
    RelationKind.PLANAR_FUSION: 10,
}

_PLANAR_DROP_AXIS = {
    RelationKind.PLANAR_XY: 2,
    RelationKind.PLANAR_XZ: 1,
    RelationKind.PLANAR_YZ: 0,
}


@dataclass
class PointCloud:
    """Points with optional unit normals, per-point labels, and a shape label.

    Attributes:
        coords: (N, 3) float array.
        normals: (N, 3) unit vectors or None.
        point_labels: (N,) integer part labels or None.
        shape_label: integer class label or None.
    """

    coords: np.ndarray
    normals: np.ndarray | None = None
    point_labels: np.ndarray | None = None
    shape_label: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise ValueError(f"coords must be (N, 3) with N >= 1, got {self.coords.shape}")
        n = self.coords.shape[0]
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ValueError(f"normals shape {self.normals.shape} does not match {n} points")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length (within 1e-6)")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels)
            if self.point_labels.shape != (n,):
                raise ValueError(f"point_labels shape {self.point_labels.shape} does not match {n} points")
            if not np.issubdtype(self.point_labels.dtype, np.integer):
                raise ValueError("point_labels must be integers")

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    def replace_coords(self, coords: np.ndarray) -> "PointCloud":
        return PointCloud(coords, self.normals, self.point_labels, self.shape_label)


def normalize_global(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale the farthest point onto the unit sphere.

    Normals are directions and are left untouched. Degenerate single-point
    clouds (max radius ~ 0) are only translated.
    """
    c = cloud.coords - cloud.coords.mean(axis=0)
    r = np.sqrt((c * c).sum(axis=1).max())
    if r > 1e-12:
        c = c / r
    return cloud.replace_coords(c)


# ---------------------------------------------------------------------------
# farthest-point sampling


def geometric_start_index(coords: np.ndarray) -> np.ndarray:
    """Index of the point farthest from the cloud mean, per batch entry.

    Ties break lexicographically on (x, y, z), making the choice a function
    of the point set rather than its ordering.

    Accepts (N, 3) or (B, N, 3); returns a scalar or (B,) indices.
    """
    a = np.asarray(coords)
    single = a.ndim == 2
    if single:
        a = a[None]
    d2 = ((a - a.mean(axis=1, keepdims=True)) ** 2).sum(axis=2)
    out = np.empty(a.shape[0], dtype=np.int64)
    for b in range(a.shape[0]):
        order = np.lexsort((a[b, :, 2], a[b, :, 1], a[b, :, 0], -d2[b]))
        out[b] = order[0]
    return int(out[0]) if single else out


def farthest_point_sample_batch(coords: np.ndarray, count: int, starts: np.ndarray) -> np.ndarray:
    """Greedy max-min sampling over a batch.

    Args:
        coords: (B, N, 3).
        starts: (B,) start indices.

    Returns:
        (B, count) int64 indices. Ties go to the lowest index.
    """
    b, n, _ = coords.shape
    if not 1 <= count <= n:
        raise ValueError(f"sample count {count} out of range for {n} points")
    sel = np.empty((b, count), dtype=np.int64)
    sel[:, 0] = starts
    mind = np.full((b, n), np.inf, dtype=coords.dtype)
    rows = np.arange(b)
    for i in range(1, count):
        last = coords[rows, sel[:, i - 1]]
        d2 = ((coords - last[:, None, :]) ** 2).sum(axis=2)
        np.minimum(mind, d2, out=mind)
        sel[:, i] = mind.argmax(axis=1)
    return sel


def farthest_point_sample(cloud, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling of a single cloud.

    Args:
        cloud: PointCloud or (N, 3) array.
        count: number of points to select, 1 <= count <= N.
        start: index of the first selected point.

    Returns:
        (count,) indices; the first equals ``start``.
    """
    coords = cloud.coords if isinstance(cloud, PointCloud) else coords_arr(cloud)
    n = coords.shape[0]
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    return farthest_point_sample_batch(coords[None], count, np.array([start]))[0]


def coords_arr(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got {a.shape}")
    return a


# ---------------------------------------------------------------------------
# neighborhood construction


@dataclass
class ScaleNeighborhood:
    """Fixed-size neighbor table for one radius scale.

    ``indices`` is (S, K) into the cloud; entries beyond ``valid_counts``
    repeat in-ball members (padding). ``ref_coords`` is the relation
    reference point of each neighborhood (the sampled point, the in-ball
    mean, or a random member, per centroid_mode).
    """

    radius: float
    indices: np.ndarray
    valid_counts: np.ndarray
    ref_coords: np.ndarray


@dataclass
class NeighborhoodIndex:
    centroid_indices: np.ndarray
    scales: list[ScaleNeighborhood]


def _stable_smallest_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries along the last axis, in the order
    a stable full sort would list them (ties broken by lower index).

    argpartition plus a local lexsort is O(N + k log k) instead of
    O(N log N); when a tied value straddles the selection boundary the
    affected rows fall back to the exact full sort.
    """
    n = values.shape[-1]
    if k >= n:
        return np.argsort(values, axis=-1, kind="stable")
    cand = np.argpartition(values, k - 1, axis=-1)[..., :k]
    cd = np.take_along_axis(values, cand, axis=-1)
    local = np.lexsort((cand, cd), axis=-1)
    cand = np.take_along_axis(cand, local, axis=-1)
    cd = np.take_along_axis(cd, local, axis=-1)
    kth = cd[..., -1:]
    outside = (values == kth).sum(axis=-1) > (cd == kth).sum(axis=-1)
    if outside.any():
        where = np.nonzero(outside)
        full = np.argsort(values[where], axis=-1, kind="stable")[..., :k]
        cand[where] = full
    return cand


def group_neighbors_batch(
    coords: np.ndarray,
    centroid_idx: np.ndarray,
    radii,
    k: int,
    neighbor_mode: str = "random_in_ball",
    centroid_mode: str = "sampled_point",
    rng: np.random.Generator | None = None,
):
    """Build neighbor tables for every scale over a batch.

    Args:
        coords: (B, N, 3).
        centroid_idx: (B, S) indices of the sampled centroids.
        radii: strictly increasing radii; ``inf`` means group everything.
        k: neighbors per scale (K >= 1).
        neighbor_mode: "random_in_ball" | "knn". Without an ``rng`` the
            in-ball selection is distance-ranked (deterministic evaluation
            mode); with an ``rng`` it is uniform without replacement.
        centroid_mode: "sampled_point" | "neighborhood_mean" | "random_member".

    Returns:
        list over scales of (radius, indices (B,S,K), counts (B,S), ref (B,S,3)).
    """
    radii = [float(r) for r in radii]
    if k < 1:
        raise ValueError(f"neighbor count must be >= 1, got {k}")
    if any(r <= 0 for r in radii):
        raise ValueError("radii must be positive")
    if any(b >= a for b, a in zip(radii, radii[1:])):
        raise ValueError(f"radii must be strictly increasing, got {radii}")
    if neighbor_mode not in ("random_in_ball", "knn"):
        raise ValueError(f"unknown neighbor_mode {neighbor_mode!r}")
    if centroid_mode not in ("sampled_point", "neighborhood_mean", "random_member"):
        raise ValueError(f"unknown centroid_mode {centroid_mode!r}")

    b, n, _ = coords.shape
    s = centroid_idx.shape[1]
    rows = np.arange(b)[:, None]
    centers = coords[rows, centroid_idx]  # (B, S, 3)
    d2 = ((centers[:, :, None, :] - coords[:, None, :, :]) ** 2).sum(axis=3)  # (B, S, N)
    kk = np.arange(k)

    out = []
    if neighbor_mode == "knn":
        # radius is ignored: the K nearest always qualify
        order = _stable_smallest_k(d2, k)
        counts = np.full((b, s), min(k, n), dtype=np.int64)
        cols = np.ascontiguousarray(np.broadcast_to(kk[None, None, :] % n, (b, s, k)))
        idx = np.take_along_axis(order, cols, axis=2)
        refs = _refs(coords, centers, idx, counts, centroid_mode, rng)
        return [(GROUP_ALL_RADIUS, idx, counts, refs) for _ in radii]

    ranked = rng is None
    if ranked:
        # selection below never reads past position k - 1
        order = _stable_smallest_k(d2, k)
    for r in radii:
        if np.isinf(r):
            if k != n:
                raise ValueError(f"group-all neighborhood expects k == {n}, got {k}")
            counts = np.full((b, s), n, dtype=np.int64)
            idx = np.ascontiguousarray(np.broadcast_to(np.arange(n)[None, None, :], (b, s, n)))
        else:
            inball = d2 < r * r
            counts = inball.sum(axis=2)
            if ranked:
                sel_order = order
            else:
                scores = rng.random((b, s, n))
                scores = np.where(inball, scores, 2.0 + scores)
                sel_order = _stable_smallest_k(scores, k)
            cap = np.maximum(counts, 1)[:, :, None]
            cols = kk[None, None, :] % cap
            if not ranked:
                # pad entries draw with replacement from the selected members
                pad = (rng.random((b, s, k)) * cap).astype(np.int64)
                cols = np.where(kk[None, None, :] < cap, cols, pad)
            idx = np.take_along_axis(sel_order, cols, axis=2)
            if (counts == 0).any():
                # empty ball: fall back to the centroid itself (self relation)
                empty = counts == 0
                idx = np.where(empty[:, :, None], centroid_idx[:, :, None], idx)
                counts = np.where(empty, 1, counts)
        out.append((float(r), idx, counts, _refs(coords, centers, idx, counts, centroid_mode, rng)))
    return out


def _refs(coords, centers, idx, counts, centroid_mode, rng):
    if centroid_mode == "sampled_point":
        return centers.copy()
    b, s, k = idx.shape
    rows = np.arange(b)[:, None, None]
    genuine = np.minimum(counts, k)  # (B, S)
    if centroid_mode == "neighborhood_mean":
        pts = coords[rows, idx]  # (B, S, K, 3)
        mask = (np.arange(k)[None, None, :] < genuine[:, :, None]).astype(coords.dtype)
        return (pts * mask[..., None]).sum(axis=2) / genuine[:, :, None].astype(coords.dtype)
    # random_member: a random genuine neighbor when training, the first
    # selected one in deterministic mode
    if rng is None:
        col = np.zeros((b, s, 1), dtype=np.int64)
    else:
        col = (rng.random((b, s, 1)) * genuine[:, :, None]).astype(np.int64)
    member = np.take_along_axis(idx, col, axis=2)[:, :, 0]
    return coords[np.arange(b)[:, None], member]


def build_neighborhoods(
    cloud: PointCloud,
    centroid_indices,
    radii,
    k: int,
    neighbor_mode: str = "random_in_ball",
    centroid_mode: str = "sampled_point",
    rng: np.random.Generator | None = None,
) -> NeighborhoodIndex:
    """Single-cloud neighborhood construction (see group_neighbors_batch)."""
    centroid_indices = np.asarray(centroid_indices, dtype=np.int64)
    if centroid_indices.ndim != 1 or centroid_indices.size < 1:
        raise ValueError("centroid_indices must be a non-empty 1-D index array")
    n = cloud.size
    if centroid_indices.min() < 0 or centroid_indices.max() >= n:
        raise ValueError(f"centroid index out of range for {n} points")
    groups = group_neighbors_batch(
        cloud.coords[None], centroid_indices[None], radii, k, neighbor_mode, centroid_mode, rng
    )
    scales = [
        ScaleNeighborhood(radius=r, indices=idx[0], valid_counts=cnt[0], ref_coords=ref[0])
        for r, idx, cnt, ref in groups
    ]
    return NeighborhoodIndex(centroid_indices=centroid_indices, scales=scales)


def normalize_local(cloud: PointCloud, nbhd: NeighborhoodIndex) -> list[np.ndarray]:
    """Neighbor coordinates relative to each neighborhood's reference point.

    Returns one (S, K, 3) block per scale; the reference maps to the origin.
    """
    out = []
    for sc in nbhd.scales:
        out.append(cloud.coords[sc.indices] - sc.ref_coords[:, None, :])
    return out


# ---------------------------------------------------------------------------
# local frames


@dataclass
class LocalFrame:
    """Origin plus a rotation whose third row is the surface normal."""

    origin: np.ndarray
    rotation: np.ndarray


def local_frames_batch(normals: np.ndarray, origins: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Orthonormal frames (rows t1, t2, n) for a batch of oriented points.

    The first tangent is the direction from each origin toward its anchor
    (here: the cloud mean), projected onto the tangent plane. Because the
    anchor moves rigidly with the cloud, the construction commutes with
    rotations, which is what makes local coordinates pose-invariant. A
    fixed-axis fallback handles the degenerate aligned case.

    Args:
        normals: (..., 3) unit normals.
        origins: (..., 3) frame origins.
        anchors: (..., 3) anchor points (broadcastable to origins).

    Returns:
        (..., 3, 3) rotation matrices with determinant +1.
    """
    n = np.asarray(normals, dtype=np.float64)
    seed = np.asarray(anchors, dtype=np.float64) - np.asarray(origins, dtype=np.float64)
    proj = seed - (seed * n).sum(axis=-1, keepdims=True) * n
    norm = np.linalg.norm(proj, axis=-1, keepdims=True)
    # fallback axis: world axis least aligned with the normal
    fb = np.zeros_like(n)
    least = np.abs(n).argmin(axis=-1)
    np.put_along_axis(fb, least[..., None], 1.0, axis=-1)
    fb = fb - (fb * n).sum(axis=-1, keepdims=True) * n
    fb = fb / np.linalg.norm(fb, axis=-1, keepdims=True)
    t1 = np.where(norm > _FRAME_DEGENERACY, proj / np.maximum(norm, _FRAME_DEGENERACY), fb)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=-2)


def local_frame(cloud: PointCloud, centroid_index: int) -> LocalFrame:
    """Local coordinate frame at one point of a cloud (requires normals)."""
    if cloud.normals is None:
        raise ValueError("local frames require normals")
    if not 0 <= centroid_index < cloud.size:
        raise ValueError(f"centroid index {centroid_index} out of range")
    origin = cloud.coords[centroid_index]
    rot = local_frames_batch(cloud.normals[centroid_index], origin, cloud.coords.mean(axis=0))
    return LocalFrame(origin=origin.copy(), rotation=rot)


# ---------------------------------------------------------------------------
# relations


def relation_block(
    kind: RelationKind,
    ref: np.ndarray,
    neigh: np.ndarray,
    ref_normals: np.ndarray | None = None,
    neigh_normals: np.ndarray | None = None,
) -> np.ndarray:
    """Relation vectors between reference points and their neighbor blocks.

    Args:
        kind: relation variant (PLANAR_FUSION is expanded by the caller
            into its three planar views).
        ref: (..., 3) reference coordinates.
        neigh: (..., K, 3) neighbor coordinates.
        ref_normals / neigh_normals: required for NORMAL_COS.

    Returns:
        (..., K, channels) array.
    """
    if kind is RelationKind.PLANAR_FUSION:
        raise ValueError("planar_fusion expands to three planar views; compute each view separately")
    if kind in _PLANAR_DROP_AXIS:
        axis = _PLANAR_DROP_AXIS[kind]
        ref = ref.copy()
        neigh = neigh.copy()
        ref[..., axis] = 0.0
        neigh[..., axis] = 0.0
        kind = RelationKind.FULL
    refb = np.broadcast_to(ref[..., None, :], neigh.shape)
    diff = refb - neigh
    d = np.sqrt((diff * diff).sum(axis=-1, keepdims=True))
    if kind is RelationKind.DIST:
        return d
    if kind is RelationKind.DIST_DIFF:
        return np.concatenate([d, diff], axis=-1)
    if kind is RelationKind.FULL:
        return np.concatenate([d, diff, refb, neigh], axis=-1)
    if kind is RelationKind.NORMAL_COS:
        if ref_normals is None or neigh_normals is None:
            raise ValueError("normal_cos relation requires normals")
        rn = np.broadcast_to(ref_normals[..., None, :], neigh_normals.shape)
        cos = (rn * neigh_normals).sum(axis=-1, keepdims=True)
        return np.concatenate([cos, rn, neigh_normals], axis=-1)
    raise ValueError(f"unknown relation kind {kind}")


def compute_relation(kind: RelationKind, xi, xj, ni=None, nj=None) -> np.ndarray:
    """Relation vector for a single point pair (see relation_block)."""
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if xi.shape != (3,) or xj.shape != (3,):
        raise ValueError("compute_relation expects 3-vectors")
    rn = None if ni is None else np.asarray(ni, dtype=np.float64)[None]
    nn = None if nj is None else np.asarray(nj, dtype=np.float64)[None, None]
    block = relation_block(kind, xi[None], xj[None, None], rn, nn)
    return block[0, 0]
