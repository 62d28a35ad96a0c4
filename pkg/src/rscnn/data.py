"""Synthetic shape families with analytic normals and part labels.

Five parametric surfaces (sphere, cube, cylinder, torus, cone) sampled
uniformly by area, so desk-scale classification / segmentation / normal
estimation datasets can be generated on the fly with exact ground truth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .io import save_manifest, save_point_cloud

FAMILIES = ("sphere", "cube", "cylinder", "torus", "cone")

# part count per family; cube may also be generated single-part
PART_COUNTS = {"sphere": 1, "cube": 6, "cylinder": 2, "torus": 1, "cone": 2}

_TWO_PI = 2.0 * np.pi


@dataclass
class ShapeSpec:
    """A fully reproducible shape sample: family, size params, count, seed."""

    family: str
    points: int
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.points < 8:
            raise ValueError(f"need at least 8 points, got {self.points}")


def _unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    while (norms < 1e-12).any():  # pragma: no cover - probability ~0
        bad = norms[:, 0] < 1e-12
        v[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norms


def _positive(params, key, default):
    v = float(params.get(key, default))
    if v <= 0:
        raise ValueError(f"size param {key!r} must be positive, got {v}")
    return v


def _sphere(rng, n, params):
    r = _positive(params, "radius", 1.0)
    u = _unit_rows(rng, n)
    return r * u, u, np.zeros(n, dtype=np.int64)


def _cube(rng, n, params):
    a = _positive(params, "half", 1.0)
    per_face = bool(params.get("face_labels", 1.0))
    face = rng.integers(6, size=n)
    uv = rng.uniform(-a, a, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    coords = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    rows = np.arange(n)
    coords[rows, axis] = sign * a
    others = np.stack([(axis + 1) % 3, (axis + 2) % 3], axis=1)
    np.put_along_axis(coords, others, uv, axis=1)
    normals[rows, axis] = sign
    labels = face if per_face else np.zeros(n, dtype=np.int64)
    return coords, normals, labels.astype(np.int64)


def _cylinder(rng, n, params):
    r = _positive(params, "radius", 1.0)
    h = _positive(params, "height", 2.0)
    side_area = _TWO_PI * r * h
    cap_area = np.pi * r * r
    total = side_area + 2 * cap_area
    u = rng.random(n)
    theta = rng.uniform(0.0, _TWO_PI, n)
    side = u < side_area / total
    top = (~side) & (u < (side_area + cap_area) / total)
    coords = np.empty((n, 3))
    normals = np.zeros((n, 3))
    z = rng.uniform(-h / 2, h / 2, n)
    rho = r * np.sqrt(rng.random(n))
    coords[:, 0] = np.where(side, r, rho) * np.cos(theta)
    coords[:, 1] = np.where(side, r, rho) * np.sin(theta)
    coords[:, 2] = np.where(side, z, np.where(top, h / 2, -h / 2))
    normals[side, 0] = np.cos(theta[side])
    normals[side, 1] = np.sin(theta[side])
    normals[~side, 2] = np.where(top[~side], 1.0, -1.0)
    labels = np.where(side, 0, 1).astype(np.int64)
    return coords, normals, labels


def _cone(rng, n, params):
    r = _positive(params, "radius", 1.0)
    h = _positive(params, "height", 2.0)
    slant = np.hypot(r, h)
    side_area = np.pi * r * slant
    base_area = np.pi * r * r
    u = rng.random(n)
    theta = rng.uniform(0.0, _TWO_PI, n)
    side = u < side_area / (side_area + base_area)
    coords = np.empty((n, 3))
    normals = np.empty((n, 3))
    # lateral: radius grows linearly from the apex, so area ~ t dt
    t = np.sqrt(rng.random(n))
    rho = np.where(side, r * t, r * np.sqrt(rng.random(n)))
    coords[:, 0] = rho * np.cos(theta)
    coords[:, 1] = rho * np.sin(theta)
    coords[:, 2] = np.where(side, h * (1.0 - t), 0.0)
    normals[:, 0] = np.where(side, h * np.cos(theta) / slant, 0.0)
    normals[:, 1] = np.where(side, h * np.sin(theta) / slant, 0.0)
    normals[:, 2] = np.where(side, r / slant, -1.0)
    labels = np.where(side, 0, 1).astype(np.int64)
    return coords, normals, labels


def _torus(rng, n, params):
    big = _positive(params, "major", 1.0)
    small = _positive(params, "minor", 0.35)
    if small >= big:
        raise ValueError(f"torus needs minor < major, got {small} >= {big}")
    theta = rng.uniform(0.0, _TWO_PI, n)
    phi = np.empty(0)
    # area element ~ (R + r cos(phi)); rejection against the flat proposal
    while phi.size < n:
        cand = rng.uniform(0.0, _TWO_PI, 2 * n)
        acc = rng.random(2 * n) < (big + small * np.cos(cand)) / (big + small)
        phi = np.concatenate([phi, cand[acc]])
    phi = phi[:n]
    ring = big + small * np.cos(phi)
    coords = np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)
    normals = np.stack(
        [np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)], axis=1
    )
    return coords, normals, np.zeros(n, dtype=np.int64)


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "torus": _torus,
    "cone": _cone,
}


def generate(spec: ShapeSpec) -> PointCloud:
    """Sample the surface uniformly by area; bit-identical for equal specs."""
    rng = np.random.default_rng(spec.seed)
    coords, normals, labels = _SAMPLERS[spec.family](rng, spec.points, spec.params)
    return PointCloud(coords, normals=normals, point_labels=labels)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationConfig:
    scale_low: float = 0.66
    scale_high: float = 1.5
    translation: float = 0.2
    input_dropout: float = 0.0

    def __post_init__(self):
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError(f"bad scale range [{self.scale_low}, {self.scale_high}]")
        if self.translation < 0:
            raise ValueError("translation range must be >= 0")
        if not 0 <= self.input_dropout < 1:
            raise ValueError("input_dropout must lie in [0, 1)")


def augment(cloud: PointCloud, config: AugmentationConfig, rng: np.random.Generator) -> PointCloud:
    """Per-axis anisotropic scale then global translation; labels untouched.

    Normals transform by the inverse-transpose of the scaling (n / s,
    renormalized), which keeps them orthogonal to the scaled surface.
    """
    s = rng.uniform(config.scale_low, config.scale_high, size=3)
    t = rng.uniform(-config.translation, config.translation, size=3)
    coords = cloud.coords * s + t
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals / s
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(
        coords, normals=normals, point_labels=cloud.point_labels, shape_label=cloud.shape_label
    )


def density_dropout(cloud: PointCloud, keep: int, rng: np.random.Generator) -> PointCloud:
    """Uniform subsample without replacement, carrying labels and normals."""
    if not 1 <= keep <= cloud.size:
        raise ValueError(f"keep must lie in [1, {cloud.size}], got {keep}")
    sel = rng.choice(cloud.size, size=keep, replace=False)
    return PointCloud(
        cloud.coords[sel],
        normals=None if cloud.normals is None else cloud.normals[sel],
        point_labels=None if cloud.point_labels is None else cloud.point_labels[sel],
        shape_label=cloud.shape_label,
    )


def resample_dropout(cloud: PointCloud, max_ratio: float, rng: np.random.Generator) -> PointCloud:
    """Training-time input dropout that preserves the point count.

    Drops a random fraction (up to ``max_ratio``) of the points, then pads
    back to the original size by repeating survivors, so batches keep a
    uniform shape while the effective density varies.
    """
    if max_ratio <= 0:
        return cloud
    n = cloud.size
    keep = int(n - np.floor(rng.random() * max_ratio * n))
    keep = max(1, min(n, keep))
    sub = density_dropout(cloud, keep, rng)
    if keep == n:
        return sub
    pad = rng.integers(keep, size=n - keep)
    sel = np.concatenate([np.arange(keep), pad])
    return PointCloud(
        sub.coords[sel],
        normals=None if sub.normals is None else sub.normals[sel],
        point_labels=None if sub.point_labels is None else sub.point_labels[sel],
        shape_label=sub.shape_label,
    )


# ---------------------------------------------------------------------------
# dataset building

_SIZE_RANGES = {
    "sphere": {"radius": (0.7, 1.3)},
    "cube": {"half": (0.6, 1.1)},
    "cylinder": {"radius": (0.5, 0.9), "height": (1.2, 2.2)},
    "torus": {"minor": (0.22, 0.45)},
    "cone": {"radius": (0.6, 1.0), "height": (1.2, 2.0)},
}

_SPLIT_CODES = {"train": 0, "test": 1}


def sample_spec(family: str, points: int, seed: int, split: str, index: int) -> ShapeSpec:
    """Spec for one dataset sample; size params drawn from per-family ranges."""
    code = _SPLIT_CODES[split]
    rng = np.random.default_rng([seed, code, FAMILIES.index(family), index])
    params = {k: rng.uniform(lo, hi) for k, (lo, hi) in _SIZE_RANGES[family].items()}
    child = int(rng.integers(2**63))
    return ShapeSpec(family=family, points=points, seed=child, params=params)


def generate_dataset(
    out_dir: str,
    families: tuple = ("sphere", "cube", "cylinder", "torus"),
    train_per_class: int = 200,
    test_per_class: int = 50,
    points: int = 256,
    seed: int = 0,
) -> dict[str, str]:
    """Write per-shape files plus train/test manifests; returns manifest paths.

    Splits use disjoint seed streams, so no sample is shared between them.
    """
    for fam in families:
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {fam!r}")
    if len(set(families)) != len(families):
        raise ValueError("families must be distinct")
    manifests = {}
    for split, count in (("train", train_per_class), ("test", test_per_class)):
        entries = []
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for label, fam in enumerate(families):
            for j in range(count):
                spec = sample_spec(fam, points, seed, split, j)
                cloud = generate(spec)
                cloud = PointCloud(
                    cloud.coords,
                    normals=cloud.normals,
                    point_labels=cloud.point_labels,
                    shape_label=label,
                )
                rel = f"{split}/{fam}_{j:04d}.xyz"
                save_point_cloud(os.path.join(out_dir, rel), cloud)
                entries.append((rel, label))
        path = os.path.join(out_dir, f"{split}.txt")
        save_manifest(path, entries)
        manifests[split] = path
    return manifests
