"""Relation-shape convolution.

The operator learns per-neighbor channel weights from a low-level geometric
relation vector h via a shared MLP, multiplies them elementwise onto the
neighbor features, aggregates each neighborhood with a symmetric function,
and raises the channel count with a single shared mapping:

    out = raise(sigma(A({M(h_ij) * f_xj})))

M is shared across all neighborhoods, scales, and (for the planar-fusion
relation) 2D views, so its parameter gradients accumulate one contribution
per application site.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    add,
    batchnorm,
    concat,
    gather_rows,
    matmul,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
)
from .geometry import (
    RELATION_CHANNELS,
    NeighborhoodIndex,
    PointCloud,
    RelationKind,
    relation_block,
)

_PLANAR_VIEWS = (RelationKind.PLANAR_XY, RelationKind.PLANAR_XZ, RelationKind.PLANAR_YZ)

AGGREGATIONS = ("max", "avg", "sum")
SCALE_FUSIONS = ("max", "sum")


def default_relation_widths(in_channels: int, depth: int = 3) -> tuple[int, ...]:
    """Hidden widths of the relation MLP; the last width must equal C_in."""
    if depth == 3:
        return (16, 64, in_channels) if in_channels >= 64 else (in_channels,) * 3
    if depth == 2:
        return (16, in_channels) if in_channels >= 64 else (in_channels,) * 2
    if depth == 4:
        return (16, 64, 64, in_channels) if in_channels >= 64 else (in_channels,) * 4
    raise ValueError(f"unsupported relation-MLP depth {depth}")


@dataclass
class RSConvLayerConfig:
    """One hierarchical RS-Conv layer.

    ``scales`` lists (radius, neighbor_count) pairs with strictly increasing
    radii; every scale shares the relation MLP and the channel-raising map.
    """

    in_channels: int
    out_channels: int
    scales: tuple = ((0.2, 8),)
    relation_kind: RelationKind = RelationKind.FULL
    relation_mlp_widths: tuple[int, ...] | None = None
    aggregation: str = "max"
    relation_cut_ratio: float = 0.0
    centroid_mode: str = "sampled_point"
    neighbor_mode: str = "random_in_ball"
    scale_fusion: str = "max"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.relation_mlp_widths is None:
            self.relation_mlp_widths = default_relation_widths(self.in_channels)
        self.relation_mlp_widths = tuple(self.relation_mlp_widths)
        if self.relation_mlp_widths[-1] != self.in_channels:
            raise ValueError(
                f"relation MLP must end at in_channels={self.in_channels}, got widths {self.relation_mlp_widths}"
            )
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.scale_fusion not in SCALE_FUSIONS:
            raise ValueError(f"unknown scale fusion {self.scale_fusion!r}")
        if not 0.0 <= self.relation_cut_ratio < 1.0:
            raise ValueError("relation_cut_ratio must be in [0, 1)")
        radii = [r for r, _ in self.scales]
        if any(b >= a for b, a in zip(radii, radii[1:])):
            raise ValueError(f"scale radii must be strictly increasing, got {radii}")
        if any(k < 1 for _, k in self.scales):
            raise ValueError("each scale needs at least one neighbor")

    @property
    def relation_channels(self) -> int:
        return RELATION_CHANNELS[self.relation_kind]

    @property
    def view_kinds(self) -> tuple[RelationKind, ...]:
        if self.relation_kind is RelationKind.PLANAR_FUSION:
            return _PLANAR_VIEWS
        return (self.relation_kind,)


def register_rsconv_params(store: ParamStore, prefix: str, cfg: RSConvLayerConfig) -> None:
    """Create the layer's parameters: relation MLP stack + channel raiser.

    Affine layers are bias-free because each is followed by batch norm.
    """
    prev = cfg.relation_channels
    for i, w in enumerate(cfg.relation_mlp_widths):
        store.add_param(f"{prefix}.rel{i}.weight", (prev, w), kind="weight", fan_in=prev)
        store.add_bn(f"{prefix}.rel{i}.bn", w)
        prev = w
    store.add_param(f"{prefix}.raise.weight", (cfg.in_channels, cfg.out_channels), kind="weight", fan_in=cfg.in_channels)
    store.add_bn(f"{prefix}.raise.bn", cfg.out_channels)


def relation_weights(
    store: ParamStore,
    prefix: str,
    cfg: RSConvLayerConfig,
    h: np.ndarray,
    training: bool,
) -> Tensor:
    """Map relation vectors through the shared MLP to channel weights.

    Args:
        h: (..., relation_channels) relation blocks.

    Returns:
        Tensor of shape (..., in_channels). Each MLP layer is
        affine -> batch norm -> ReLU, with batch norm taken over the
        flattened sample axis.
    """
    h = np.asarray(h, dtype=store.dtype)
    if h.shape[-1] != cfg.relation_channels:
        raise ValueError(
            f"relation block has {h.shape[-1]} channels, layer expects {cfg.relation_channels}"
        )
    lead = h.shape[:-1]
    x = Tensor(h.reshape(-1, h.shape[-1]))
    for i in range(len(cfg.relation_mlp_widths)):
        x = matmul(x, store[f"{prefix}.rel{i}.weight"].tensor)
        x = batchnorm(x, store.bn_states[f"{prefix}.rel{i}.bn"], training)
        x = relu(x)
    return reshape(x, lead + (cfg.in_channels,))


def make_cut_mask(shape, ratio: float, rng: np.random.Generator) -> np.ndarray | None:
    """Bernoulli keep-mask over neighbor slots (1 keep, 0 drop)."""
    if ratio <= 0.0:
        return None
    return (rng.random(shape) >= ratio).astype(np.float64)


@dataclass
class ScaleGroup:
    """Prepared inputs of one scale: relation blocks plus the feature source.

    Exactly one of ``flat_indices`` (gather rows from the shared feature
    table) or ``const_features`` (fixed per-neighborhood features, e.g.
    centered coordinates at the first layer) is set.
    """

    h_views: list = field(default_factory=list)  # each (B, S, K, ch)
    flat_indices: np.ndarray | None = None  # (B, S, K) into the table
    const_features: np.ndarray | None = None  # (B, S, K, C_in)
    cut_mask: np.ndarray | None = None  # (B, S, K)
    weights_override: Tensor | None = None  # (B, S, K, C_in); replaces M(h)


_REDUCERS = {"max": reduce_max, "avg": reduce_mean, "sum": reduce_sum}


def rs_conv_core(
    cfg: RSConvLayerConfig,
    store: ParamStore,
    prefix: str,
    groups: list[ScaleGroup],
    feature_table: Tensor | None,
    training: bool,
    apply_activation: bool = True,
    apply_raise: bool = True,
) -> Tensor:
    """Shared forward over prepared scale groups; returns (B, S, C_out)."""
    reducer = _REDUCERS[cfg.aggregation]
    per_scale = []
    b = s = None
    for g in groups:
        if g.flat_indices is not None:
            if feature_table is None:
                raise ValueError("scale group indexes a feature table but none was given")
            feats = gather_rows(feature_table, g.flat_indices)  # (B, S, K, C)
        else:
            feats = Tensor(np.asarray(g.const_features, dtype=store.dtype))
        b, s = feats.data.shape[0], feats.data.shape[1]
        if g.weights_override is not None:
            views = [g.weights_override]
        else:
            views = [
                relation_weights(store, prefix, cfg, h, training) for h in g.h_views
            ]
        acc = None
        for w in views:
            if g.cut_mask is not None:
                w = mul(w, g.cut_mask[..., None].astype(store.dtype))
            t = reducer(mul(w, feats), axis=2)  # (B, S, C)
            if apply_activation:
                t = relu(t)
            acc = t if acc is None else add(acc, t)
        per_scale.append(acc)
    fused = per_scale[0]
    for t in per_scale[1:]:
        if cfg.scale_fusion == "sum":
            fused = add(fused, t)
        else:
            stacked = concat(
                [reshape(fused, (1, b, s, cfg.in_channels)), reshape(t, (1, b, s, cfg.in_channels))],
                axis=0,
            )
            fused = reduce_max(stacked, axis=0)
    if not apply_raise:
        return fused
    x = reshape(fused, (b * s, cfg.in_channels))
    x = matmul(x, store[f"{prefix}.raise.weight"].tensor)
    x = batchnorm(x, store.bn_states[f"{prefix}.raise.bn"], training)
    x = relu(x)
    return reshape(x, (b, s, cfg.out_channels))


def rs_conv_forward(
    cfg: RSConvLayerConfig,
    store: ParamStore,
    prefix: str,
    features,
    cloud: PointCloud,
    nbhd: NeighborhoodIndex,
    training: bool = False,
    cut_rng: np.random.Generator | None = None,
) -> Tensor:
    """Single-cloud RS-Conv layer over a prebuilt neighborhood index.

    Args:
        features: (N, C_in) Tensor or array of per-point features.
        nbhd: centroids plus per-scale neighbor tables (one per layer scale).

    Returns:
        (S, C_out) Tensor of convolved centroid features.
    """
    if len(nbhd.scales) != len(cfg.scales):
        raise ValueError(f"config has {len(cfg.scales)} scales, neighborhood has {len(nbhd.scales)}")
    table = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=store.dtype))
    if table.data.ndim != 2 or table.data.shape[1] != cfg.in_channels:
        raise ValueError(f"features must be (N, {cfg.in_channels}), got {table.data.shape}")
    if table.data.shape[0] != cloud.size:
        raise ValueError("feature rows do not match cloud points")
    coords = cloud.coords
    groups = []
    for sc in nbhd.scales:
        neigh = coords[sc.indices][None]  # (1, S, K, 3)
        ref = sc.ref_coords[None]
        h_views = []
        for kind in cfg.view_kinds:
            if kind is RelationKind.NORMAL_COS:
                if cloud.normals is None:
                    raise ValueError("normal_cos relation requires cloud normals")
                rn = cloud.normals[nbhd.centroid_indices][None]
                nn = cloud.normals[sc.indices][None]
                h_views.append(relation_block(kind, ref, neigh, rn, nn))
            else:
                h_views.append(relation_block(kind, ref, neigh))
        mask = None
        if training and cfg.relation_cut_ratio > 0.0 and cut_rng is not None:
            mask = make_cut_mask((1,) + sc.indices.shape, cfg.relation_cut_ratio, cut_rng)
        groups.append(ScaleGroup(h_views=h_views, flat_indices=sc.indices[None], cut_mask=mask))
    out = rs_conv_core(cfg, store, prefix, groups, table, training)
    return reshape(out, (out.data.shape[1], cfg.out_channels))


# ---------------------------------------------------------------------------
# grid-convolution equivalence


@dataclass
class GridConvResult:
    rs_map: np.ndarray
    dense_map: np.ndarray

    @property
    def max_abs_diff(self) -> float:
        return float(np.abs(self.rs_map - self.dense_map).max())


def _dense_conv2d(feature_map: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w, c = feature_map.shape
    out = np.zeros((h - 2, w - 2), dtype=feature_map.dtype)
    for y in range(h - 2):
        for x in range(w - 2):
            acc = 0.0
            for dy in range(3):
                for dx in range(3):
                    for ch in range(c):
                        acc += kernel[dy, dx, ch] * feature_map[y + dy, x + dx, ch]
            out[y, x] = acc
    return out


def grid_conv_oracle(kernel: np.ndarray, feature_map: np.ndarray) -> GridConvResult:
    """Run RS-Conv machinery on a regular grid against a dense 2D convolution.

    The grid is embedded in the z = 0 plane with unit spacing; each interior
    point's 3x3 stencil forms its neighborhood. The relation mapping M is
    replaced by a lookup from the nine discrete offsets into the kernel,
    aggregation is sum and the activation is identity, which collapses the
    learned-weight path to the classic convolution this checks against.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    feature_map = np.asarray(feature_map, dtype=np.float64)
    if kernel.ndim != 3 or kernel.shape[:2] != (3, 3):
        raise ValueError(f"kernel must be (3, 3, C), got {kernel.shape}")
    if feature_map.ndim != 3 or feature_map.shape[2] != kernel.shape[2]:
        raise ValueError(f"feature map must be (H, W, {kernel.shape[2]}), got {feature_map.shape}")
    h, w, c = feature_map.shape
    if h < 3 or w < 3:
        raise ValueError("grid too small for a 3x3 stencil")

    # grid embedding: point (row y, col x) lives at coordinates (x, y, 0);
    # interior centroids carry an exact 3x3 stencil neighborhood
    iy, ix = np.meshgrid(np.arange(1, h - 1), np.arange(1, w - 1), indexing="ij")
    s = iy.size
    offs = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    stencil = np.stack(
        [((iy + dy) * w + (ix + dx)).reshape(-1) for dy, dx in offs], axis=1
    )  # (S, 9)
    weights = np.stack(
        [np.broadcast_to(kernel[dy + 1, dx + 1], (s, c)) for dy, dx in offs], axis=1
    )  # (S, 9, C)

    cfg = RSConvLayerConfig(
        in_channels=c,
        out_channels=c,
        scales=((1.5, 9),),
        relation_kind=RelationKind.DIST_DIFF,
        relation_mlp_widths=(c,),
        aggregation="sum",
    )
    store = ParamStore(dtype=np.float64)
    group = ScaleGroup(
        flat_indices=stencil[None],
        weights_override=Tensor(weights[None]),
    )
    table = Tensor(feature_map.reshape(-1, c))
    agg = rs_conv_core(
        cfg, store, "grid", [group], table, training=False,
        apply_activation=False, apply_raise=False,
    )  # (1, S, C)
    rs = reduce_sum(reshape(agg, (s, c)), axis=1).data.reshape(h - 2, w - 2)
    return GridConvResult(rs_map=rs, dense_map=_dense_conv2d(feature_map, kernel))
