"""Hierarchical networks built from relation-shape convolution layers.

Three task heads share one encoder: classification (global max pool + FC
stack), part segmentation (feature-propagation decoder + per-point head),
and normal estimation (the segmentation trunk with a 3-channel normalized
head and cosine loss).

The encoder consumes a batch of equally-sized clouds stacked to (B, N, 3).
Geometry (sampling, grouping, relation blocks) always runs in float64 so
neighborhood decisions are stable regardless of the training precision;
only the differentiable feature path runs in the store dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    add,
    batchnorm,
    concat,
    dropout,
    gather_rows,
    l2_normalize_rows,
    matmul,
    mul,
    reduce_max,
    reduce_sum,
    relu,
    reshape,
)
from .conv import RSConvLayerConfig, ScaleGroup, default_relation_widths, make_cut_mask, register_rsconv_params, rs_conv_core
from .geometry import (
    GROUP_ALL_RADIUS,
    PointCloud,
    RelationKind,
    farthest_point_sample_batch,
    geometric_start_index,
    group_neighbors_batch,
    local_frames_batch,
    relation_block,
)

TASKS = ("classification", "segmentation", "normal_estimation")

FP_EPS = 1e-8


@dataclass
class NetworkConfig:
    """Architecture of one hierarchical network.

    ``layer_points`` gives the centroid count of each stage (clamped to the
    incoming point count at run time, so sparser clouds still evaluate);
    a final stage of 1 groups every remaining point.
    """

    task: str
    layers: tuple
    layer_points: tuple
    num_classes: int = 0
    fc_widths: tuple = (256, 128)
    fc_dropout: float = 0.5
    fp_widths: tuple = ()
    head_hidden: int = 64
    num_parts: int = 0
    use_onehot_label: bool = False
    use_local_frames: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.layers = tuple(self.layers)
        self.layer_points = tuple(int(p) for p in self.layer_points)
        if len(self.layers) != len(self.layer_points):
            raise ValueError("one layer config per stage required")
        if any(n2 >= n1 for n1, n2 in zip(self.layer_points, self.layer_points[1:])):
            raise ValueError(f"layer_points must be strictly decreasing, got {self.layer_points}")
        if any(p < 1 for p in self.layer_points):
            raise ValueError("layer_points must be positive")
        prev = 3
        for i, lc in enumerate(self.layers):
            if lc.in_channels != prev:
                raise ValueError(
                    f"layer {i} expects in_channels={prev} (got {lc.in_channels}); channels must chain"
                )
            prev = lc.out_channels
        if self.task == "classification" and self.num_classes < 2:
            raise ValueError("classification needs num_classes >= 2")
        if self.task == "segmentation":
            if self.num_parts < 2:
                raise ValueError("segmentation needs num_parts >= 2")
        if self.task in ("segmentation", "normal_estimation"):
            if len(self.fp_widths) != len(self.layers):
                raise ValueError("one fp width per stage required")
        if self.use_onehot_label and self.num_classes < 1:
            raise ValueError("one-hot label concat needs num_classes")

    @property
    def feature_channels(self) -> int:
        return self.layers[-1].out_channels


@dataclass
class Model:
    """A network config plus its parameter store."""

    config: NetworkConfig
    store: ParamStore


# ---------------------------------------------------------------------------
# factories


def _stage_configs(points, channels, base_radii, scale_step, scales, neighbors, layer_points, **kw):
    layers = []
    prev_ch = 3
    prev_n = points
    for i, ch in enumerate(channels):
        if layer_points[i] == 1:
            stage_scales = ((GROUP_ALL_RADIUS, prev_n),)
        else:
            stage_scales = tuple(
                (base_radii[i] * scale_step**s, neighbors) for s in range(scales)
            )
        layers.append(
            RSConvLayerConfig(
                in_channels=prev_ch,
                out_channels=ch,
                scales=stage_scales,
                relation_mlp_widths=default_relation_widths(prev_ch, kw.get("mapping_depth", 3)),
                relation_kind=kw.get("relation_kind", RelationKind.FULL),
                aggregation=kw.get("aggregation", "max"),
                scale_fusion=kw.get("scale_fusion", "max"),
                relation_cut_ratio=kw.get("relation_cut_ratio", 0.0),
                centroid_mode=kw.get("centroid_mode", "sampled_point"),
                neighbor_mode=kw.get("neighbor_mode", "random_in_ball"),
            )
        )
        prev_ch = ch
        prev_n = layer_points[i]
    return tuple(layers)


def make_classifier_config(
    points: int = 1024,
    num_classes: int = 4,
    channels: tuple = (64, 128, 256),
    base_radii: tuple = (0.23, 0.42),
    scale_step: float = 1.5,
    scales: int = 3,
    neighbors: int = 10,
    fc_widths: tuple = (256, 128),
    fc_dropout: float = 0.5,
    use_local_frames: bool = False,
    **kw,
) -> NetworkConfig:
    """Three-stage classifier: N -> N/2 -> N/8 -> 1 with a global FC head."""
    layer_points = (points // 2, points // 8, 1)
    layers = _stage_configs(points, channels, base_radii, scale_step, scales, neighbors, layer_points, **kw)
    return NetworkConfig(
        task="classification",
        layers=layers,
        layer_points=layer_points,
        num_classes=num_classes,
        fc_widths=tuple(fc_widths),
        fc_dropout=fc_dropout,
        use_local_frames=use_local_frames,
    )


def make_segmenter_config(
    points: int = 1024,
    num_parts: int = 2,
    num_classes: int = 0,
    channels: tuple = (32, 64, 128, 256),
    base_radii: tuple = (0.23, 0.32, 0.45),
    scale_step: float = 1.5,
    scales: int = 3,
    neighbors: int = 10,
    fp_widths: tuple = (128, 128, 64, 64),
    head_hidden: int = 64,
    fc_dropout: float = 0.5,
    use_onehot_label: bool = False,
    use_local_frames: bool = False,
    task: str = "segmentation",
    **kw,
) -> NetworkConfig:
    """Four-stage trunk with feature-propagation decoder and per-point head."""
    layer_points = (points // 2, points // 4, points // 16, 1)
    layers = _stage_configs(points, channels, base_radii, scale_step, scales, neighbors, layer_points, **kw)
    return NetworkConfig(
        task=task,
        layers=layers,
        layer_points=layer_points,
        num_classes=num_classes,
        fp_widths=tuple(fp_widths),
        head_hidden=head_hidden,
        fc_dropout=fc_dropout,
        num_parts=num_parts if task == "segmentation" else 0,
        use_onehot_label=use_onehot_label,
        use_local_frames=use_local_frames,
    )


def build_params(cfg: NetworkConfig, dtype=np.float32) -> ParamStore:
    """Register every parameter of the network (values zero until init)."""
    store = ParamStore(dtype=dtype)
    for i, lc in enumerate(cfg.layers):
        register_rsconv_params(store, f"conv{i}", lc)
    if cfg.task == "classification":
        w = cfg.feature_channels
        for j, width in enumerate(cfg.fc_widths):
            store.add_param(f"fc{j}.weight", (w, width), kind="weight", fan_in=w)
            store.add_bn(f"fc{j}.bn", width)
            w = width
        # zero-initialized output layer: initial logits are exactly zero, so
        # the first loss equals ln(num_classes)
        store.add_param("head.weight", (w, cfg.num_classes), kind="out_weight", fan_in=w)
        store.add_param("head.bias", (cfg.num_classes,), kind="bias")
        return store
    # dense decoders
    nlev = len(cfg.layers)
    chans = [3] + [lc.out_channels for lc in cfg.layers]
    w = chans[-1] + (cfg.num_classes if cfg.use_onehot_label else 0)
    for s in range(nlev):
        fine = nlev - 1 - s
        skip = chans[fine]
        store.add_param(f"fp{s}.weight", (w + skip, cfg.fp_widths[s]), kind="weight", fan_in=w + skip)
        store.add_bn(f"fp{s}.bn", cfg.fp_widths[s])
        w = cfg.fp_widths[s]
    store.add_param("head0.weight", (w, cfg.head_hidden), kind="weight", fan_in=w)
    store.add_bn("head0.bn", cfg.head_hidden)
    out_ch = cfg.num_parts if cfg.task == "segmentation" else 3
    # segmentation gets the zero-initialized softmax head; the normal head
    # keeps a random one, since a zero vector cannot be l2-normalized
    kind = "out_weight" if cfg.task == "segmentation" else "weight"
    store.add_param("head1.weight", (cfg.head_hidden, out_ch), kind=kind, fan_in=cfg.head_hidden)
    store.add_param("head1.bias", (out_ch,), kind="bias")
    return store


# ---------------------------------------------------------------------------
# encoder


@dataclass
class LevelState:
    coords: np.ndarray  # (B, S, 3) float64
    normals: np.ndarray | None
    features: Tensor | None  # (B, S, C); None at the input level


def _stack_clouds(clouds: list[PointCloud], need_normals: bool):
    sizes = {c.size for c in clouds}
    if len(sizes) != 1:
        raise ValueError(f"batch clouds must share a point count, got sizes {sorted(sizes)}")
    coords = np.stack([c.coords for c in clouds])
    normals = None
    if all(c.normals is not None for c in clouds):
        normals = np.stack([c.normals for c in clouds])
    elif need_normals:
        raise ValueError("this configuration requires normals on every cloud")
    return coords, normals


def encode_batch(
    cfg: NetworkConfig,
    store: ParamStore,
    coords: np.ndarray,
    normals: np.ndarray | None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> list[LevelState]:
    """Run the RS-Conv hierarchy; returns every level, input level first.

    In training mode FPS starts at a random index and in-ball neighbors are
    sampled with ``rng``; otherwise the geometric start and distance-ranked
    selection make the whole pass order-independent.
    """
    needs_frames = cfg.use_local_frames
    if needs_frames and normals is None:
        raise ValueError("local frames require normals")
    b = coords.shape[0]
    levels = [LevelState(coords, normals, None)]
    table: Tensor | None = None
    cur_coords, cur_normals = coords, normals
    for li, lc in enumerate(cfg.layers):
        n_cur = cur_coords.shape[1]
        if n_cur < 1:
            raise ValueError("no points left to sample")
        s_l = min(cfg.layer_points[li], n_cur)
        if training and rng is not None:
            starts = rng.integers(n_cur, size=b)
        else:
            starts = geometric_start_index(cur_coords)
        fps_idx = farthest_point_sample_batch(cur_coords, s_l, starts)
        rows = np.arange(b)[:, None]
        new_coords = cur_coords[rows, fps_idx]
        new_normals = cur_normals[rows, fps_idx] if cur_normals is not None else None

        if lc.scales[0][0] == GROUP_ALL_RADIUS:
            radii, k = [GROUP_ALL_RADIUS], n_cur
        else:
            radii = [r for r, _ in lc.scales]
            k = lc.scales[0][1]
        raw = group_neighbors_batch(
            cur_coords,
            fps_idx,
            radii,
            k,
            lc.neighbor_mode,
            lc.centroid_mode,
            rng if training else None,
        )

        frames = None
        if needs_frames:
            anchor = cur_coords.mean(axis=1)[:, None, :]  # rotates with the cloud
            frames = local_frames_batch(new_normals, new_coords, anchor)

        offsets = (np.arange(b) * n_cur)[:, None, None]
        groups = []
        for radius, idx, counts, ref in raw:
            neigh = cur_coords[rows[..., None], idx]  # (B, S, K, 3)
            rel = neigh - ref[:, :, None, :]
            if frames is not None:
                rel = np.einsum("bsij,bskj->bski", frames, rel)
                h_ref, h_neigh = np.zeros_like(ref), rel
            else:
                h_ref, h_neigh = ref, neigh
            h_views = []
            for kind in lc.view_kinds:
                if kind is RelationKind.NORMAL_COS:
                    if cur_normals is None:
                        raise ValueError("normal_cos relation requires normals")
                    rn, nn = new_normals, cur_normals[rows[..., None], idx]
                    if frames is not None:
                        rn = np.einsum("bsij,bsj->bsi", frames, rn)
                        nn = np.einsum("bsij,bskj->bski", frames, nn)
                    h_views.append(relation_block(kind, h_ref, h_neigh, rn, nn))
                else:
                    h_views.append(relation_block(kind, h_ref, h_neigh))
            mask = None
            if training and lc.relation_cut_ratio > 0.0 and rng is not None:
                mask = make_cut_mask(idx.shape, lc.relation_cut_ratio, rng)
            if table is None:
                groups.append(ScaleGroup(h_views=h_views, const_features=rel, cut_mask=mask))
            else:
                groups.append(ScaleGroup(h_views=h_views, flat_indices=idx + offsets, cut_mask=mask))
        out = rs_conv_core(lc, store, f"conv{li}", groups, table, training)
        levels.append(LevelState(new_coords, new_normals, out))
        table = reshape(out, (b * s_l, lc.out_channels))
        cur_coords, cur_normals = new_coords, new_normals
    return levels


# ---------------------------------------------------------------------------
# heads


def classify_forward_batch(
    cfg: NetworkConfig,
    store: ParamStore,
    clouds: list[PointCloud],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits (B, num_classes) for a batch of equally-sized clouds."""
    coords, normals = _stack_clouds(clouds, cfg.use_local_frames)
    levels = encode_batch(cfg, store, coords, normals, training, rng)
    x = reduce_max(levels[-1].features, axis=1)  # global max pool -> (B, C)
    for j in range(len(cfg.fc_widths)):
        x = matmul(x, store[f"fc{j}.weight"].tensor)
        x = batchnorm(x, store.bn_states[f"fc{j}.bn"], training)
        x = relu(x)
        if training and rng is not None and cfg.fc_dropout > 0:
            x = dropout(x, cfg.fc_dropout, rng, training)
    return add(matmul(x, store["head.weight"].tensor), store["head.bias"].tensor)


def classify_forward(
    cfg: NetworkConfig,
    store: ParamStore,
    cloud: PointCloud,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits (num_classes,) for a single cloud."""
    out = classify_forward_batch(cfg, store, [cloud], training, rng)
    return reshape(out, (cfg.num_classes,))


def feature_propagation(
    fine_coords: np.ndarray,
    coarse_coords: np.ndarray,
    coarse_features: Tensor,
) -> Tensor:
    """Interpolate coarse features onto fine points.

    Each fine point takes its (up to) three nearest coarse points with
    weights proportional to 1 / (d^2 + 1e-8), normalized to sum to one.

    Args:
        fine_coords: (B, Nf, 3); coarse_coords: (B, Nc, 3).
        coarse_features: (B, Nc, C) Tensor.

    Returns:
        (B, Nf, C) Tensor.
    """
    b, nf, _ = fine_coords.shape
    nc = coarse_coords.shape[1]
    if coarse_features.data.shape[:2] != (b, nc):
        raise ValueError(
            f"coarse features {coarse_features.data.shape} do not match coarse coords {coarse_coords.shape}"
        )
    m = min(3, nc)
    d2 = ((fine_coords[:, :, None, :] - coarse_coords[:, None, :, :]) ** 2).sum(axis=3)
    order = np.argsort(d2, axis=2, kind="stable")[:, :, :m]  # (B, Nf, m)
    nd2 = np.take_along_axis(d2, order, axis=2)
    w = 1.0 / (nd2 + FP_EPS)
    w = w / w.sum(axis=2, keepdims=True)
    table = reshape(coarse_features, (b * nc, coarse_features.data.shape[2]))
    flat = order + (np.arange(b) * nc)[:, None, None]
    gathered = gather_rows(table, flat)  # (B, Nf, m, C)
    weighted = mul(gathered, w[:, :, :, None].astype(table.data.dtype))
    return reduce_sum(weighted, axis=2)


def _dense_forward(
    cfg: NetworkConfig,
    store: ParamStore,
    clouds: list[PointCloud],
    class_labels: np.ndarray | None,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    coords, normals = _stack_clouds(clouds, cfg.use_local_frames)
    b, n0, _ = coords.shape
    levels = encode_batch(cfg, store, coords, normals, training, rng)
    nlev = len(cfg.layers)
    feats = levels[-1].features  # (B, 1, C)
    if cfg.use_onehot_label:
        if class_labels is None:
            raise ValueError("this configuration requires the shape class label")
        onehot = np.zeros((b, 1, cfg.num_classes), dtype=store.dtype)
        onehot[np.arange(b), 0, np.asarray(class_labels, dtype=np.int64)] = 1.0
        feats = concat([feats, Tensor(onehot)], axis=2)
    for s in range(nlev):
        fine = nlev - 1 - s
        interp = feature_propagation(levels[fine].coords, levels[fine + 1].coords, feats)
        skip = levels[fine].features
        if skip is None:
            skip = Tensor(levels[fine].coords.astype(store.dtype))
        x = concat([interp, skip], axis=2)
        sh = x.data.shape
        x = reshape(x, (sh[0] * sh[1], sh[2]))
        x = matmul(x, store[f"fp{s}.weight"].tensor)
        x = batchnorm(x, store.bn_states[f"fp{s}.bn"], training)
        x = relu(x)
        feats = reshape(x, (sh[0], sh[1], cfg.fp_widths[s]))
    x = reshape(feats, (b * n0, cfg.fp_widths[-1]))
    x = matmul(x, store["head0.weight"].tensor)
    x = batchnorm(x, store.bn_states["head0.bn"], training)
    x = relu(x)
    if training and rng is not None and cfg.fc_dropout > 0:
        x = dropout(x, cfg.fc_dropout, rng, training)
    return add(matmul(x, store["head1.weight"].tensor), store["head1.bias"].tensor)


def segment_forward_batch(
    cfg: NetworkConfig,
    store: ParamStore,
    clouds: list[PointCloud],
    class_labels: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-point part logits (B, N, num_parts)."""
    if cfg.task != "segmentation":
        raise ValueError("config is not a segmentation network")
    out = _dense_forward(cfg, store, clouds, class_labels, training, rng)
    b, n = len(clouds), clouds[0].size
    return reshape(out, (b, n, cfg.num_parts))


def segment_forward(cfg, store, cloud, class_label=None, training=False, rng=None) -> Tensor:
    labels = None if class_label is None else np.array([class_label])
    out = segment_forward_batch(cfg, store, [cloud], labels, training, rng)
    return reshape(out, (cloud.size, cfg.num_parts))


def normals_forward_batch(
    cfg: NetworkConfig,
    store: ParamStore,
    clouds: list[PointCloud],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Unit normal predictions (B, N, 3)."""
    if cfg.task != "normal_estimation":
        raise ValueError("config is not a normal-estimation network")
    out = _dense_forward(cfg, store, clouds, None, training, rng)
    out = l2_normalize_rows(out)
    b, n = len(clouds), clouds[0].size
    return reshape(out, (b, n, 3))


def normals_forward(cfg, store, cloud, training=False, rng=None) -> Tensor:
    out = normals_forward_batch(cfg, store, [cloud], training, rng)
    return reshape(out, (cloud.size, 3))
