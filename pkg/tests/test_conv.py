import numpy as np
import pytest

from rscnn.autodiff import ParamStore, Tensor, backward, reduce_sum
from rscnn.conv import (
    RSConvLayerConfig,
    ScaleGroup,
    default_relation_widths,
    grid_conv_oracle,
    make_cut_mask,
    register_rsconv_params,
    relation_weights,
    rs_conv_core,
    rs_conv_forward,
)
from rscnn.geometry import PointCloud, RelationKind, build_neighborhoods, relation_block
from rscnn.verify import gradient_errors

from oracles import dense_conv2d


def fill_params(store, rng, std=0.5):
    for p in store:
        if p.kind == "weight":
            p.tensor.data[...] = rng.normal(scale=std, size=p.tensor.data.shape)
        elif p.kind == "bn_scale":
            p.tensor.data[...] = 1.0
    for st in store.bn_states.values():
        st.running_mean[...] = 0.0
        st.running_var[...] = 1.0


def make_layer(rng, in_ch=3, out_ch=8, scales=((0.8, 4), (1.2, 4)), kind=RelationKind.FULL, **kw):
    cfg = RSConvLayerConfig(in_channels=in_ch, out_channels=out_ch, scales=scales, relation_kind=kind, **kw)
    store = ParamStore(dtype=np.float64)
    register_rsconv_params(store, "l", cfg)
    fill_params(store, rng)
    return cfg, store


def cloud_and_nbhd(rng, cfg, n=24, s=6, normals=False):
    coords = rng.normal(size=(n, 3))
    nrm = None
    if normals:
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cloud = PointCloud(coords, normals=nrm)
    cents = np.arange(s)
    radii = [r for r, _ in cfg.scales]
    nbhd = build_neighborhoods(cloud, cents, radii, cfg.scales[0][1])
    return cloud, nbhd


def test_default_relation_widths_rule():
    assert default_relation_widths(128) == (16, 64, 128)
    assert default_relation_widths(3) == (3, 3, 3)
    assert default_relation_widths(64, depth=2) == (16, 64)
    assert default_relation_widths(32, depth=4) == (32, 32, 32, 32)
    with pytest.raises(ValueError):
        default_relation_widths(16, depth=5)


def test_layer_config_validation():
    with pytest.raises(ValueError):
        RSConvLayerConfig(in_channels=4, out_channels=8, relation_mlp_widths=(16, 8))
    with pytest.raises(ValueError):
        RSConvLayerConfig(in_channels=4, out_channels=8, scales=((0.5, 4), (0.5, 4)))
    with pytest.raises(ValueError):
        RSConvLayerConfig(in_channels=4, out_channels=8, aggregation="median")
    with pytest.raises(ValueError):
        RSConvLayerConfig(in_channels=4, out_channels=8, relation_cut_ratio=1.0)


def test_relation_weights_shape_and_zero_weights():
    rng = np.random.default_rng(0)
    cfg, store = make_layer(rng, in_ch=5)
    h = rng.normal(size=(2, 6, 4, 10))
    w = relation_weights(store, "l", cfg, h, training=False)
    assert w.data.shape == (2, 6, 4, 5)
    # zeroed MLP weights kill the response no matter the relation input
    for p in store:
        if p.kind == "weight":
            p.tensor.data[...] = 0.0
    w0 = relation_weights(store, "l", cfg, h, training=False)
    assert np.array_equal(w0.data, np.zeros_like(w0.data))


def test_relation_weights_channel_mismatch():
    rng = np.random.default_rng(1)
    cfg, store = make_layer(rng)
    with pytest.raises(ValueError):
        relation_weights(store, "l", cfg, rng.normal(size=(4, 7)), training=False)


def test_degenerate_self_neighborhood():
    # isolated centroid: h = 10 zeros, f = its own features
    rng = np.random.default_rng(2)
    cfg, store = make_layer(rng, in_ch=3, scales=((0.1, 3),))
    coords = np.array([[0.0, 0, 0], [5.0, 0, 0], [0, 5.0, 0], [0, 0, 5.0]])
    cloud = PointCloud(coords)
    nbhd = build_neighborhoods(cloud, [0], [0.1], 3)
    h = relation_block(RelationKind.FULL, nbhd.scales[0].ref_coords, coords[nbhd.scales[0].indices])
    assert np.array_equal(h, np.zeros_like(h))
    out = rs_conv_forward(cfg, store, "l", rng.normal(size=(4, 3)), cloud, nbhd)
    assert out.data.shape == (1, 8)


def test_rs_conv_permutation_invariance_exact():
    rng = np.random.default_rng(3)
    cfg, store = make_layer(rng, in_ch=3, scales=((0.9, 5), (1.4, 5)))
    cloud = PointCloud(rng.normal(size=(30, 3)))
    feats = rng.normal(size=(30, 3))
    cents = np.array([2, 11, 17])
    radii = [r for r, _ in cfg.scales]

    nbhd = build_neighborhoods(cloud, cents, radii, 5)
    out = rs_conv_forward(cfg, store, "l", feats, cloud, nbhd).data

    for trial in range(5):
        perm = np.random.default_rng(100 + trial).permutation(30)
        inv = np.argsort(perm)
        pcloud = PointCloud(cloud.coords[perm])
        pnbhd = build_neighborhoods(pcloud, inv[cents], radii, 5)
        pout = rs_conv_forward(cfg, store, "l", feats[perm], pcloud, pnbhd).data
        assert np.array_equal(pout, out)


def test_rs_conv_dist_relation_rigid_motion_stable():
    # distance-only relations with relation-invariant features: outputs move
    # only by floating-point noise under a rigid transform
    rng = np.random.default_rng(4)
    cfg, store = make_layer(rng, in_ch=2, kind=RelationKind.DIST, scales=((1.0, 4),))
    cloud, nbhd = cloud_and_nbhd(rng, cfg, n=20, s=5)
    feats = rng.normal(size=(20, 2))
    out = rs_conv_forward(cfg, store, "l", feats, cloud, nbhd).data

    theta = 0.7
    q = np.array(
        [[np.cos(theta), 0, np.sin(theta)], [0, 1, 0], [-np.sin(theta), 0, np.cos(theta)]]
    )
    moved = PointCloud(cloud.coords @ q.T + np.array([0.2, -0.1, 0.05]))
    mnbhd = build_neighborhoods(moved, nbhd.centroid_indices, [1.0], 4)
    assert np.array_equal(mnbhd.scales[0].indices, nbhd.scales[0].indices)
    mout = rs_conv_forward(cfg, store, "l", feats, moved, mnbhd).data
    assert np.abs(mout - out).max() < 1e-9


def test_weight_sharing_accumulates_per_application():
    # toy case: grads of the shared MLP from the fused forward equal the sum
    # of grads from each (centroid, neighbor) application done one at a time
    rng = np.random.default_rng(5)
    cfg, store = make_layer(rng, in_ch=3, out_ch=4, scales=((2.5, 2),), aggregation="sum")
    coords = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 0]])
    cloud = PointCloud(coords)
    feats = rng.normal(size=(4, 3))
    nbhd = build_neighborhoods(cloud, [0, 3], [2.5], 2)

    groups = [
        ScaleGroup(
            h_views=[relation_block(RelationKind.FULL, nbhd.scales[0].ref_coords[None], coords[nbhd.scales[0].indices][None])],
            flat_indices=nbhd.scales[0].indices[None],
        )
    ]
    out = rs_conv_core(cfg, store, "l", groups, Tensor(feats), training=False,
                       apply_activation=False, apply_raise=False)
    backward(reduce_sum(out))
    fused_grads = {p.name: p.grad.copy() for p in store if p.grad is not None}
    store.zero_grads()

    sc = nbhd.scales[0]
    for i in range(2):
        for k in range(2):
            h = relation_block(RelationKind.FULL, sc.ref_coords[i], coords[sc.indices[i, k]][None, None])
            w = relation_weights(store, "l", cfg, h[0], training=False)
            contrib = reduce_sum(w * Tensor(feats[sc.indices[i, k]][None]))
            backward(contrib)
    for name, g in fused_grads.items():
        assert np.allclose(store[name].grad, g, atol=1e-10), name


def test_gradient_flows_through_relation():
    # moving a centroid changes the relation input, so the loss gradient of
    # the relation-MLP weights must change too
    rng = np.random.default_rng(6)
    cfg, store = make_layer(rng, in_ch=3, scales=((1.5, 4),))
    cloud, nbhd = cloud_and_nbhd(rng, cfg, n=16, s=4)
    feats = rng.normal(size=(16, 3))

    def grads_at(coords):
        pc = PointCloud(coords)
        nb = build_neighborhoods(pc, nbhd.centroid_indices, [1.5], 4)
        store.zero_grads()
        backward(reduce_sum(rs_conv_forward(cfg, store, "l", feats, pc, nb)))
        return store["l.rel0.weight"].grad.copy()

    g1 = grads_at(cloud.coords)
    moved = cloud.coords.copy()
    moved[0] += 0.05
    g2 = grads_at(moved)
    assert np.abs(g1).max() > 0
    assert np.abs(g1 - g2).max() > 1e-8


def test_scale_fusion_max_vs_sum_differ():
    rng = np.random.default_rng(7)
    cfg_max, store = make_layer(rng, scales=((0.9, 4), (1.3, 4)), scale_fusion="max")
    cloud, nbhd = cloud_and_nbhd(rng, cfg_max, n=24, s=6)
    feats = rng.normal(size=(24, 3))
    out_max = rs_conv_forward(cfg_max, store, "l", feats, cloud, nbhd).data
    cfg_sum = RSConvLayerConfig(
        in_channels=3, out_channels=8, scales=((0.9, 4), (1.3, 4)), scale_fusion="sum"
    )
    out_sum = rs_conv_forward(cfg_sum, store, "l", feats, cloud, nbhd).data
    assert not np.allclose(out_max, out_sum)


def test_planar_fusion_sums_three_views():
    rng = np.random.default_rng(8)
    cfg, store = make_layer(rng, in_ch=3, kind=RelationKind.PLANAR_FUSION, scales=((1.2, 4),))
    cloud, nbhd = cloud_and_nbhd(rng, cfg, n=20, s=5)
    feats = rng.normal(size=(20, 3))
    sc = nbhd.scales[0]

    def core_out(kind):
        cfg_v = RSConvLayerConfig(in_channels=3, out_channels=8, scales=((1.2, 4),), relation_kind=kind)
        g = ScaleGroup(
            h_views=[relation_block(kind, sc.ref_coords[None], cloud.coords[sc.indices][None])],
            flat_indices=sc.indices[None],
        )
        return rs_conv_core(cfg_v, store, "l", [g], Tensor(feats), training=False, apply_raise=False).data

    manual = sum(core_out(k) for k in (RelationKind.PLANAR_XY, RelationKind.PLANAR_XZ, RelationKind.PLANAR_YZ))
    g = ScaleGroup(
        h_views=[
            relation_block(k, sc.ref_coords[None], cloud.coords[sc.indices][None])
            for k in (RelationKind.PLANAR_XY, RelationKind.PLANAR_XZ, RelationKind.PLANAR_YZ)
        ],
        flat_indices=sc.indices[None],
    )
    fused = rs_conv_core(cfg, store, "l", [g], Tensor(feats), training=False, apply_raise=False).data
    assert np.allclose(fused, manual, atol=1e-12)


def test_relation_cut_mask_zeroes_rows():
    rng = np.random.default_rng(9)
    mask = make_cut_mask((1, 10, 6), 0.5, rng)
    assert set(np.unique(mask)).issubset({0.0, 1.0})
    assert make_cut_mask((1, 4, 4), 0.0, rng) is None

    cfg, store = make_layer(rng, in_ch=3, scales=((1.2, 4),))
    cloud, nbhd = cloud_and_nbhd(rng, cfg, n=20, s=5)
    feats = rng.normal(size=(20, 3))
    full = rs_conv_forward(cfg, store, "l", feats, cloud, nbhd, training=False).data
    cut_cfg = RSConvLayerConfig(in_channels=3, out_channels=8, scales=((1.2, 4),), relation_cut_ratio=0.9)
    cut = rs_conv_forward(cut_cfg, store, "l", feats, cloud, nbhd, training=True,
                          cut_rng=np.random.default_rng(1)).data
    assert not np.allclose(full, cut)


def test_rs_conv_input_validation():
    rng = np.random.default_rng(10)
    cfg, store = make_layer(rng, in_ch=3, scales=((1.0, 4),))
    cloud, nbhd = cloud_and_nbhd(rng, cfg, n=16, s=4)
    with pytest.raises(ValueError):
        rs_conv_forward(cfg, store, "l", rng.normal(size=(16, 5)), cloud, nbhd)
    with pytest.raises(ValueError):
        rs_conv_forward(cfg, store, "l", rng.normal(size=(12, 3)), cloud, nbhd)
    cfg2, store2 = make_layer(rng, in_ch=3, scales=((1.0, 4), (1.5, 4)))
    with pytest.raises(ValueError):
        rs_conv_forward(cfg2, store2, "l", rng.normal(size=(16, 3)), cloud, nbhd)
    cfgn, storen = make_layer(rng, in_ch=3, kind=RelationKind.NORMAL_COS, scales=((1.0, 4),))
    with pytest.raises(ValueError):
        rs_conv_forward(cfgn, storen, "l", rng.normal(size=(16, 3)), cloud, nbhd)


def test_rs_conv_finite_difference():
    rng = np.random.default_rng(11)
    cfg, store = make_layer(rng, in_ch=4, out_ch=6, scales=((1.0, 4), (1.6, 4)))
    cloud, nbhd = cloud_and_nbhd(rng, cfg, n=18, s=5)
    feats = rng.normal(size=(18, 4))

    def build():
        for st in store.bn_states.values():
            st.running_mean[...] = 0.0
            st.running_var[...] = 1.0
        return reduce_sum(rs_conv_forward(cfg, store, "l", feats, cloud, nbhd, training=True))

    loss = build()
    backward(loss)
    leaves = [p.tensor for p in store]
    errs = gradient_errors(build, leaves, h=1e-6, max_entries=6, rng=np.random.default_rng(0))
    assert max(errs) < 1e-4, max(errs)


def test_grid_conv_all_ones():
    res = grid_conv_oracle(np.ones((3, 3, 1)), np.ones((4, 4, 1)))
    assert res.rs_map.shape == (2, 2)
    assert np.allclose(res.rs_map, 9.0, atol=1e-12)
    assert res.max_abs_diff < 1e-12


def test_grid_conv_random_instances():
    rng = np.random.default_rng(12)
    for _ in range(20):
        c = int(rng.integers(1, 5))
        kernel = rng.normal(size=(3, 3, c))
        fmap = rng.normal(size=(5, 5, c))
        res = grid_conv_oracle(kernel, fmap)
        assert res.max_abs_diff < 1e-9
        assert np.allclose(res.dense_map, dense_conv2d(fmap, kernel), atol=1e-12)


def test_grid_conv_input_validation():
    with pytest.raises(ValueError):
        grid_conv_oracle(np.ones((2, 3, 1)), np.ones((4, 4, 1)))
    with pytest.raises(ValueError):
        grid_conv_oracle(np.ones((3, 3, 2)), np.ones((4, 4, 1)))
    with pytest.raises(ValueError):
        grid_conv_oracle(np.ones((3, 3, 1)), np.ones((2, 4, 1)))
