import os

import numpy as np
import pytest

from rscnn.autodiff import ParamStore, backward, mul, reduce_sum, softmax
from rscnn.data import ShapeSpec, generate
from rscnn.geometry import PointCloud, normalize_global
from rscnn.io import FormatError, load_checkpoint
from rscnn.networks import classify_forward_batch
from rscnn.training import (
    RunConfig,
    TrainError,
    adam_step,
    apply_schedules,
    config_from_kv,
    density_harness,
    evaluate_model,
    fit,
    he_init,
    invariance_harness,
    make_adam,
    schedule_bn_momentum,
    schedule_lr,
    vote_predict,
)

# ---------------------------------------------------------------------------
# config


def test_config_defaults_and_parsing():
    run = config_from_kv({})
    assert run.task == "classification"
    assert run.num_classes == 4
    run = config_from_kv(
        {
            "task": "segmentation",
            "families": "cylinder",
            "channels": "8,12,16,20",
            "relation": "dist",
            "local_frames": "true",
            "lr": "0.01",
            "epochs": "5",
        }
    )
    assert run.num_parts == 2
    assert run.channels == (8, 12, 16, 20)
    assert run.local_frames is True
    assert run.lr == 0.01


def test_config_unknown_key_rejected():
    with pytest.raises(FormatError, match="unknown config key 'lern_rate'"):
        config_from_kv({"lern_rate": "0.1"})


def test_config_bad_values_rejected():
    with pytest.raises(FormatError, match="epochs"):
        config_from_kv({"epochs": "ten"})
    with pytest.raises(FormatError, match="mapping_depth"):
        config_from_kv({"mapping_depth": "5"})
    with pytest.raises(FormatError, match="relation"):
        config_from_kv({"relation": "cosine"})


def test_config_fingerprint_stability():
    a = config_from_kv({"lr": "0.001"})
    b = config_from_kv({})
    assert a.fingerprint() == b.fingerprint()
    c = config_from_kv({"lr": "0.002"})
    assert a.fingerprint() != c.fingerprint()


# ---------------------------------------------------------------------------
# schedules


def test_schedule_law_exact_values():
    assert schedule_lr(0.001, 0.7, 20, 0) == 0.001
    assert schedule_lr(0.001, 0.7, 20, 19) == 0.001
    assert schedule_lr(0.001, 0.7, 20, 20) == 0.0007
    assert schedule_lr(0.001, 0.7, 20, 40) == 0.001 * 0.7**2
    assert schedule_bn_momentum(0.9, 0.5, 20, 0) == 0.9
    assert schedule_bn_momentum(0.9, 0.5, 20, 20) == 0.45
    assert schedule_bn_momentum(0.9, 0.5, 20, 19) == 0.9


def test_schedule_momentum_floor():
    assert schedule_bn_momentum(0.9, 0.5, 20, 400) == 0.01
    assert schedule_bn_momentum(0.9, 0.5, 20, 400, floor=1e-9) == pytest.approx(0.9 * 0.5**20)


def test_apply_schedules_updates_opt_and_bn():
    run = config_from_kv({"epochs": "5"})
    store = ParamStore(dtype=np.float64)
    store.add_param("w", (2, 2), kind="weight", fan_in=2)
    store.add_bn("b", 2)
    opt = make_adam(store)
    lr, mom = apply_schedules(run, 20, opt, store)
    assert opt.lr == 0.0007 and lr == 0.0007
    assert store.bn_states["b"].momentum == 0.45 and mom == 0.45


# ---------------------------------------------------------------------------
# init and Adam


def test_he_init_statistics_and_constants():
    store = ParamStore(dtype=np.float64)
    store.add_param("w", (2, 50000), kind="weight", fan_in=2)
    store.add_param("b", (7,), kind="bias")
    store.add_bn("bn", 5)
    he_init(store, np.random.default_rng(0))
    # fan_in 2 -> std sqrt(2/2) = 1, within 10% over 1e5 draws
    assert abs(store["w"].tensor.data.std() - 1.0) < 0.1
    assert (store["b"].tensor.data == 0).all()
    assert (store["bn.scale"].tensor.data == 1).all()
    assert (store["bn.shift"].tensor.data == 0).all()
    assert (store.bn_states["bn"].running_var == 1).all()


def test_he_init_deterministic():
    a = ParamStore(dtype=np.float32)
    b = ParamStore(dtype=np.float32)
    for s in (a, b):
        s.add_param("w", (16, 16), kind="weight", fan_in=16)
    he_init(a, np.random.default_rng(7))
    he_init(b, np.random.default_rng(7))
    assert np.array_equal(a["w"].tensor.data, b["w"].tensor.data)


def bowl_store():
    store = ParamStore(dtype=np.float64)
    store.add_param("w", (4,), kind="weight", fan_in=4)
    store["w"].tensor.data[...] = [1.0, -2.0, 0.5, 3.0]
    store["w"].tensor.requires_grad = True
    return store


def test_adam_zero_gradient_leaves_params():
    store = bowl_store()
    before = store["w"].tensor.data.copy()
    store["w"].tensor.grad = np.zeros(4)
    opt = make_adam(store, lr=0.1)
    adam_step(opt, store)
    assert np.array_equal(store["w"].tensor.data, before)
    assert opt.t == 1


def test_adam_single_step_magnitude():
    store = bowl_store()
    store["w"].tensor.grad = np.full(4, 3.7)
    opt = make_adam(store, lr=0.05)
    before = store["w"].tensor.data.copy()
    adam_step(opt, store)
    step = before - store["w"].tensor.data
    # first bias-corrected step has magnitude ~ lr regardless of gradient size
    assert np.allclose(np.abs(step), 0.05, atol=1e-6)
    assert store["w"].tensor.grad is None  # zeroed after the step


def test_adam_missing_gradient_errors():
    store = bowl_store()
    opt = make_adam(store)
    with pytest.raises(TrainError, match="'w'"):
        adam_step(opt, store)


def test_adam_quadratic_bowl_descends():
    store = bowl_store()
    opt = make_adam(store, lr=0.001)
    w = store["w"].tensor
    losses = []
    for _ in range(100):
        loss = reduce_sum(mul(w, w))
        losses.append(loss.item())
        backward(loss)
        adam_step(opt, store)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# fit


def tiny_run(**over):
    base = {
        "families": "sphere,cube",
        "points": "32",
        "channels": "6,8,12",
        "base_radii": "0.5,0.8",
        "scales": "2",
        "neighbors": "4",
        "fc_widths": "8",
        "epochs": "3",
        "batch_size": "4",
        "translate": "0.1",
    }
    base.update(over)
    return config_from_kv(base)


def tiny_data(run, per_class=4, seed=0):
    clouds = []
    for label, fam in enumerate(run.families):
        for j in range(per_class):
            c = generate(ShapeSpec(fam, run.points, seed * 1000 + label * 100 + j))
            clouds.append(
                PointCloud(c.coords, normals=c.normals, point_labels=c.point_labels, shape_label=label)
            )
    return clouds


def test_fit_writes_artifacts_and_learns(tmp_path):
    # randomized neighborhood sampling makes each step noisy, so the run
    # needs a calm configuration and enough steps to converge
    run = tiny_run(
        channels="8,16,24", fc_widths="16",
        epochs="80", batch_size="8", lr="0.01", fc_dropout="0.0",
        scale_low="0.95", scale_high="1.05", translate="0.0",
    )
    train = tiny_data(run, per_class=8)
    test = tiny_data(run, per_class=2, seed=9)
    out = str(tmp_path / "run")
    res = fit(run, train, test, seed=0, out_dir=out)
    assert len(res.history) == 160
    first = res.rows("train")[0]["loss"]
    last = res.rows("train")[-1]
    assert last["loss"] < first
    assert last["loss"] < 0.5
    assert res.rows("test")[-1]["accuracy"] >= 0.75
    lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert lines[0] == "epoch,split,loss,accuracy"
    assert len(lines) == 161
    ck = load_checkpoint(os.path.join(out, "model.ckpt"))
    assert "__meta__.epoch" in ck and ck["__meta__.epoch"] == 79.0
    assert os.path.exists(os.path.join(out, "report.json"))


def test_fit_resume_bit_identical(tmp_path):
    run5 = tiny_run(epochs="5")
    train = tiny_data(run5, per_class=4)
    test = tiny_data(run5, per_class=2, seed=9)
    full = fit(run5, train, test, seed=3)

    run3 = tiny_run(epochs="3")
    out = str(tmp_path / "part")
    fit(run3, train, test, seed=3, out_dir=out)
    resumed = fit(run5, train, test, seed=3, resume=os.path.join(out, "model.ckpt"))
    tail = [r for r in full.history if r["epoch"] >= 3]
    assert len(resumed.history) == len(tail)
    for a, b in zip(resumed.history, tail):
        assert a == b


def test_fit_resume_rejects_finished(tmp_path):
    run = tiny_run(epochs="2")
    train = tiny_data(run, per_class=4)
    out = str(tmp_path / "done")
    fit(run, train, [], seed=0, out_dir=out)
    with pytest.raises(TrainError, match="resume"):
        fit(run, train, [], seed=0, resume=os.path.join(out, "model.ckpt"))


def test_initial_loss_is_uniform_prediction():
    # the output head starts at zero, so the first loss is ln(num_classes)
    from rscnn.networks import build_params
    from rscnn.training import _INIT, _forward_loss

    run = tiny_run()
    train = tiny_data(run, per_class=4)
    cfg = run.network_config()
    store = build_params(cfg, dtype=np.float32)
    he_init(store, np.random.default_rng([0, _INIT]))
    batch = [normalize_global(c) for c in train[:4]]
    loss, _, _ = _forward_loss(run, cfg, store, batch, True, None)
    assert abs(loss.item() - np.log(2)) < 1e-5


def test_fit_aborts_on_nonfinite_loss():
    # corrupt coordinates surface as a non-finite loss, which must abort
    # with a diagnostic naming the batch and seed
    run = tiny_run()
    train = tiny_data(run, per_class=4)
    bad = [PointCloud(c.coords * np.nan, shape_label=c.shape_label) for c in train]
    with pytest.raises(TrainError, match=r"batch 0 \(seed 5\)"):
        fit(run, bad, [], seed=5)


def test_fit_determinism_same_seed():
    run = tiny_run(epochs="2")
    train = tiny_data(run, per_class=4)
    a = fit(run, train, [], seed=1)
    b = fit(run, train, [], seed=1)
    assert a.history == b.history
    c = fit(run, train, [], seed=2)
    assert c.history != a.history


def test_segmentation_fit_smoke():
    run = config_from_kv(
        {
            "task": "segmentation",
            "families": "cylinder",
            "points": "32",
            "channels": "4,6,6,8",
            "base_radii": "0.5,0.7,0.9",
            "scales": "2",
            "neighbors": "3",
            "fp_widths": "6,6,4,4",
            "head_hidden": "4",
            "epochs": "2",
            "batch_size": "4",
        }
    )
    train = tiny_data(run, per_class=4)
    res = fit(run, train, train[:2], seed=0)
    assert res.rows("train")[-1]["accuracy"] > 0.3
    assert np.isfinite(res.rows("test")[-1]["loss"])


def test_normals_fit_smoke():
    run = config_from_kv(
        {
            "task": "normal_estimation",
            "families": "sphere",
            "points": "32",
            "channels": "4,6,6,8",
            "base_radii": "0.5,0.7,0.9",
            "scales": "2",
            "neighbors": "3",
            "fp_widths": "6,6,4,4",
            "head_hidden": "4",
            "epochs": "3",
            "batch_size": "4",
            "translate": "0.0",
        }
    )
    train = tiny_data(run, per_class=6)
    res = fit(run, train, [], seed=0)
    # accuracy column is mean cosine similarity; must improve from start
    accs = [r["accuracy"] for r in res.rows("train")]
    assert accs[-1] > accs[0]


# ---------------------------------------------------------------------------
# evaluation extras


def trained_tiny(tmp_path_seed=0):
    run = tiny_run(epochs="4")
    train = tiny_data(run, per_class=6)
    test = tiny_data(run, per_class=3, seed=9)
    res = fit(run, train, test, seed=tmp_path_seed)
    return run, res, test


def test_vote_predict_degenerate_equals_forward():
    run, res, test = trained_tiny()
    cloud = normalize_global(test[0])
    probs = vote_predict(res.config, res.store, cloud, 1, np.random.default_rng(0), 1.0, 1.0)
    logits = classify_forward_batch(res.config, res.store, [cloud])
    # renormalizing an already-normalized cloud shifts coords by ~1e-16,
    # which can flip individual float32 roundings downstream
    assert np.allclose(probs, softmax(logits.data[0]), atol=1e-6)
    assert probs.min() >= 0
    assert abs(probs.sum() - 1.0) < 1e-9


def test_invariance_harness_permutation_matches_clean():
    run, res, test = trained_tiny()
    table = invariance_harness(res.config, res.store, test, seed=0)
    assert set(table) == {"clean", "permute", "translate", "rotate90", "rotate180"}
    assert table["permute"] == table["clean"]


def test_invariance_harness_needs_normals_for_robust_mode():
    run = tiny_run(relation="dist", local_frames="1", epochs="1")
    train = tiny_data(run, per_class=3)
    res = fit(run, train, [], seed=0)
    stripped = [PointCloud(c.coords, shape_label=c.shape_label) for c in train]
    with pytest.raises(ValueError, match="normals"):
        invariance_harness(res.config, res.store, stripped, seed=0)


def test_density_harness_full_count_matches_eval():
    run, res, test = trained_tiny()
    rows = density_harness(res.config, res.store, test, counts=(32, 16), seed=0)
    assert [c for c, _ in rows] == [32, 16]
    _, acc = evaluate_model(run, res.config, res.store, [normalize_global(c) for c in test])
    assert rows[0][1] == acc
    with pytest.raises(ValueError, match="exceeds"):
        density_harness(res.config, res.store, test, counts=(64,), seed=0)
