"""Training harness: config schema, optimizer, schedules, loops, harnesses.

Reproducibility contract: every random choice is drawn from a stream derived
as default_rng([seed, epoch, purpose]), so a (seed, config, dataset) triple
fully determines all emitted numbers on a single thread, and resuming from
a checkpoint at epoch k replays exactly the run that never stopped.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import ParamStore, backward, cosine_loss, reshape, softmax, softmax_cross_entropy
from .data import PART_COUNTS, AugmentationConfig, augment, density_dropout, resample_dropout
from .geometry import PointCloud, RelationKind, normalize_global
from .io import FormatError, atomic_write_text, load_checkpoint, restore_store, save_checkpoint, store_entries
from .networks import (
    NetworkConfig,
    build_params,
    classify_forward_batch,
    make_classifier_config,
    make_segmenter_config,
    normals_forward_batch,
    segment_forward_batch,
)

RELATION_NAMES = {
    "dist": RelationKind.DIST,
    "dist_diff": RelationKind.DIST_DIFF,
    "full": RelationKind.FULL,
    "normal_cos": RelationKind.NORMAL_COS,
    "planar_xy": RelationKind.PLANAR_XY,
    "planar_xz": RelationKind.PLANAR_XZ,
    "planar_yz": RelationKind.PLANAR_YZ,
    "planar_fusion": RelationKind.PLANAR_FUSION,
}

# purpose codes for derived rng streams
_SHUFFLE, _AUGMENT, _NET, _INIT, _HARNESS = 0, 1, 2, 3, 4


class TrainError(RuntimeError):
    """Raised when a training run cannot proceed (e.g. non-finite loss)."""


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str):
    return tuple(int(v) for v in s.split(","))


def _floats(s: str):
    return tuple(float(v) for v in s.split(","))


def _strs(s: str):
    return tuple(v.strip() for v in s.split(",") if v.strip())


@dataclass
class RunConfig:
    """Resolved contents of a training config file."""

    task: str = "classification"
    families: tuple = ("sphere", "cube", "cylinder", "torus")
    train_per_class: int = 200
    test_per_class: int = 50
    points: int = 256
    data_dir: str = ""
    relation: str = "full"
    aggregation: str = "max"
    scale_fusion: str = "max"
    scales: int = 3
    neighbors: int = 10
    mapping_depth: int = 3
    neighbor_mode: str = "random_in_ball"
    centroid_mode: str = "sampled_point"
    relation_cut: float = 0.0
    local_frames: bool = False
    channels: tuple = ()
    base_radii: tuple = ()
    scale_step: float = 1.5
    fc_widths: tuple = (256, 128)
    fc_dropout: float = 0.5
    fp_widths: tuple = (128, 128, 64, 64)
    head_hidden: int = 64
    onehot_label: bool = False
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.001
    lr_decay: float = 0.7
    lr_every: int = 20
    bn_momentum: float = 0.9
    bn_decay: float = 0.5
    bn_every: int = 20
    bn_floor: float = 0.01
    scale_low: float = 0.66
    scale_high: float = 1.5
    translate: float = 0.2
    input_dropout: float = 0.0

    def __post_init__(self):
        if self.relation not in RELATION_NAMES:
            raise ValueError(f"unknown relation {self.relation!r}")
        if self.mapping_depth not in (2, 3, 4):
            raise ValueError(f"mapping_depth must be 2, 3 or 4, got {self.mapping_depth}")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if not 0 < self.lr_decay <= 1 or not 0 < self.bn_decay <= 1:
            raise ValueError("decay factors must lie in (0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.families)

    @property
    def num_parts(self) -> int:
        return max(PART_COUNTS[f] for f in self.families)

    def network_config(self) -> NetworkConfig:
        kw = dict(
            relation_kind=RELATION_NAMES[self.relation],
            aggregation=self.aggregation,
            scale_fusion=self.scale_fusion,
            mapping_depth=self.mapping_depth,
            neighbor_mode=self.neighbor_mode,
            centroid_mode=self.centroid_mode,
            relation_cut_ratio=self.relation_cut,
        )
        if self.task == "classification":
            return make_classifier_config(
                points=self.points,
                num_classes=self.num_classes,
                channels=self.channels or (64, 128, 256),
                base_radii=self.base_radii or (0.23, 0.42),
                scale_step=self.scale_step,
                scales=self.scales,
                neighbors=self.neighbors,
                fc_widths=self.fc_widths,
                fc_dropout=self.fc_dropout,
                use_local_frames=self.local_frames,
                **kw,
            )
        return make_segmenter_config(
            points=self.points,
            num_parts=self.num_parts,
            num_classes=self.num_classes,
            channels=self.channels or (32, 64, 128, 256),
            base_radii=self.base_radii or (0.23, 0.32, 0.45),
            scale_step=self.scale_step,
            scales=self.scales,
            neighbors=self.neighbors,
            fp_widths=self.fp_widths,
            head_hidden=self.head_hidden,
            fc_dropout=self.fc_dropout,
            use_onehot_label=self.onehot_label,
            use_local_frames=self.local_frames,
            task=self.task,
            **kw,
        )

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(
            scale_low=self.scale_low,
            scale_high=self.scale_high,
            translation=self.translate,
            input_dropout=self.input_dropout,
        )

    def canonical_text(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parts.append(f"{f.name} = {v}")
        return "\n".join(parts) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


_PARSERS = {
    "families": _strs,
    "channels": _ints,
    "base_radii": _floats,
    "fc_widths": _ints,
    "fp_widths": _ints,
    "local_frames": _bool,
    "onehot_label": _bool,
}


def config_from_kv(raw: dict[str, str]) -> RunConfig:
    """Build a RunConfig from raw key/value strings; unknown keys are errors."""
    known = {f.name: f for f in fields(RunConfig)}
    kwargs = {}
    for key, val in raw.items():
        if key not in known:
            raise FormatError(f"unknown config key {key!r}")
        default = known[key].default
        try:
            if key in _PARSERS:
                kwargs[key] = _PARSERS[key](val)
            elif isinstance(default, bool):
                kwargs[key] = _bool(val)
            elif isinstance(default, int):
                kwargs[key] = int(val)
            elif isinstance(default, float):
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
        except ValueError as e:
            raise FormatError(f"bad value for config key {key!r}: {e}") from None
    try:
        return RunConfig(**kwargs)
    except ValueError as e:
        raise FormatError(str(e)) from None


# ---------------------------------------------------------------------------
# initialization and optimization


def he_init(store: ParamStore, rng: np.random.Generator) -> None:
    """Hidden weights ~ Normal(0, sqrt(2/fan_in)); biases, shifts and
    zero-init output heads 0; BN scales 1."""
    for p in store.params.values():
        if p.kind == "weight":
            if p.fan_in < 1:
                raise ValueError(f"parameter {p.name} has no recorded fan-in")
            std = np.sqrt(2.0 / p.fan_in)
            p.tensor.data[...] = (rng.normal(size=p.tensor.shape) * std).astype(store.dtype)
        elif p.kind == "bn_scale":
            p.tensor.data[...] = 1.0
        else:
            p.tensor.data[...] = 0.0
    for st in store.bn_states.values():
        st.running_mean[...] = 0.0
        st.running_var[...] = 1.0


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 0.001


def make_adam(store: ParamStore, lr: float = 0.001) -> AdamState:
    # moments stay float64 even for float32 models: squared float32
    # gradients can overflow, and an inf second moment freezes its
    # coordinate for the rest of the run
    opt = AdamState(lr=lr)
    for name, p in store.params.items():
        opt.m[name] = np.zeros(p.tensor.data.shape, dtype=np.float64)
        opt.v[name] = np.zeros(p.tensor.data.shape, dtype=np.float64)
    return opt


def adam_step(opt: AdamState, store: ParamStore) -> None:
    """One bias-corrected update over every parameter; zeroes grads after."""
    opt.t += 1
    c1 = 1.0 - opt.beta1**opt.t
    c2 = 1.0 - opt.beta2**opt.t
    for name, p in store.params.items():
        g = p.tensor.grad
        if g is None:
            raise TrainError(f"parameter {name!r} received no gradient; graph is broken")
        g = g.astype(np.float64)  # python-float * float32 stays float32
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.tensor.data -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    store.zero_grads()


def schedule_lr(lr_init: float, decay: float, every: int, epoch: int) -> float:
    return lr_init * decay ** (epoch // every)


def schedule_bn_momentum(init: float, decay: float, every: int, epoch: int, floor: float = 0.01) -> float:
    return max(floor, init * decay ** (epoch // every))


def apply_schedules(run: RunConfig, epoch: int, opt: AdamState, store: ParamStore) -> tuple[float, float]:
    lr = schedule_lr(run.lr, run.lr_decay, run.lr_every, epoch)
    mom = schedule_bn_momentum(run.bn_momentum, run.bn_decay, run.bn_every, epoch, run.bn_floor)
    opt.lr = lr
    for st in store.bn_states.values():
        st.momentum = mom
    return lr, mom


# ---------------------------------------------------------------------------
# batches, losses, evaluation


def _forward_loss(run, cfg, store, clouds, training, rng):
    """Returns (loss Tensor, correct count or cosine sum, element count)."""
    if run.task == "classification":
        labels = np.array([c.shape_label for c in clouds], dtype=np.int64)
        logits = classify_forward_batch(cfg, store, clouds, training, rng)
        loss = softmax_cross_entropy(logits, labels)
        correct = int((logits.data.argmax(axis=1) == labels).sum())
        return loss, correct, len(clouds)
    if run.task == "segmentation":
        labels = np.concatenate([c.point_labels for c in clouds]).astype(np.int64)
        class_labels = np.array([c.shape_label or 0 for c in clouds], dtype=np.int64)
        out = segment_forward_batch(cfg, store, clouds, class_labels, training, rng)
        flat = reshape(out, (labels.size, cfg.num_parts))
        loss = softmax_cross_entropy(flat, labels)
        correct = int((flat.data.argmax(axis=1) == labels).sum())
        return loss, correct, labels.size
    targets = np.concatenate([c.normals for c in clouds])
    out = normals_forward_batch(cfg, store, clouds, training, rng)
    flat = reshape(out, (targets.shape[0], 3))
    loss = cosine_loss(flat, targets)
    cos_sum = float((flat.data * targets).sum())
    return loss, cos_sum, targets.shape[0]


def evaluate_model(run: RunConfig, cfg: NetworkConfig, store: ParamStore, clouds: list[PointCloud]) -> tuple[float, float]:
    """Deterministic eval over normalized clouds; returns (loss, accuracy).

    For normal estimation the accuracy column is the mean cosine similarity.
    """
    total_loss = 0.0
    total_good = 0.0
    total_n = 0
    for i in range(0, len(clouds), run.batch_size):
        chunk = clouds[i : i + run.batch_size]
        loss, good, n = _forward_loss(run, cfg, store, chunk, False, None)
        total_loss += loss.item() * n
        total_good += good
        total_n += n
    return total_loss / total_n, total_good / total_n


def prepare_clouds(clouds: list[PointCloud]) -> list[PointCloud]:
    return [normalize_global(c) for c in clouds]


def normals_angular_error(
    run: RunConfig, cfg: NetworkConfig, store: ParamStore, clouds: list[PointCloud]
) -> float:
    """Mean angle in degrees between predicted and true normals."""
    total = 0.0
    count = 0
    for i in range(0, len(clouds), run.batch_size):
        chunk = clouds[i : i + run.batch_size]
        pred = normals_forward_batch(cfg, store, chunk, training=False, rng=None)
        target = np.concatenate([c.normals for c in chunk]).astype(np.float64)
        cos = (pred.data.reshape(-1, 3).astype(np.float64) * target).sum(axis=1)
        total += np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).sum()
        count += target.shape[0]
    return total / count


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class FitResult:
    config: NetworkConfig
    store: ParamStore
    opt: AdamState
    history: list
    elapsed: float

    def rows(self, split: str):
        return [r for r in self.history if r["split"] == split]

    def final(self, split: str):
        r = self.rows(split)[-1]
        return r["loss"], r["accuracy"]


def _write_outputs(out_dir, run, seed, history, store, opt, epoch, elapsed):
    buf = _io.StringIO()
    w = csv.writer(buf)
    w.writerow(["epoch", "split", "loss", "accuracy"])
    for r in history:
        w.writerow([r["epoch"], r["split"], "%.17g" % r["loss"], "%.17g" % r["accuracy"]])
    atomic_write_text(os.path.join(out_dir, "metrics.csv"), buf.getvalue())
    entries = store_entries(store)
    for name in opt.m:
        entries[f"__opt__.m.{name}"] = opt.m[name]
        entries[f"__opt__.v.{name}"] = opt.v[name]
    entries["__opt__.t"] = np.array(float(opt.t))
    entries["__meta__.epoch"] = np.array(float(epoch))
    save_checkpoint(os.path.join(out_dir, "model.ckpt"), entries)
    report = {
        "task": run.task,
        "seed": seed,
        "epochs_run": epoch + 1,
        "elapsed_sec": elapsed,
        "fingerprint": run.fingerprint(),
        "final": {r["split"]: {"loss": r["loss"], "accuracy": r["accuracy"]} for r in history[-2:]},
    }
    atomic_write_text(os.path.join(out_dir, "report.json"), json.dumps(report, indent=2) + "\n")


def fit(
    run: RunConfig,
    train_clouds: list[PointCloud],
    test_clouds: list[PointCloud],
    seed: int = 0,
    out_dir: str | None = None,
    resume: str | None = None,
    log=None,
) -> FitResult:
    """Full training loop; deterministic given (run, data, seed).

    With ``resume`` pointing at a checkpoint written by a previous run of
    the same config and seed, continues at the recorded epoch and produces
    bit-identical metrics to the uninterrupted run.
    """
    cfg = run.network_config()
    store = build_params(cfg, dtype=np.float32)
    he_init(store, np.random.default_rng([seed, _INIT]))
    opt = make_adam(store, run.lr)
    start_epoch = 0
    if resume is not None:
        extra = restore_store(store, load_checkpoint(resume))
        for key in ("__opt__.t", "__meta__.epoch"):
            if key not in extra:
                raise TrainError(f"checkpoint {resume!r} lacks {key}; cannot resume")
        for name in store.params:
            mk, vk = f"__opt__.m.{name}", f"__opt__.v.{name}"
            if mk not in extra or vk not in extra:
                raise TrainError(f"checkpoint {resume!r} lacks optimizer state for {name!r}")
            opt.m[name] = extra[mk]
            opt.v[name] = extra[vk]
        opt.t = int(extra["__opt__.t"])
        start_epoch = int(extra["__meta__.epoch"]) + 1
        if start_epoch >= run.epochs:
            raise TrainError(f"checkpoint already covers epoch {start_epoch - 1}; nothing to resume")
    aug = run.augmentation()
    test_ready = prepare_clouds(test_clouds)
    history: list = []
    t0 = time.time()
    for epoch in range(start_epoch, run.epochs):
        shuffle_rng = np.random.default_rng([seed, epoch, _SHUFFLE])
        aug_rng = np.random.default_rng([seed, epoch, _AUGMENT])
        net_rng = np.random.default_rng([seed, epoch, _NET])
        apply_schedules(run, epoch, opt, store)
        order = shuffle_rng.permutation(len(train_clouds))
        loss_sum = 0.0
        good_sum = 0.0
        n_sum = 0
        for bi in range(0, len(order), run.batch_size):
            idx = order[bi : bi + run.batch_size]
            if idx.size < 2:
                continue  # batch norm needs at least two rows
            batch = []
            for i in idx:
                c = augment(train_clouds[i], aug, aug_rng)
                if aug.input_dropout > 0:
                    c = resample_dropout(c, aug.input_dropout, aug_rng)
                batch.append(normalize_global(c))
            loss, good, n = _forward_loss(run, cfg, store, batch, True, net_rng)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainError(
                    f"non-finite loss {val} at epoch {epoch} batch {bi // run.batch_size} (seed {seed})"
                )
            backward(loss)
            adam_step(opt, store)
            loss_sum += val * n
            good_sum += good
            n_sum += n
        history.append(
            {"epoch": epoch, "split": "train", "loss": loss_sum / n_sum, "accuracy": good_sum / n_sum}
        )
        te_loss, te_acc = evaluate_model(run, cfg, store, test_ready) if test_ready else (0.0, 0.0)
        history.append({"epoch": epoch, "split": "test", "loss": te_loss, "accuracy": te_acc})
        if log:
            log(
                f"epoch {epoch}: train loss {history[-2]['loss']:.4f} "
                f"acc {history[-2]['accuracy']:.4f} | test acc {te_acc:.4f}"
            )
        if out_dir:
            _write_outputs(out_dir, run, seed, history, store, opt, epoch, time.time() - t0)
    return FitResult(config=cfg, store=store, opt=opt, history=history, elapsed=time.time() - t0)


# ---------------------------------------------------------------------------
# prediction helpers and harnesses


def vote_predict(
    cfg: NetworkConfig,
    store: ParamStore,
    cloud: PointCloud,
    votes: int,
    rng: np.random.Generator,
    scale_low: float = 0.66,
    scale_high: float = 1.5,
) -> np.ndarray:
    """Average softmax over ``votes`` randomly re-scaled copies of the cloud."""
    if votes < 1:
        raise ValueError("votes must be >= 1")
    acc = np.zeros(cfg.num_classes)
    for _ in range(votes):
        s = rng.uniform(scale_low, scale_high, size=3)
        normals = cloud.normals
        if normals is not None:
            normals = normals / s
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        scaled = normalize_global(PointCloud(cloud.coords * s, normals=normals))
        logits = classify_forward_batch(cfg, store, [scaled])
        acc += softmax(logits.data[0].astype(np.float64))
    return acc / votes


def voted_accuracy(cfg, store, clouds, votes, rng, scale_low=0.66, scale_high=1.5) -> float:
    good = 0
    for c in clouds:
        probs = vote_predict(cfg, store, c, votes, rng, scale_low, scale_high)
        good += int(probs.argmax() == c.shape_label)
    return good / len(clouds)


_ROT90_Y = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
_ROT180_Y = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]])

INVARIANCE_TRANSFORMS = ("clean", "permute", "translate", "rotate90", "rotate180")


def _transform_cloud(cloud: PointCloud, name: str, rng: np.random.Generator) -> PointCloud:
    if name == "clean":
        return cloud
    if name == "permute":
        perm = rng.permutation(cloud.size)
        return PointCloud(
            cloud.coords[perm],
            normals=None if cloud.normals is None else cloud.normals[perm],
            point_labels=None if cloud.point_labels is None else cloud.point_labels[perm],
            shape_label=cloud.shape_label,
        )
    if name == "translate":
        t = rng.uniform(-0.2, 0.2, size=3)
        return PointCloud(
            cloud.coords + t,
            normals=cloud.normals,
            point_labels=cloud.point_labels,
            shape_label=cloud.shape_label,
        )
    rot = _ROT90_Y if name == "rotate90" else _ROT180_Y
    return PointCloud(
        cloud.coords @ rot.T,
        normals=None if cloud.normals is None else cloud.normals @ rot.T,
        point_labels=cloud.point_labels,
        shape_label=cloud.shape_label,
    )


def _model_needs_normals(cfg: NetworkConfig) -> bool:
    if cfg.use_local_frames:
        return True
    return any(RelationKind.NORMAL_COS in lc.view_kinds for lc in cfg.layers)


def invariance_harness(
    cfg: NetworkConfig,
    store: ParamStore,
    clouds: list[PointCloud],
    seed: int = 0,
    batch_size: int = 32,
) -> dict[str, float]:
    """Accuracy under each perturbation, applied after normalization.

    The perturbed clouds feed the network directly (no re-normalization),
    so the table measures the model's own robustness.
    """
    if _model_needs_normals(cfg) and any(c.normals is None for c in clouds):
        raise ValueError("rotation-robust evaluation requires normals on every cloud")
    ready = prepare_clouds(clouds)
    labels = np.array([c.shape_label for c in clouds], dtype=np.int64)
    table = {}
    for name in INVARIANCE_TRANSFORMS:
        rng = np.random.default_rng([seed, _HARNESS, INVARIANCE_TRANSFORMS.index(name)])
        moved = [_transform_cloud(c, name, rng) for c in ready]
        good = 0
        for i in range(0, len(moved), batch_size):
            chunk = moved[i : i + batch_size]
            logits = classify_forward_batch(cfg, store, chunk)
            good += int((logits.data.argmax(axis=1) == labels[i : i + len(chunk)]).sum())
        table[name] = good / len(moved)
    return table


def density_harness(
    cfg: NetworkConfig,
    store: ParamStore,
    clouds: list[PointCloud],
    counts=(256, 128, 64, 32),
    seed: int = 0,
    batch_size: int = 32,
) -> list:
    """Accuracy when evaluating on sparser subsets of each test cloud."""
    labels = np.array([c.shape_label for c in clouds], dtype=np.int64)
    rows = []
    for count in counts:
        rng = np.random.default_rng([seed, _HARNESS, 100 + count])
        subs = []
        for c in clouds:
            if count > c.size:
                raise ValueError(f"count {count} exceeds cloud size {c.size}")
            subs.append(normalize_global(density_dropout(c, count, rng)))
        good = 0
        for i in range(0, len(subs), batch_size):
            chunk = subs[i : i + batch_size]
            logits = classify_forward_batch(cfg, store, chunk)
            good += int((logits.data.argmax(axis=1) == labels[i : i + len(chunk)]).sum())
        rows.append((count, good / len(subs)))
    return rows
