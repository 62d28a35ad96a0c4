"""Command-line surface.

Every subcommand exits 0 on success and nonzero with a one-line
diagnostic on stderr otherwise. File outputs are written atomically, so
a failing run leaves no partial artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .autodiff import softmax
from .data import generate_dataset
from .io import (
    FormatError,
    atomic_write_text,
    load_checkpoint,
    load_kv_file,
    load_manifest,
    load_point_cloud,
    restore_store,
)
from .geometry import PointCloud, normalize_global
from .networks import (
    build_params,
    classify_forward_batch,
    normals_forward_batch,
    segment_forward_batch,
)
from .training import (
    RunConfig,
    TrainError,
    config_from_kv,
    density_harness,
    evaluate_model,
    fit,
    invariance_harness,
    normals_angular_error,
    prepare_clouds,
    vote_predict,
)
from .verify import check_gradients, gridconv_equivalence

GRIDCONV_TOL = 1e-9


def _load_run(args) -> RunConfig:
    if getattr(args, "config", None):
        return config_from_kv(load_kv_file(args.config))
    return RunConfig()


def _data_dir(args, run: RunConfig) -> str:
    d = getattr(args, "data", None) or run.data_dir
    if not d:
        raise TrainError("no dataset directory: pass --data or set data_dir in the config")
    return d


def _load_split(data_dir: str, split: str) -> list[PointCloud]:
    entries = load_manifest(os.path.join(data_dir, f"{split}.txt"))
    clouds = []
    for rel, label in entries:
        c = load_point_cloud(os.path.join(data_dir, rel))
        if c.shape_label is not None and c.shape_label != label:
            raise FormatError(f"label mismatch for {rel!r}: file says {c.shape_label}, manifest {label}")
        clouds.append(
            PointCloud(c.coords, normals=c.normals, point_labels=c.point_labels, shape_label=label)
        )
    return clouds


def _load_model(args, run: RunConfig):
    cfg = run.network_config()
    store = build_params(cfg, dtype=np.float32)
    restore_store(store, load_checkpoint(args.checkpoint))
    return cfg, store


def _emit(args, text: str) -> None:
    if getattr(args, "out", None):
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_gen_data(args) -> int:
    run = _load_run(args)
    if not args.out:
        raise TrainError("gen-data requires --out")
    generate_dataset(
        args.out,
        families=run.families,
        train_per_class=run.train_per_class,
        test_per_class=run.test_per_class,
        points=run.points,
        seed=args.seed,
    )
    n = len(run.families)
    print(
        f"wrote {n * run.train_per_class} train / {n * run.test_per_class} test clouds to {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    run = _load_run(args)
    if not args.out:
        raise TrainError("train requires --out")
    data_dir = _data_dir(args, run)
    train = _load_split(data_dir, "train")
    test = _load_split(data_dir, "test")
    res = fit(
        run,
        train,
        test,
        seed=args.seed,
        out_dir=args.out,
        resume=args.resume,
        log=print if not args.quiet else None,
    )
    loss, acc = res.final("test")
    print(f"done: test loss {loss:.6f} accuracy {acc:.4f} ({res.elapsed:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    run = _load_run(args)
    clouds = _load_split(_data_dir(args, run), args.split)
    cfg, store = _load_model(args, run)
    ready = prepare_clouds(clouds)
    report = {"task": run.task, "split": args.split, "count": len(clouds), "votes": args.votes}
    if args.votes > 1:
        if run.task != "classification":
            raise TrainError("--votes > 1 applies to classification only")
        rng = np.random.default_rng([args.seed, 4])
        good = 0
        for c in ready:
            probs = vote_predict(cfg, store, c, args.votes, rng, run.scale_low, run.scale_high)
            good += int(probs.argmax() == c.shape_label)
        report["accuracy"] = good / len(ready)
    else:
        loss, acc = evaluate_model(run, cfg, store, ready)
        report["loss"] = loss
        report["accuracy"] = acc
        if run.task == "normal_estimation":
            report["mean_angular_error_deg"] = normals_angular_error(run, cfg, store, ready)
    _emit(args, json.dumps(report, indent=2) + "\n")
    if args.out:
        print(f"accuracy {report['accuracy']:.4f} -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    run = _load_run(args)
    cloud = load_point_cloud(args.input)
    cfg, store = _load_model(args, run)
    ready = normalize_global(cloud)
    if run.task == "classification":
        if args.votes > 1:
            rng = np.random.default_rng([args.seed, 4])
            probs = vote_predict(cfg, store, ready, args.votes, rng, run.scale_low, run.scale_high)
        else:
            logits = classify_forward_batch(cfg, store, [ready])
            probs = softmax(logits.data[0].astype(np.float64))
        lines = [f"label {int(probs.argmax())}"]
        lines += ["prob %d %.17g" % (i, p) for i, p in enumerate(probs)]
        _emit(args, "\n".join(lines) + "\n")
    elif run.task == "segmentation":
        logits = segment_forward_batch(cfg, store, [ready])
        labels = logits.data[0].argmax(axis=1)
        _emit(args, "\n".join(str(int(v)) for v in labels) + "\n")
    else:
        pred = normals_forward_batch(cfg, store, [ready])
        rows = pred.data.reshape(-1, 3)
        _emit(args, "\n".join("%.17g %.17g %.17g" % tuple(r) for r in rows) + "\n")
    return 0


def cmd_check_grad(args) -> int:
    results = check_gradients(seed=args.seed)
    lines = [
        "%-24s max_rel %.3e entries %4d %s"
        % (r.name, r.max_rel_error, r.entries, "PASS" if r.ok else "FAIL")
        for r in results
    ]
    _emit(args, "\n".join(lines) + "\n")
    if args.out:
        print(f"{len(results)} checks -> {args.out}")
    bad = [r for r in results if not r.ok]
    if bad:
        raise TrainError(f"{len(bad)} gradient checks failed (worst {max(r.max_rel_error for r in bad):.3e})")
    return 0


def cmd_invariance(args) -> int:
    run = _load_run(args)
    clouds = _load_split(_data_dir(args, run), args.split)
    cfg, store = _load_model(args, run)
    table = invariance_harness(cfg, store, clouds, seed=args.seed)
    lines = ["transform,accuracy"]
    lines += ["%s,%.17g" % (k, v) for k, v in table.items()]
    _emit(args, "\n".join(lines) + "\n")
    return 0


def cmd_density(args) -> int:
    run = _load_run(args)
    counts = tuple(int(v) for v in args.counts.split(","))
    clouds = _load_split(_data_dir(args, run), args.split)
    cfg, store = _load_model(args, run)
    rows = density_harness(cfg, store, clouds, counts=counts, seed=args.seed)
    lines = ["count,accuracy"]
    lines += ["%d,%.17g" % (c, a) for c, a in rows]
    _emit(args, "\n".join(lines) + "\n")
    return 0


def cmd_gridconv_check(args) -> int:
    worst = gridconv_equivalence(instances=args.instances, seed=args.seed)
    _emit(args, "max_abs_diff %.3e over %d instances\n" % (worst, args.instances))
    if worst >= GRIDCONV_TOL:
        raise TrainError(f"grid-convolution deviation {worst:.3e} exceeds {GRIDCONV_TOL:.0e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rscnn", description="relation-shape convolution toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output file or directory")

    p = sub.add_parser("gen-data", help="write a synthetic dataset with manifests")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write metrics/checkpoint/report")
    common(p)
    p.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--votes", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="run one point-cloud file through a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--votes", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("check-grad", help="finite-difference check of every operation")
    common(p)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("invariance", help="accuracy table under permutation/translation/rotation")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_invariance)

    p = sub.add_parser("density", help="accuracy at sparser evaluation point counts")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--counts", default="256,128,64,32")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("gridconv-check", help="compare against dense 2D convolution")
    common(p)
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=cmd_gridconv_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
