"""Text formats: point clouds, dataset manifests, checkpoints, config files.

All writers go through an atomic temp-file replace so a crashed run never
leaves a truncated artifact behind. Floats use %.17g, which round-trips
float64 (and therefore float32) exactly; checkpoint save/load is bit-exact.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .autodiff import ParamStore
from .geometry import PointCloud

CKPT_MAGIC = "RSCNN-CKPT v1"
MANIFEST_MAGIC = "RSCNN-MANIFEST v1"

RESERVED_PREFIXES = ("__opt__.", "__meta__.")


class FormatError(ValueError):
    """A file does not conform to one of the formats above."""


def atomic_write_text(path: str, text: str) -> None:
    """Write text to ``path`` via a same-directory temp file and rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(values) -> str:
    return " ".join("%.17g" % v for v in np.asarray(values).ravel())


# ---------------------------------------------------------------------------
# point clouds


def format_point_cloud(cloud: PointCloud) -> str:
    """Header ``N F``, one point per line, optional trailing ``LABEL k``.

    F is 3 (xyz), 4 (xyz+part), 6 (xyz+normal) or 7 (xyz+normal+part).
    """
    fields = [cloud.coords]
    f = 3
    if cloud.normals is not None:
        fields.append(cloud.normals)
        f += 3
    if cloud.point_labels is not None:
        fields.append(cloud.point_labels[:, None].astype(np.float64))
        f += 1
    rows = np.concatenate(fields, axis=1)
    lines = [f"{cloud.size} {f}"]
    lines.extend(_fmt(row) for row in rows)
    if cloud.shape_label is not None:
        lines.append(f"LABEL {int(cloud.shape_label)}")
    return "\n".join(lines) + "\n"


def parse_point_cloud(text: str) -> PointCloud:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty point cloud file")
    head = lines[0].split()
    if len(head) != 2:
        raise FormatError(f"bad header {lines[0]!r}: expected 'N F'")
    try:
        n, f = int(head[0]), int(head[1])
    except ValueError:
        raise FormatError(f"bad header {lines[0]!r}: expected two integers") from None
    if f not in (3, 4, 6, 7):
        raise FormatError(f"unsupported field count {f} (expected 3, 4, 6 or 7)")
    if n < 1:
        raise FormatError(f"point count must be positive, got {n}")
    body = lines[1 : 1 + n]
    if len(body) < n:
        raise FormatError(f"expected {n} point lines, found {len(body)}")
    label = None
    rest = lines[1 + n :]
    if rest:
        if len(rest) != 1 or not rest[0].startswith("LABEL"):
            raise FormatError(f"unexpected trailing content {rest[0]!r}")
        parts = rest[0].split()
        if len(parts) != 2:
            raise FormatError(f"bad label line {rest[0]!r}")
        try:
            label = int(parts[1])
        except ValueError:
            raise FormatError(f"bad label line {rest[0]!r}") from None
    try:
        rows = np.array([[float(v) for v in ln.split()] for ln in body], dtype=np.float64)
    except ValueError:
        raise FormatError("non-numeric value in point data") from None
    if rows.shape != (n, f):
        raise FormatError(f"expected {f} values per point line")
    coords = rows[:, :3]
    normals = rows[:, 3:6] if f >= 6 else None
    point_labels = None
    if f in (4, 7):
        col = rows[:, -1]
        if not np.array_equal(col, np.round(col)):
            raise FormatError("part labels must be integers")
        point_labels = col.astype(np.int64)
    try:
        return PointCloud(coords, normals=normals, point_labels=point_labels, shape_label=label)
    except ValueError as e:
        raise FormatError(str(e)) from None


def save_point_cloud(path: str, cloud: PointCloud) -> None:
    atomic_write_text(path, format_point_cloud(cloud))


def load_point_cloud(path: str) -> PointCloud:
    with open(path) as fh:
        return parse_point_cloud(fh.read())


# ---------------------------------------------------------------------------
# manifests


def save_manifest(path: str, entries: list[tuple[str, int]]) -> None:
    """Entries are (relative path, class label) pairs."""
    lines = [MANIFEST_MAGIC]
    for rel, label in entries:
        if " " in rel:
            raise FormatError(f"manifest paths may not contain spaces: {rel!r}")
        lines.append(f"{rel} {int(label)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path: str) -> list[tuple[str, int]]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh.read().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise FormatError(f"not a manifest: expected leading {MANIFEST_MAGIC!r}")
    out = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            raise FormatError(f"bad manifest line {ln!r}")
        try:
            out.append((parts[0], int(parts[1])))
        except ValueError:
            raise FormatError(f"bad manifest label in {ln!r}") from None
    if not out:
        raise FormatError("manifest lists no files")
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, entries: dict[str, np.ndarray]) -> None:
    """Each entry: a line ``name ndim d1..dk`` then one line of values."""
    lines = [CKPT_MAGIC]
    for name, arr in entries.items():
        if any(ch.isspace() for ch in name):
            raise FormatError(f"entry name may not contain whitespace: {name!r}")
        a = np.asarray(arr, dtype=np.float64)
        dims = " ".join(str(d) for d in a.shape)
        lines.append(f"{name} {a.ndim}" + (f" {dims}" if a.ndim else ""))
        lines.append(_fmt(a) if a.size else "")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise FormatError(f"not a checkpoint: expected leading {CKPT_MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if len(head) < 2:
            raise FormatError(f"bad checkpoint entry header {lines[i]!r}")
        name = head[0]
        try:
            ndim = int(head[1])
            shape = tuple(int(d) for d in head[2 : 2 + ndim])
        except ValueError:
            raise FormatError(f"bad checkpoint entry header {lines[i]!r}") from None
        if len(shape) != ndim or i + 1 >= len(lines):
            raise FormatError(f"truncated checkpoint entry {name!r}")
        try:
            vals = np.array(lines[i + 1].split(), dtype=np.float64)
        except ValueError:
            raise FormatError(f"bad values for checkpoint entry {name!r}") from None
        expect = int(np.prod(shape)) if shape else 1
        if vals.size != expect:
            raise FormatError(f"entry {name!r} expects {expect} values, found {vals.size}")
        if name in out:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        out[name] = vals.reshape(shape)
        i += 2
    return out


def store_entries(store: ParamStore) -> dict[str, np.ndarray]:
    """All learnable parameters plus batch-norm running statistics."""
    out: dict[str, np.ndarray] = {}
    for name, p in store.params.items():
        out[name] = p.tensor.data.copy()
    for name, st in store.bn_states.items():
        out[f"{name}.running_mean"] = st.running_mean.copy()
        out[f"{name}.running_var"] = st.running_var.copy()
    return out


def restore_store(store: ParamStore, entries: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Load parameters and running stats in place; returns reserved leftovers.

    Any non-reserved entry that does not match the store, and any store
    value missing from the checkpoint, is an error.
    """
    seen = set()
    for name, p in store.params.items():
        if name not in entries:
            raise FormatError(f"checkpoint is missing parameter {name!r}")
        v = entries[name]
        if v.shape != p.tensor.data.shape:
            raise FormatError(
                f"parameter {name!r} has shape {p.tensor.data.shape}, checkpoint holds {v.shape}"
            )
        p.tensor.data[...] = v.astype(store.dtype)
        seen.add(name)
    for name, st in store.bn_states.items():
        for suffix, arr in ((".running_mean", st.running_mean), (".running_var", st.running_var)):
            key = name + suffix
            if key not in entries:
                raise FormatError(f"checkpoint is missing {key!r}")
            v = entries[key]
            if v.shape != arr.shape:
                raise FormatError(f"{key!r} has shape {arr.shape}, checkpoint holds {v.shape}")
            arr[...] = v.astype(store.dtype)
            seen.add(key)
    extra: dict[str, np.ndarray] = {}
    for name, v in entries.items():
        if name in seen:
            continue
        if name.startswith(RESERVED_PREFIXES):
            extra[name] = v
        else:
            raise FormatError(f"checkpoint entry {name!r} does not match any model value")
    return extra


# ---------------------------------------------------------------------------
# config text


def parse_kv_text(text: str) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment; duplicate keys are an error."""
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {no}: expected 'key = value', got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key or not val:
            raise FormatError(f"line {no}: empty key or value in {raw.strip()!r}")
        if key in out:
            raise FormatError(f"line {no}: duplicate key {key!r}")
        out[key] = val
    return out


def load_kv_file(path: str) -> dict[str, str]:
    with open(path) as fh:
        return parse_kv_text(fh.read())
