"""On-disk artifacts: condensed sets, run logs and Gram snapshots.

Tensors are raw little-endian float32 buffers (``.bin``) described by a JSON
manifest (``.json``) sharing the same stem. Logs are CSV.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .condenser import CondenseConfig, RunLog, SyntheticSet

FORMAT_VERSION = 1


class ArtifactError(ValueError):
    """A manifest and its buffer disagree, or a file is malformed."""


def _paths(path):
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".bin", ".json") else p
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_condensed(s: SyntheticSet, path, cfg: CondenseConfig | None = None, extra: dict | None = None,
                   clip: tuple | None = None) -> Path:
    """Write ``<stem>.bin`` (pixels) and ``<stem>.json``; returns the ``.bin`` path.

    ``clip=(lo, hi)`` clamps pixels to the data range on export only; the
    optimisation itself is unconstrained.
    """
    bin_path, man_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.ascontiguousarray(s.images, dtype="<f4")
    if clip is not None:
        lo, hi = (float(np.float32(v)) for v in clip)
        if lo > hi:
            raise ValueError(f"clip range ({lo}, {hi}) is empty")
        pixels = np.clip(pixels, np.float32(lo), np.float32(hi))
    manifest = {
        "format": "dcc-condensed",
        "version": FORMAT_VERSION,
        "classes": int(s.n_classes),
        "ipc": int(s.ipc),
        "shape": list(pixels.shape),
        "labels": [int(v) for v in s.labels],
        "seed": None if cfg is None else int(cfg.seed),
        "config_hash": None if cfg is None else cfg.hash(),
        "config": None if cfg is None else cfg.to_dict(),
        "clip": None if clip is None else [lo, hi],
        "extra": extra or {},
    }
    bin_path.write_bytes(pixels.tobytes())
    man_path.write_text(_dumps(manifest))
    return bin_path


def read_manifest(path) -> dict:
    _, man_path = _paths(path)
    try:
        return json.loads(man_path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{man_path}: invalid JSON ({e})") from None


def load_condensed(path) -> tuple[SyntheticSet, dict]:
    """Inverse of :func:`save_condensed`. Raises :class:`ArtifactError` on any mismatch."""
    bin_path, man_path = _paths(path)
    if not bin_path.exists() or not man_path.exists():
        raise FileNotFoundError(f"condensed set needs both {bin_path} and {man_path}")
    m = read_manifest(path)
    if m.get("format") != "dcc-condensed":
        raise ArtifactError(f"{man_path} is not a condensed-set manifest")
    shape = tuple(int(v) for v in m["shape"])
    raw = bin_path.read_bytes()
    want = int(np.prod(shape)) * 4
    if len(raw) != want:
        raise ArtifactError(f"{bin_path}: {len(raw)} bytes, manifest shape {shape} needs {want}")
    labels = np.asarray(m["labels"], dtype=np.int64)
    if len(labels) != shape[0] or len(labels) != m["classes"] * m["ipc"]:
        raise ArtifactError(f"{man_path}: label count does not match shape/classes/ipc")
    if labels.size and (labels.min() < 0 or labels.max() >= m["classes"]):
        raise ArtifactError(f"{man_path}: labels outside [0, {m['classes']})")
    images = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return SyntheticSet(images, labels, int(m["ipc"]), int(m["classes"])), m


RUNLOG_COLUMNS = ("outer", "inner", "mode", "loss", "wall_ms")


def write_runlog_csv(runlog: RunLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUNLOG_COLUMNS)
        for outer, inner, mode, loss, ms in runlog.rows:
            w.writerow([outer, inner, mode, repr(loss), f"{ms:.3f}"])
    return path


def read_runlog_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0]) != RUNLOG_COLUMNS:
        raise ArtifactError(f"{path}: unexpected columns {tuple(rows[0])}")
    return [{"outer": int(r["outer"]), "inner": int(r["inner"]), "mode": r["mode"],
             "loss": float(r["loss"]), "wall_ms": float(r["wall_ms"])} for r in rows]


def write_csv(rows: list[dict], path, columns=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in columns})
    return path


def save_grams(runlog: RunLog, path) -> Path:
    """All Gram snapshots in one float32 buffer plus a manifest of (step, outer, inner, n)."""
    bin_path, man_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    for step, outer, inner, K in runlog.grams:
        entries.append({"step": int(step), "outer": int(outer), "inner": int(inner), "n": int(K.shape[0])})
        chunks.append(np.ascontiguousarray(K, dtype="<f4").ravel())
    buf = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    bin_path.write_bytes(buf.tobytes())
    man_path.write_text(_dumps({"format": "dcc-grams", "version": FORMAT_VERSION, "snapshots": entries}))
    return bin_path


def load_grams(path) -> RunLog:
    bin_path, man_path = _paths(path)
    m = json.loads(man_path.read_text())
    if m.get("format") != "dcc-grams":
        raise ArtifactError(f"{man_path} is not a Gram manifest")
    flat = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    need = sum(e["n"] ** 2 for e in m["snapshots"])
    if flat.size != need:
        raise ArtifactError(f"{bin_path}: {flat.size} values, manifest needs {need}")
    out, off = RunLog(), 0
    for e in m["snapshots"]:
        n = e["n"]
        out.grams.append((e["step"], e["outer"], e["inner"], flat[off:off + n * n].reshape(n, n).astype(np.float64)))
        off += n * n
    return out


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dumps(obj))
    return path
