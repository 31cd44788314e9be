"""Dataset containers, loaders and the builtin desk-scale tasks."""

from __future__ import annotations

import gzip
import json
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class DatasetContainer:
    """Images are stored NCHW float32 in [0, 1] (or standardised if requested)."""

    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    source: str = "builtin-toy"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for split, y in (("train", self.y_train), ("test", self.y_test)):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise DataError(f"{split} labels outside [0, {self.n_classes})")
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise DataError("image and label counts differ")

    @property
    def image_shape(self):
        """(H, W, channels)."""
        C, H, W = self.x_train.shape[1:]
        return (H, W, C)

    @property
    def chw(self):
        return tuple(self.x_train.shape[1:])

    def class_index(self, split: str = "train") -> dict[int, np.ndarray]:
        y = self.y_train if split == "train" else self.y_test
        return {c: np.flatnonzero(y == c) for c in range(self.n_classes)}

    def class_counts(self, split: str = "train") -> np.ndarray:
        y = self.y_train if split == "train" else self.y_test
        return np.bincount(y, minlength=self.n_classes)


# idx ---------------------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise DataError(f"{path}: bad idx magic number")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(body) < need:
        raise DataError(f"{path}: truncated idx payload ({len(body)} of {need} bytes)")
    return np.frombuffer(body[:need], dtype=dtype).reshape(dims)


def _find(directory: Path, stem: str):
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / cand).exists():
            return directory / cand
    return None


def load_idx_dir(directory, name="mnist") -> DatasetContainer:
    directory = Path(directory)
    parts = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        img = _find(directory, f"{prefix}-images-idx3-ubyte")
        lab = _find(directory, f"{prefix}-labels-idx1-ubyte")
        if img is None or lab is None:
            raise DataError(f"{directory}: missing {prefix} idx image/label files")
        x, y = read_idx(img), read_idx(lab)
        if len(x) != len(y):
            raise DataError(f"{directory}: {split} image/label counts differ")
        parts[split] = (x, y)
    (xtr, ytr), (xte, yte) = parts["train"], parts["test"]

    def prep(x):
        x = x.astype(np.float32) / 255.0
        return x[:, None] if x.ndim == 3 else x.transpose(0, 3, 1, 2)

    C = int(max(ytr.max(), yte.max())) + 1
    return DatasetContainer(name, prep(xtr), ytr.astype(np.int64), prep(xte), yte.astype(np.int64),
                            C, source="idx")


# raw-f32 -----------------------------------------------------------------------

def load_raw_f32(manifest_path) -> DatasetContainer:
    """Manifest JSON: ``{"name", "chw": [C,H,W], "classes", "splits": {split:
    {"count", "images": <f32 file>, "labels": <i32 file>}}}``; paths relative
    to the manifest."""
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    chw = tuple(int(v) for v in m["chw"])
    out = {}
    for split in ("train", "test"):
        s = m["splits"][split]
        n = int(s["count"])
        xb = (manifest_path.parent / s["images"]).read_bytes()
        yb = (manifest_path.parent / s["labels"]).read_bytes()
        if len(xb) != n * int(np.prod(chw)) * 4:
            raise DataError(f"{split}: image buffer has {len(xb)} bytes, manifest implies "
                            f"{n * int(np.prod(chw)) * 4}")
        if len(yb) != n * 4:
            raise DataError(f"{split}: label buffer has {len(yb)} bytes, expected {n * 4}")
        out[split] = (np.frombuffer(xb, "<f4").reshape((n,) + chw).astype(np.float32),
                      np.frombuffer(yb, "<i4").astype(np.int64))
    return DatasetContainer(m.get("name", manifest_path.stem), *out["train"], *out["test"],
                            int(m["classes"]), source="raw-f32")


def save_raw_f32(ds: DatasetContainer, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split, x, y in (("train", ds.x_train, ds.y_train), ("test", ds.x_test, ds.y_test)):
        (directory / f"{split}_x.f32").write_bytes(x.astype("<f4").tobytes())
        (directory / f"{split}_y.i32").write_bytes(y.astype("<i4").tobytes())
        splits[split] = {"count": int(len(y)), "images": f"{split}_x.f32", "labels": f"{split}_y.i32"}
    path = directory / "manifest.json"
    path.write_text(json.dumps({"name": ds.name, "chw": list(ds.chw), "classes": ds.n_classes,
                                "splits": splits}, indent=2))
    return path


# builtin tasks -----------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v)


def finegrained_patterns(hw=16, n_tasks=1, seed=0):
    """Class-common low-frequency pattern and one discriminative patch per task.

    All patterns are unit-norm images; patches of different tasks sit at
    different locations so the tasks are distinct.
    """
    yy, xx = np.mgrid[0:hw, 0:hw] / (hw - 1)
    common = _unit(np.cos(np.pi * xx) + np.cos(np.pi * yy) + 1.5)
    g = np.random.default_rng(seed)
    spots = [(2, 2), (2, hw - 6), (hw - 6, 2), (hw - 6, hw - 6), (hw // 2 - 2, hw // 2 - 2)]
    patches = []
    for t in range(n_tasks):
        p = np.zeros((hw, hw))
        r, c = spots[t % len(spots)]
        p[r:r + 4, c:c + 4] = g.choice([-1.0, 1.0], size=(4, 4))
        patches.append(_unit(p))
    return common, patches


def make_finegrained(n_per_class=1000, n_test_per_class=1000, alpha=1.0, beta=4.0, hw=16,
                     seed=0, task=0, n_tasks=1, name="finegrained2") -> DatasetContainer:
    """Image-space version of the two-Gaussian toy task.

    ``x = y * alpha * patch + beta * common + N(0, I)`` with ``y = +-1``
    mapped to labels 1 / 0. The common pattern dominates, the discriminative
    patch is weak.
    """
    common, patches = finegrained_patterns(hw, n_tasks=max(n_tasks, task + 1))
    patch = patches[task]
    g = rngmod.stream(seed, "builtin", task)

    def draw(n):
        y = np.repeat([0, 1], n)
        sign = np.where(y == 1, 1.0, -1.0)
        x = sign[:, None, None] * alpha * patch + beta * common + g.normal(size=(2 * n, hw, hw))
        perm = g.permutation(2 * n)
        return x[perm, None].astype(np.float32), y[perm].astype(np.int64)

    xtr, ytr = draw(n_per_class)
    xte, yte = draw(n_test_per_class)
    return DatasetContainer(name, xtr, ytr, xte, yte, 2, source="builtin-toy",
                            meta={"alpha": alpha, "beta": beta, "hw": hw, "task": task})


def make_digits38(seed=0, test_fraction=0.3) -> DatasetContainer:
    """sklearn's bundled 8x8 digits restricted to {3, 8}, relabelled {0, 1}."""
    from sklearn.datasets import load_digits

    d = load_digits()
    keep = np.isin(d.target, (3, 8))
    x = (d.images[keep] / 16.0).astype(np.float32)[:, None]
    y = (d.target[keep] == 8).astype(np.int64)
    perm = rngmod.stream(seed, "builtin", 38).permutation(len(y))
    x, y = x[perm], y[perm]
    n_test = int(round(test_fraction * len(y)))
    return DatasetContainer("digits38", x[n_test:], y[n_test:], x[:n_test], y[:n_test], 2,
                            source="builtin-toy", meta={"original_classes": [3, 8]})


def mnist_dir():
    for cand in (os.environ.get("DCC_MNIST_DIR"), Path.home() / ".dcc" / "mnist"):
        if cand and Path(cand).is_dir() and _find(Path(cand), "train-images-idx3-ubyte"):
            return Path(cand)
    return None


def make_mnist38() -> DatasetContainer:
    """MNIST 3-vs-8 if idx files are available locally, else the 8x8 digits stand-in."""
    d = mnist_dir()
    if d is None:
        log.warning("MNIST idx files not found (set DCC_MNIST_DIR); using sklearn 8x8 digits 3-vs-8")
        return make_digits38()
    full = load_idx_dir(d)
    sub = subset_by_class(full, [3, 8], relabel=True)
    # pad 28 -> 32 so a depth-3 ConvNet divides evenly
    pad = ((0, 0), (0, 0), (2, 2), (2, 2))
    return replace(sub, name="mnist38", x_train=np.pad(sub.x_train, pad), x_test=np.pad(sub.x_test, pad))


BUILTINS = {
    "finegrained2": lambda **kw: make_finegrained(**kw),
    "digits38": lambda **kw: make_digits38(**kw),
    "mnist38": lambda **kw: make_mnist38(),
}


def load_dataset(path, format: str | None = None, standardize: bool = False, **kw) -> DatasetContainer:
    """Load by format tag: ``idx`` (directory of MNIST-style files), ``raw-f32``
    (manifest JSON) or ``builtin-toy`` (a name from :data:`BUILTINS`).

    Without a format, builtin names are recognised first, then a directory is
    read as idx and a ``.json`` path as raw-f32.
    """
    p = str(path)
    if format is None:
        if p in BUILTINS:
            format = "builtin-toy"
        elif Path(p).is_dir():
            format = "idx"
        elif p.endswith(".json"):
            format = "raw-f32"
        else:
            raise DataError(f"cannot infer dataset format for {p!r}")
    if format == "builtin-toy":
        if p not in BUILTINS:
            raise DataError(f"unknown builtin dataset {p!r}; have {sorted(BUILTINS)}")
        ds = BUILTINS[p](**kw)
    elif format == "idx":
        ds = load_idx_dir(p)
    elif format == "raw-f32":
        ds = load_raw_f32(p)
    else:
        raise DataError(f"unknown dataset format {format!r}")
    if standardize:
        ds = standardize_channels(ds)
    return ds


def standardize_channels(ds: DatasetContainer) -> DatasetContainer:
    mu = ds.x_train.mean(axis=(0, 2, 3), keepdims=True)
    sd = ds.x_train.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    return replace(ds, x_train=((ds.x_train - mu) / sd).astype(np.float32),
                   x_test=((ds.x_test - mu) / sd).astype(np.float32),
                   meta={**ds.meta, "mean": mu.ravel().tolist(), "std": sd.ravel().tolist()})


def subset_by_class(ds: DatasetContainer, classes, relabel: bool = True) -> DatasetContainer:
    classes = [int(c) for c in classes]
    missing = [c for c in classes if c < 0 or c >= ds.n_classes]
    if missing:
        raise DataError(f"classes {missing} do not exist in {ds.name}")
    tr = np.isin(ds.y_train, classes)
    te = np.isin(ds.y_test, classes)
    if not tr.any():
        raise DataError("subset_by_class: empty result")
    ytr, yte = ds.y_train[tr], ds.y_test[te]
    n_classes = ds.n_classes
    if relabel:
        lut = {c: i for i, c in enumerate(classes)}
        ytr = np.array([lut[int(v)] for v in ytr], dtype=np.int64)
        yte = np.array([lut[int(v)] for v in yte], dtype=np.int64)
        n_classes = len(classes)
    return replace(ds, x_train=ds.x_train[tr], y_train=ytr, x_test=ds.x_test[te], y_test=yte,
                   n_classes=n_classes, meta={**ds.meta, "classes": classes, "relabel": relabel})
