import gzip
import json
import struct

import numpy as np
import pytest

from dcc import augment as aug
from dcc import condenser as cd
from dcc import data, io, rng
from dcc.autodiff import Var


def _write_idx(path, arr):
    codes = {np.uint8: 0x08, np.float32: 0x0D}
    arr = np.asarray(arr)
    code = codes[arr.dtype.type]
    header = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    body = arr.astype(">f4" if code == 0x0D else np.uint8).tobytes()
    path.write_bytes(header + body)


@pytest.fixture
def idx_dir(tmp_path):
    r = np.random.default_rng(0)
    for split, n in (("train", 30), ("t10k", 12)):
        _write_idx(tmp_path / f"{split}-images-idx3-ubyte", r.integers(0, 256, size=(n, 28, 28), dtype=np.uint8))
        _write_idx(tmp_path / f"{split}-labels-idx1-ubyte", (np.arange(n) % 10).astype(np.uint8))
    return tmp_path


def test_idx_loading(idx_dir):
    ds = data.load_dataset(idx_dir, "idx")
    assert ds.image_shape == (28, 28, 1)
    assert ds.x_train.shape == (30, 1, 28, 28)
    assert 0.0 <= ds.x_train.min() and ds.x_train.max() <= 1.0
    assert ds.n_classes == 10 and ds.source == "idx"


def test_idx_gzip(idx_dir):
    p = idx_dir / "train-labels-idx1-ubyte"
    (idx_dir / "x.gz").write_bytes(gzip.compress(p.read_bytes()))
    np.testing.assert_array_equal(data.read_idx(idx_dir / "x.gz"), data.read_idx(p))


def test_idx_errors(idx_dir):
    p = idx_dir / "train-images-idx3-ubyte"
    raw = p.read_bytes()
    (idx_dir / "bad_magic").write_bytes(b"\x01\x02" + raw[2:])
    with pytest.raises(data.DataError):
        data.read_idx(idx_dir / "bad_magic")
    (idx_dir / "short").write_bytes(raw[:-10])
    with pytest.raises(data.DataError):
        data.read_idx(idx_dir / "short")


def test_raw_f32_round_trip_and_mismatch(tmp_path):
    ds = data.make_finegrained(n_per_class=5, n_test_per_class=3, hw=8)
    man = data.save_raw_f32(ds, tmp_path / "raw")
    back = data.load_dataset(man, "raw-f32")
    np.testing.assert_array_equal(back.x_train, ds.x_train)
    np.testing.assert_array_equal(back.y_test, ds.y_test)
    m = json.loads(man.read_text())
    m["splits"]["train"]["count"] += 1
    man.write_text(json.dumps(m))
    with pytest.raises(data.DataError):
        data.load_dataset(man, "raw-f32")


def test_label_out_of_range():
    x = np.zeros((2, 1, 4, 4), np.float32)
    with pytest.raises(data.DataError):
        data.DatasetContainer("bad", x, np.array([0, 2]), x, np.array([0, 1]), 2)


def test_finegrained_builtin_structure():
    ds = data.load_dataset("finegrained2", n_per_class=400, n_test_per_class=10)
    assert ds.image_shape == (16, 16, 1) and ds.n_classes == 2
    common, (patch,) = data.finegrained_patterns(16)
    x = ds.x_train[:, 0].reshape(len(ds.x_train), -1)
    c_amp = x @ common.ravel()
    p_amp = x @ patch.ravel()
    assert np.mean(c_amp) == pytest.approx(4.0, abs=0.15)
    sign = np.where(ds.y_train == 1, 1.0, -1.0)
    assert np.mean(sign * p_amp) == pytest.approx(1.0, abs=0.15)
    assert abs(common.ravel() @ patch.ravel()) < 0.5


def test_subset_by_class(idx_dir):
    ds = data.load_dataset(idx_dir, "idx")
    s = data.subset_by_class(ds, [3, 8], relabel=True)
    assert s.n_classes == 2 and set(s.y_train.tolist()) == {0, 1}
    keep = data.subset_by_class(ds, [3, 8], relabel=False)
    assert set(keep.y_train.tolist()) == {3, 8}
    twice = data.subset_by_class(data.subset_by_class(ds, [1, 3, 8], relabel=False), [3, 8], relabel=False)
    np.testing.assert_array_equal(twice.x_train, keep.x_train)
    with pytest.raises(data.DataError):
        data.subset_by_class(ds, [11])


def test_standardize():
    ds = data.load_dataset("digits38", standardize=True)
    assert abs(ds.x_train.mean()) < 1e-5
    assert ds.x_train.std() == pytest.approx(1.0, abs=1e-3)


def test_unknown_dataset():
    with pytest.raises(data.DataError):
        data.load_dataset("cifar10")


# rng -------------------------------------------------------------------------

def test_streams_independent():
    a = rng.stream(0, "batch").random(5)
    b = rng.stream(0, "batch").random(5)
    c = rng.stream(0, "augment").random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert rng.substream_seed(0, "model_init", 1) != rng.substream_seed(0, "model_init", 2)


# augmentation ----------------------------------------------------------------

def test_siamese_same_transform():
    r = np.random.default_rng(0)
    real = r.normal(size=(3, 1, 8, 8))
    for kind in aug.KINDS:
        p = aug.sample(np.random.default_rng(1), kind, (8, 8))
        a, b = aug.dsa_apply(real, real.copy(), p)
        np.testing.assert_array_equal(a.value, b.value)


def test_aug_validation():
    with pytest.raises(ValueError):
        aug.apply(Var(np.zeros((1, 1, 8, 8))), aug.AugParams("crop_shift", {"dy": 9, "dx": 0}))
    with pytest.raises(ValueError):
        aug.apply(Var(np.zeros((1, 1, 8, 8))), aug.AugParams("cutout", {"y0": 0, "x0": 0, "h": 6, "w": 1}))
    with pytest.raises(ValueError):
        aug.dsa_apply(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 6, 6)), aug.AugParams("flip", {"flip": True}))


def test_flip_and_shift_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(aug.apply(x, aug.AugParams("flip", {"flip": True})).value, x[..., ::-1])
    s = aug.apply(x, aug.AugParams("crop_shift", {"dy": 1, "dx": 0})).value
    np.testing.assert_array_equal(s[0, 0, 1:], x[0, 0, :-1])
    np.testing.assert_array_equal(s[0, 0, 0], 0.0)


# condensed-set artifacts -----------------------------------------------------

def _set():
    r = np.random.default_rng(0)
    return cd.SyntheticSet(r.normal(size=(4, 1, 8, 8)).astype(np.float32), cd.synthetic_labels(2, 2), 2, 2)


def test_condensed_round_trip_bit_exact(tmp_path):
    cfg = cd.CondenseConfig(ipc=2, seed=7)
    s = _set()
    io.save_condensed(s, tmp_path / "a.bin", cfg)
    back, man = io.load_condensed(tmp_path / "a.bin")
    assert back.images.tobytes() == s.images.tobytes()
    np.testing.assert_array_equal(back.labels, s.labels)
    assert man["config_hash"] == cfg.hash() and man["seed"] == 7 and man["shape"] == [4, 1, 8, 8]
    io.save_condensed(back, tmp_path / "b.bin", cd.CondenseConfig.from_dict(man["config"]))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_condensed_truncated(tmp_path):
    io.save_condensed(_set(), tmp_path / "a.bin")
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "a.bin").write_bytes(raw[:-3])
    with pytest.raises(io.ArtifactError):
        io.load_condensed(tmp_path / "a.bin")


def test_condensed_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.load_condensed(tmp_path / "none.bin")


def test_runlog_csv_round_trip(tmp_path):
    log = cd.RunLog()
    log.log_step(0, 0, "class_wise", 1.5, 3.25)
    log.log_step(0, 1, "class_collective", 0.1 + 0.2, 2.0)
    io.write_runlog_csv(log, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "outer,inner,mode,loss,wall_ms"
    rows = io.read_runlog_csv(tmp_path / "r.csv")
    assert rows[1]["loss"] == 0.1 + 0.2 and rows[1]["mode"] == "class_collective"


def test_gram_round_trip(tmp_path):
    log = cd.RunLog()
    K = np.arange(9.0).reshape(3, 3)
    log.grams += [(0, 0, 0, K), (10, 0, 10, 2 * K)]
    io.save_grams(log, tmp_path / "g.bin")
    back = io.load_grams(tmp_path / "g.bin")
    assert [g[0] for g in back.grams] == [0, 10]
    np.testing.assert_array_equal(back.grams[1][3], 2 * K)


def test_export_clip(tmp_path):
    s = _set()
    io.save_condensed(s, tmp_path / "a.bin", clip=(-0.5, 0.5))
    back, man = io.load_condensed(tmp_path / "a.bin")
    assert back.images.min() >= -0.5 and back.images.max() <= 0.5
    assert man["clip"] == [-0.5, 0.5]
    inside = np.abs(s.images) <= 0.5
    np.testing.assert_array_equal(back.images[inside], s.images[inside])
    io.save_condensed(back, tmp_path / "b.bin", clip=(-0.5, 0.5))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    with pytest.raises(ValueError):
        io.save_condensed(s, tmp_path / "c.bin", clip=(1.0, 0.0))
