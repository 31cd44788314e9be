import math

import numpy as np
import pytest

from dcc import autodiff as ad
from dcc import condenser as cd
from dcc import data, models
from dcc import evaluation as ev

SMALL = dict(n_models_per_set=2, epochs=20, batch_size=64, model_hyper={"width": 8, "depth": 1})


@pytest.fixture(scope="module")
def digits():
    return data.load_dataset("digits38")


@pytest.fixture(scope="module")
def fg():
    return data.make_finegrained(n_per_class=30, n_test_per_class=20, hw=8)


def test_protocol_defaults_and_lr():
    p = ev.EvalProtocol()
    assert (p.epochs, p.lr, p.momentum, p.weight_decay, p.n_models_per_set) == (300, 0.01, 0.9, 5e-4, 5)
    assert p.lr_at(149) == 0.01 and p.lr_at(150) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        ev.EvalProtocol(n_models_per_set=0)


def test_convnet_learns_digits(digits):
    # sanity floor for the from-scratch stack
    p = ev.EvalProtocol(epochs=20, batch_size=32, lr=0.05, model_hyper={"width": 16, "depth": 1})
    m = ev.train_classifier(digits.x_train, digits.y_train, 2, p, seed=0)
    assert ev.accuracy(m, digits.x_test, digits.y_test) >= 0.95


def test_evaluate_reports_spread_and_is_deterministic(fg):
    p = ev.EvalProtocol(**SMALL)
    s = ev.random_select(fg, 3, seed=0)
    a = ev.evaluate(s, fg, p)
    b = ev.evaluate(s, fg, p)
    assert a.accuracies == b.accuracies
    assert len(a.accuracies) == 2 and 0.0 <= a.mean <= 1.0
    assert not a.degenerate


def test_evaluate_thread_count_does_not_change_results(fg):
    s = ev.random_select(fg, 3, seed=0)
    a = ev.evaluate(s, fg, ev.EvalProtocol(**SMALL, threads=1))
    b = ev.evaluate(s, fg, ev.EvalProtocol(**SMALL, threads=2))
    assert a.accuracies == b.accuracies


def test_evaluate_flags_constant_set(fg, caplog):
    s = cd.SyntheticSet(np.zeros((4, 1, 8, 8), np.float32), cd.synthetic_labels(2, 2), 2, 2)
    r = ev.evaluate(s, fg, ev.EvalProtocol(**{**SMALL, "epochs": 1}))
    assert r.degenerate


def test_evaluate_errors(fg):
    s = ev.random_select(fg, 2)
    with pytest.raises(ValueError):
        ev.evaluate([s, s], fg, ev.EvalProtocol(**SMALL))
    empty = cd.SyntheticSet(np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64), 0, 2)
    with pytest.raises(ValueError):
        ev.evaluate(empty, fg, ev.EvalProtocol(**SMALL))


# selection baselines ---------------------------------------------------------

def test_random_select(fg):
    s = ev.random_select(fg, 4, seed=1)
    assert np.bincount(s.labels).tolist() == [4, 4]
    full = ev.random_select(fg, 30, seed=1)
    for c in range(2):
        got = np.sort(full.images[full.class_slice(c)].reshape(30, -1), axis=0)
        want = np.sort(fg.x_train[fg.y_train == c].reshape(30, -1), axis=0)
        np.testing.assert_array_equal(got, want)
    other = ev.random_select(fg, 4, seed=2)
    assert not np.array_equal(s.images, other.images)
    with pytest.raises(ValueError):
        ev.random_select(fg, 31)


def test_el2n_and_grand_properties(fg):
    sc = ev.grand_el2n_scores(fg, n_models=1, protocol=ev.EvalProtocol(**SMALL), epochs=1)
    assert sc["el2n"].shape == (60,) and sc["grand"].shape == (60,)
    assert np.all(sc["el2n"] >= 0) and np.all(sc["el2n"] <= math.sqrt(2) + 1e-9)
    assert np.all(sc["grand"] >= 0)


def test_el2n_grand_equal_for_duplicates():
    x = np.zeros((4, 1, 8, 8), np.float32)
    x[2:] = 1.0
    x[3] = x[2]
    ds = data.DatasetContainer("dup", x, np.array([0, 0, 1, 1]), x, np.array([0, 0, 1, 1]), 2)
    sc = ev.grand_el2n_scores(ds, n_models=1, protocol=ev.EvalProtocol(**SMALL), epochs=0)
    assert sc["el2n"][2] == sc["el2n"][3] and sc["grand"][2] == sc["grand"][3]


def test_select_by_score(fg):
    scores = np.arange(60, dtype=float)
    s = ev.select_by_score(fg, scores, 2)
    idx0 = np.flatnonzero(fg.y_train == 0)[:2]
    np.testing.assert_array_equal(s.images[s.class_slice(0)], fg.x_train[idx0])


# NTK diagnostics -------------------------------------------------------------

def test_ntk_gram_properties():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(5, 1, 4, 4))
    K = ev.ntk_gram(lambda v: ad.sum(ad.square(v)), S)
    np.testing.assert_allclose(K, K.T)
    assert np.all(np.diag(K) >= 0)
    np.testing.assert_allclose(K, 4 * S.reshape(5, -1) @ S.reshape(5, -1).T, rtol=1e-10)
    # a loss of the batch mean only gives identical per-sample gradients
    K1 = ev.ntk_gram(lambda v: ad.square(ad.sum(v)), S)
    assert np.linalg.matrix_rank(K1, tol=1e-8 * np.abs(K1).max()) == 1


def test_ntk_velocity_cases():
    K = np.array([[2.0, 1.0], [1.0, 3.0]])
    np.testing.assert_allclose(ev.ntk_velocity([K, K, 5 * K]), [0.0, 0.0], atol=1e-15)
    v = ev.ntk_velocity([np.eye(2), np.array([[0.0, 1.0], [1.0, 0.0]])])
    assert v[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ev.ntk_velocity([K])
    with pytest.raises(ValueError):
        ev.ntk_velocity([K, np.zeros((2, 2))])


def test_reinit_peaks_bookkeeping():
    I = np.eye(2)
    R = np.array([[1.0, 0.9], [0.9, 1.0]])
    series = ev.GramSeries([(0, I), (1, I * 1.01 + 0.01), (2, I), (3, R), (4, R)], [0, 0, 0, 1, 1])
    series.velocities = list(ev.ntk_velocity(series))
    (p,) = ev.reinit_peaks(series)
    assert p["outer"] == 1
    assert p["peak"] == pytest.approx(series.velocities[2])
    assert p["baseline"] == pytest.approx(np.median(series.velocities[:2]))


def test_gram_series_from_condense(fg):
    cfg = cd.CondenseConfig(K_o=2, gamma_o=0, K_i=2, T=2, ipc=1, model_hyper={"width": 4, "depth": 1},
                            real_batch_per_class=8, gram_every=1)
    _, log = cd.condense(fg, cfg)
    series = ev.GramSeries.from_runlog(log)
    assert len(series.velocities) == len(series.snapshots) - 1
    assert len(ev.reinit_peaks(series)) == 1


# representation metrics ------------------------------------------------------

def test_alignment_uniformity_oracles():
    f = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    a, u = ev.alignment_uniformity(f, [0, 0, 0])
    assert (a, u) == (0.0, 0.0)
    f = np.array([[1.0, 0.0], [-1.0, 0.0]])
    a, u = ev.alignment_uniformity(np.vstack([f, f]), [0, 1, 0, 1])
    # pairs: 2 identical (d=0), 4 antipodal (d^2=4)
    assert a == 0.0
    assert u == pytest.approx(math.log((2 + 4 * math.exp(-8)) / 6))
    a2, _ = ev.alignment_uniformity(np.array([[1.0, 0], [-1.0, 0]]), [0, 0])
    assert a2 == pytest.approx(4.0)


def test_alignment_uniformity_scale_invariant_and_errors():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(6, 3))
    y = [0, 0, 0, 1, 1, 1]
    assert ev.alignment_uniformity(f, y) == pytest.approx(ev.alignment_uniformity(7 * f, y))
    with pytest.raises(ValueError):
        ev.alignment_uniformity(f[:1], [0])
    with pytest.raises(ValueError):
        ev.alignment_uniformity(f[:3], [0, 0, 1])


def test_extract_features_shape(fg):
    m = models.build("convnet", {"in_shape": [1, 8, 8], "width": 4, "depth": 1, "classes": 2})
    assert ev.extract_features(m, fg.x_test).shape == (40, 4 * 4 * 4)


# continual -------------------------------------------------------------------

def _tasks(k=2):
    return [data.make_finegrained(n_per_class=20, n_test_per_class=10, hw=8, seed=s) for s in range(k)]


def test_single_task_continual_equals_plain_training():
    (t,) = _tasks(1)
    p = ev.EvalProtocol(**SMALL)
    cfg = ev.ContinualConfig([t], memory_per_class=5, epochs_per_task=3, protocol=p, seed=4)
    res = ev.continual_run(cfg)
    from dcc import rng
    m = ev.new_classifier(p, t.x_train.shape[1:], 2, rng.substream_seed(4, "model_init"))
    m = ev.train_classifier(t.x_train, t.y_train, 2, p, rng.substream_seed(4, "batch", 0), model=m, epochs=3)
    assert res.stage_avg == [ev.accuracy(m, t.x_test, t.y_test)]


def test_continual_ring_buffer_memory_sizes():
    cfg = ev.ContinualConfig(_tasks(3), memory_per_class=4, epochs_per_task=1, protocol=ev.EvalProtocol(**SMALL))
    res = ev.continual_run(cfg)
    assert res.memory_sizes == [8, 16, 16]
    assert [len(r) for r in res.acc_matrix] == [1, 2, 3]


def test_continual_condensed_builder_runs():
    cc = cd.CondenseConfig(K_o=1, gamma_o=0, K_i=1, T=1, model_hyper={"width": 4, "depth": 1},
                           real_batch_per_class=8)
    cfg = ev.ContinualConfig(_tasks(2), memory_per_class=2, builder="condensed", epochs_per_task=1,
                             protocol=ev.EvalProtocol(**SMALL), condense_cfg=cc, eval_scope="task")
    res = ev.continual_run(cfg)
    assert res.memory_sizes == [4, 4]


def test_continual_validation():
    with pytest.raises(ValueError):
        ev.ContinualConfig(_tasks(1), builder="reservoir")
    with pytest.raises(ValueError):
        ev.ContinualConfig(_tasks(1), memory_per_class=50)
    with pytest.raises(ValueError):
        ev.ContinualConfig([])


def test_replay_batches_reach_the_model():
    # new data holds only class 0; the replayed memory is the only class-1 signal
    t = data.make_finegrained(n_per_class=20, n_test_per_class=10, hw=8, seed=0)
    x0 = t.x_train[t.y_train == 0]
    x1 = t.x_train[t.y_train == 1][:5]
    p = ev.EvalProtocol(**{**SMALL, "epochs": 10})
    plain = ev.train_classifier(x0, np.zeros(len(x0), np.int64), 2, p, seed=0)
    mixed = ev.train_classifier(x0, np.zeros(len(x0), np.int64), 2, p, seed=0,
                                replay=(x1, np.ones(len(x1), np.int64)))
    assert ev.accuracy(plain, x1, np.ones(5)) == 0.0
    assert ev.accuracy(mixed, x1, np.ones(5)) == 1.0
    empty = ev.train_classifier(x0, np.zeros(len(x0), np.int64), 2, p, seed=0,
                                replay=(x1[:0], np.zeros(0, np.int64)))
    assert all(np.array_equal(a.value, b.value) for a, b in zip(plain.params, empty.params))
