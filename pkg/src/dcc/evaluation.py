"""Measuring condensed sets: accuracy protocol, selection baselines, NTK and
representation diagnostics, and continual learning with replay memories."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import augment as aug
from . import autodiff as ad
from . import condenser as cd
from . import models
from . import rng as rngmod
from .autodiff import Var
from .condenser import SyntheticSet
from .data import DatasetContainer

log = logging.getLogger(__name__)

THREADS_ENV = "DCC_THREADS"


def n_threads(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


# training from scratch -------------------------------------------------------

@dataclass
class EvalProtocol:
    n_synthetic_sets: int = 1
    n_models_per_set: int = 5
    epochs: int = 300
    lr: float = 0.01
    lr_decay_epochs: tuple = ()  # epochs at which lr is divided by 10; () means halfway
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    augment: bool = False
    aug_kinds: tuple = ("crop_shift", "scale", "flip")
    seed_base: int = 0
    model_kind: str = "convnet"
    model_hyper: dict = field(default_factory=lambda: {"width": 128, "depth": 3})
    threads: int | None = None

    def __post_init__(self):
        if self.n_synthetic_sets < 1 or self.n_models_per_set < 1:
            raise ValueError("EvalProtocol needs at least one set and one model per set")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("EvalProtocol: epochs >= 0, batch_size >= 1, lr >= 0 required")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.aug_kinds = tuple(self.aug_kinds)

    @property
    def total_runs(self) -> int:
        return self.n_synthetic_sets * self.n_models_per_set

    def lr_at(self, epoch: int) -> float:
        steps = self.lr_decay_epochs or (self.epochs // 2,)
        return self.lr * 0.1 ** sum(epoch >= e for e in steps if e > 0)

    def to_dict(self):
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["aug_kinds"] = list(self.aug_kinds)
        return d


@dataclass
class EvalResult:
    mean: float
    std: float
    accuracies: list
    degenerate: bool = False


def _hyper_for(protocol: EvalProtocol, in_shape, n_classes) -> dict:
    hyper = dict(protocol.model_hyper)
    hyper["classes"] = n_classes
    if protocol.model_kind == "convnet":
        hyper["in_shape"] = list(in_shape)
    else:
        hyper["in_dim"] = int(np.prod(in_shape))
    return hyper


def new_classifier(protocol: EvalProtocol, in_shape, n_classes, seed: int) -> models.Model:
    return models.build(protocol.model_kind, _hyper_for(protocol, in_shape, n_classes),
                        models.InitSpec(seed=seed))


def train_classifier(x, y, n_classes: int, protocol: EvalProtocol, seed: int = 0,
                     model: models.Model | None = None, epochs: int | None = None,
                     replay: tuple | None = None) -> models.Model:
    """SGD with momentum and weight decay; lr drops by 10x at the decay epochs.

    ``replay=(mx, my)`` appends a batch drawn from that memory to every
    minibatch (experience replay), as many samples as the minibatch holds.
    """
    x = np.asarray(x, np.float32)
    y = np.asarray(y, np.int64)
    if replay is not None and len(replay[1]) == 0:
        replay = None
    if replay is not None:
        mx, my = np.asarray(replay[0], np.float32), np.asarray(replay[1], np.int64)
        mem_rng = rngmod.stream(seed, "memory")
    if model is None:
        model = new_classifier(protocol, x.shape[1:], n_classes, rngmod.substream_seed(seed, "model_init"))
    order_rng = rngmod.stream(seed, "batch")
    aug_rng = rngmod.stream(seed, "augment")
    state = None
    n = len(y)
    bs = min(protocol.batch_size, n)
    for ep in range(protocol.epochs if epochs is None else epochs):
        lr = protocol.lr_at(ep)
        perm = order_rng.permutation(n)
        for start in range(0, n, bs):
            sel = perm[start:start + bs]
            xs, ys = x[sel], y[sel]
            if replay is not None:
                pick = mem_rng.choice(len(my), size=len(sel), replace=len(sel) > len(my))
                xs, ys = np.concatenate([xs, mx[pick]]), np.concatenate([ys, my[pick]])
            xb = Var(xs)
            if protocol.augment:
                for p in aug.sample_chain(aug_rng, protocol.aug_kinds, x.shape[2:]):
                    xb = aug.apply(xb, p)
            loss = ad.cross_entropy(models.forward(model, xb), ys)
            grads = ad.grad(loss, model.params)
            state = models.sgd_step(model, grads, lr, protocol.momentum, state, protocol.weight_decay)
    return model


def predict(model: models.Model, x, batch: int = 512) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(x), batch):
            out.append(models.forward(model, x[start:start + batch]).value)
    return np.concatenate(out) if out else np.zeros((0, 0))


def accuracy(model: models.Model, x, y, classes=None) -> float:
    """Top-1 accuracy; ``classes`` restricts the argmax to a label subset."""
    logits = predict(model, np.asarray(x, np.float32))
    if classes is not None:
        classes = np.asarray(sorted(classes))
        pred = classes[np.argmax(logits[:, classes], axis=1)]
    else:
        pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == np.asarray(y)))


def _test_split(test):
    if isinstance(test, DatasetContainer):
        return test.x_test, test.y_test
    x, y = test
    return np.asarray(x, np.float32), np.asarray(y, np.int64)


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate(synthetic, test, protocol: EvalProtocol | None = None) -> EvalResult:
    """Train fresh models on the synthetic set(s) only and test them.

    ``synthetic`` is one :class:`SyntheticSet` (reused for every set slot) or a
    list with ``protocol.n_synthetic_sets`` entries. Runs are independent, each
    with its own seed derived from ``seed_base``, so results do not depend on
    the thread count.
    """
    protocol = protocol or EvalProtocol()
    sets = synthetic if isinstance(synthetic, (list, tuple)) else [synthetic] * protocol.n_synthetic_sets
    if len(sets) != protocol.n_synthetic_sets:
        raise ValueError(f"expected {protocol.n_synthetic_sets} synthetic sets, got {len(sets)}")
    for s in sets:
        if len(s) == 0:
            raise ValueError("evaluate: synthetic set is empty")
    degenerate = any(float(np.ptp(s.images)) == 0.0 for s in sets)
    if degenerate:
        log.warning("evaluate: synthetic set has constant pixels; results are chance-level by construction")
    xt, yt = _test_split(test)
    jobs = [(i, j) for i in range(len(sets)) for j in range(protocol.n_models_per_set)]

    def run(job):
        i, j = job
        s = sets[i]
        seed = rngmod.substream_seed(protocol.seed_base, "eval", i, j)
        model = train_classifier(s.images, s.labels, s.n_classes, protocol, seed)
        return accuracy(model, xt, yt)

    accs = _map(run, jobs, protocol.threads or n_threads())
    return EvalResult(float(np.mean(accs)), float(np.std(accs)), accs, degenerate)


# selection baselines ---------------------------------------------------------

def _as_synthetic(dataset, idx_per_class, ipc):
    idx = np.concatenate(idx_per_class)
    return SyntheticSet(dataset.x_train[idx].astype(np.float32).copy(),
                        cd.synthetic_labels(dataset.n_classes, ipc), ipc, dataset.n_classes)


def random_select(dataset: DatasetContainer, ipc: int, seed: int = 0) -> SyntheticSet:
    rng = rngmod.stream(seed, "select")
    picks = []
    for c, idx in sorted(dataset.class_index("train").items()):
        if len(idx) < ipc:
            raise ValueError(f"class {c} has {len(idx)} images, fewer than ipc={ipc}")
        picks.append(np.sort(rng.choice(idx, size=ipc, replace=False)))
    return _as_synthetic(dataset, picks, ipc)


def grand_el2n_scores(dataset: DatasetContainer, n_models: int = 3, protocol: EvalProtocol | None = None,
                      epochs: int = 2, seed: int = 0) -> dict:
    """Per-sample GraNd and EL2N scores averaged over briefly trained models.

    GraNd is the norm of the per-sample cross-entropy gradient over all
    parameters; EL2N is ``||softmax(logits) - onehot||_2``.
    """
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    protocol = protocol or EvalProtocol()
    x, y = dataset.x_train, dataset.y_train
    grand = np.zeros(len(y))
    el2n = np.zeros(len(y))
    for m in range(n_models):
        s = rngmod.substream_seed(seed, "select", m)
        model = train_classifier(x, y, dataset.n_classes, protocol, s, epochs=epochs)
        logits = predict(model, x)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.eye(dataset.n_classes)[y]
        el2n += np.linalg.norm(p - onehot, axis=1)
        for i in range(len(y)):
            loss = ad.cross_entropy(models.forward(model, x[i:i + 1]), y[i:i + 1])
            gs = ad.grad(loss, model.params)
            grand[i] += np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in gs))
    return {"grand": grand / n_models, "el2n": el2n / n_models}


def select_by_score(dataset: DatasetContainer, scores, ipc: int, lowest: bool = True) -> SyntheticSet:
    """Keep ``ipc`` samples per class with the lowest (most typical) scores."""
    scores = np.asarray(scores)
    picks = []
    for c, idx in sorted(dataset.class_index("train").items()):
        if len(idx) < ipc:
            raise ValueError(f"class {c} has {len(idx)} images, fewer than ipc={ipc}")
        order = np.argsort(scores[idx] if lowest else -scores[idx], kind="stable")
        picks.append(idx[order[:ipc]])
    return _as_synthetic(dataset, picks, ipc)


# NTK diagnostics -------------------------------------------------------------

def ntk_gram(loss_fn, images) -> np.ndarray:
    """``K[i, j] = <dL/ds_i, dL/ds_j>`` for a matching loss ``loss_fn(S_var)``."""
    S = Var(np.asarray(images), requires_grad=True)
    (g,) = ad.grad(loss_fn(S), [S])
    return cd.gram_from_grad(g)


@dataclass
class GramSeries:
    snapshots: list = field(default_factory=list)  # (step, K)
    outers: list = field(default_factory=list)
    velocities: list = field(default_factory=list)

    @classmethod
    def from_runlog(cls, runlog) -> "GramSeries":
        series = cls([(s, K) for s, _, _, K in runlog.grams], [o for _, o, _, _ in runlog.grams])
        if len(series.snapshots) >= 2:
            series.velocities = list(ntk_velocity(series))
        return series


def _frob_cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("ntk_velocity: zero-norm Gram matrix")
    return float(np.sum(a * b) / (na * nb))


def ntk_velocity(series) -> np.ndarray:
    """``v_t = 1 - cos_F(K_t, K_{t+1})`` for consecutive snapshots."""
    snaps = series.snapshots if isinstance(series, GramSeries) else series
    Ks = [s[1] if isinstance(s, tuple) else s for s in snaps]
    if len(Ks) < 2:
        raise ValueError("ntk_velocity needs at least two snapshots")
    return np.array([1.0 - _frob_cos(Ks[t], Ks[t + 1]) for t in range(len(Ks) - 1)])


def reinit_peaks(series: GramSeries) -> list[dict]:
    """Velocity entering each re-initialised outer loop vs the previous loop.

    For every outer loop ``o >= 1`` the peak is the velocity between the last
    snapshot of loop ``o-1`` and the first one of loop ``o``; the baseline is
    the median velocity between snapshots that both lie in loop ``o-1``.
    """
    v = series.velocities or list(ntk_velocity(series))
    out = []
    outers = series.outers
    for t in range(len(v)):
        if outers[t + 1] != outers[t]:
            prev = outers[t]
            inside = [v[u] for u in range(len(v)) if outers[u] == prev and outers[u + 1] == prev]
            base = float(np.median(inside)) if inside else float("nan")
            out.append({"outer": outers[t + 1], "peak": float(v[t]), "baseline": base,
                        "ratio": float(v[t] / base) if inside and base > 0 else float("inf")})
    return out


# representation metrics ------------------------------------------------------

def alignment_uniformity(features, labels, normalize: bool = True, alpha: float = 2.0, t: float = 2.0):
    """Alignment (same-class pairs) and uniformity (all pairs) losses.

    ``align = mean ||f_i - f_j||^alpha`` over same-class pairs ``i < j``;
    ``uniform = log mean exp(-t ||f_i - f_j||^2)`` over all pairs ``i < j``.
    """
    f = np.asarray(features, np.float64).reshape(len(features), -1)
    labels = np.asarray(labels)
    if normalize:
        n = np.linalg.norm(f, axis=1, keepdims=True)
        f = f / np.where(n > 0, n, 1.0)
    sq = np.maximum(((f[:, None, :] - f[None, :, :]) ** 2).sum(-1), 0.0)
    iu = np.triu_indices(len(f), k=1)
    if len(iu[0]) == 0:
        raise ValueError("alignment_uniformity needs at least two samples")
    same = labels[iu[0]] == labels[iu[1]]
    for c in np.unique(labels):
        if np.sum(labels == c) < 2:
            raise ValueError(f"alignment_uniformity: class {c} has a single sample")
    align = float(np.mean(sq[iu][same] ** (alpha / 2.0)))
    e = -t * sq[iu]
    m = e.max()
    uniform = float(m + np.log(np.mean(np.exp(e - m))))
    return align, uniform


def extract_features(model: models.Model, x, batch: int = 512) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(x), batch):
            out.append(models.features(model, np.asarray(x[start:start + batch], np.float32)).value)
    return np.concatenate(out)


# continual learning ----------------------------------------------------------

@dataclass
class ContinualConfig:
    tasks: list  # DatasetContainers, each with task-local labels 0..C_t-1
    memory_per_class: int = 10
    builder: str = "ring_buffer"  # or "condensed"
    epochs_per_task: int = 20
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    condense_cfg: cd.CondenseConfig | None = None
    eval_scope: str = "all"  # "all": argmax over seen classes; "task": within the task's classes
    seed: int = 0

    def __post_init__(self):
        if len(self.tasks) < 1:
            raise ValueError("continual run needs at least one task")
        if self.builder not in ("ring_buffer", "condensed"):
            raise ValueError(f"unknown memory builder {self.builder!r}")
        if self.eval_scope not in ("all", "task"):
            raise ValueError(f"unknown eval_scope {self.eval_scope!r}")
        if self.memory_per_class < 0:
            raise ValueError("memory_per_class must be >= 0")
        for t in self.tasks:
            small = [c for c, n in enumerate(t.class_counts("train")) if n < self.memory_per_class]
            if small:
                raise ValueError(f"task {t.name}: classes {small} smaller than the memory budget")


@dataclass
class ContinualResult:
    stage_avg: list  # average accuracy over seen tasks after each stage
    acc_matrix: list  # acc_matrix[stage][task]
    memory_sizes: list


def _build_memory(task: DatasetContainer, cfg: ContinualConfig, stage: int):
    k = cfg.memory_per_class
    if k == 0:
        return np.zeros((0,) + task.x_train.shape[1:], np.float32), np.zeros(0, np.int64)
    if cfg.builder == "ring_buffer":
        s = random_select(task, k, rngmod.substream_seed(cfg.seed, "select", stage))
    else:
        base = cfg.condense_cfg or cd.CondenseConfig()
        ccfg = cd.CondenseConfig.from_dict({**base.to_dict(), "ipc": k,
                                            "seed": rngmod.substream_seed(cfg.seed, "synthetic_init", stage)})
        s, _ = cd.condense(task, ccfg)
    return s.images.astype(np.float32), s.labels.astype(np.int64)


def continual_run(cfg: ContinualConfig) -> ContinualResult:
    """Class-incremental training over the task sequence with a replay memory.

    Task ``t`` classes occupy global labels ``offset_t .. offset_t + C_t - 1``
    of one shared head sized for all tasks. After each task its memory is
    built; while later tasks train, every minibatch of new data is paired
    with an equally sized batch drawn from the memory.
    """
    offsets = np.cumsum([0] + [t.n_classes for t in cfg.tasks])
    total = int(offsets[-1])
    shapes = {t.x_train.shape[1:] for t in cfg.tasks}
    if len(shapes) != 1:
        raise ValueError(f"tasks must share one input shape, got {shapes}")
    in_shape = shapes.pop()
    model = new_classifier(cfg.protocol, in_shape, total, rngmod.substream_seed(cfg.seed, "model_init"))
    mem_x = np.zeros((0,) + in_shape, np.float32)
    mem_y = np.zeros(0, np.int64)
    stage_avg, matrix, sizes = [], [], []
    for t, task in enumerate(cfg.tasks):
        model = train_classifier(task.x_train, task.y_train + offsets[t], total, cfg.protocol,
                                 rngmod.substream_seed(cfg.seed, "batch", t), model=model,
                                 epochs=cfg.epochs_per_task, replay=(mem_x, mem_y))
        row = []
        for u in range(t + 1):
            prev = cfg.tasks[u]
            scope = range(offsets[u], offsets[u + 1]) if cfg.eval_scope == "task" else range(offsets[t + 1])
            row.append(accuracy(model, prev.x_test, prev.y_test + offsets[u], classes=list(scope)))
        matrix.append(row)
        stage_avg.append(float(np.mean(row)))
        if t < len(cfg.tasks) - 1:
            bx, by = _build_memory(task, cfg, t)
            mem_x = np.concatenate([mem_x, bx])
            mem_y = np.concatenate([mem_y, by + offsets[t]])
        sizes.append(len(mem_y))
    return ContinualResult(stage_avg, matrix, sizes)
