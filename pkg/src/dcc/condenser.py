"""Gradient-matching dataset condensation.

Two matching objectives share one implementation:

* class-wise: ``sum_c D(g(X_c), g(S_c))``
* class-collective: ``D(sum_c g(X_c), sum_c g(S_c))``

where ``g(.)`` is the mean loss gradient of a class batch with respect to the
model parameters. Both are special cases of grouped matching (singleton groups
vs one group of all classes); arbitrary class groups are available as an
option for many-class problems.

The synthetic set and the model are optimised alternately, with the model
re-initialised at the start of every outer loop, and an optional warm-up
schedule that falls back to class-wise matching early on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import augment as aug
from . import autodiff as ad
from . import models
from . import rng as rngmod
from .autodiff import Var

log = logging.getLogger(__name__)

CLASS_WISE = "class_wise"
CLASS_COLLECTIVE = "class_collective"
_MODE_ALIASES = {"class_wise": CLASS_WISE, "classwise": CLASS_WISE, "dc": CLASS_WISE, "wise": CLASS_WISE,
                 "class_collective": CLASS_COLLECTIVE, "collective": CLASS_COLLECTIVE, "dcc": CLASS_COLLECTIVE}


class NumericalError(FloatingPointError):
    """A non-finite loss or pixel value appeared during condensation."""


@dataclass
class CondenseConfig:
    """All knobs of a condensation run.

    ``K_o`` outer loops (model re-initialisations), ``T`` model-training
    stages per outer loop, ``K_i`` synthetic-set updates per stage.
    ``gamma_o`` / ``gamma_i`` are the outer / inner warm-up thresholds, the
    inner index counting synthetic updates since the last re-initialisation.
    ``tau`` is recorded for completeness and not used by the algorithm.
    """

    matching_mode: str = CLASS_COLLECTIVE
    warmup: str = "bilevel"  # none | simple | bilevel
    warmup_combine: str = "or"  # or | and
    K_o: int = 1000
    K_i: int = 10
    T: int = 5
    gamma_o: int = 250
    gamma_i: int = 10
    tau: float = 0.1
    lr_synthetic: float = 0.1
    momentum_synthetic: float = 0.5
    lr_model: float = 0.01
    momentum_model: float = 0.5
    model_batch: int = 256
    real_batch_per_class: int = 256
    distance: str = "layerwise_cosine"  # layerwise_cosine | l2
    loss: str = "cross_entropy"  # cross_entropy | hinge
    augment: bool = False
    aug_kinds: tuple = ("crop_shift", "cutout", "flip", "scale", "brightness")
    ipc: int = 1
    init: str = "real_sample"  # real_sample | gaussian_noise
    model_kind: str = "convnet"
    model_hyper: dict = field(default_factory=lambda: {"width": 128, "depth": 3})
    class_groups: list | None = None
    gram_every: int = 10
    gram_max: int = 500
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.matching_mode = normalize_mode(self.matching_mode)
        for name in ("K_o", "K_i", "T", "gamma_o", "gamma_i", "ipc", "real_batch_per_class", "model_batch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma_o > self.K_o:
            raise ValueError("gamma_o must not exceed K_o")
        if self.warmup not in ("none", "simple", "bilevel"):
            raise ValueError(f"unknown warmup {self.warmup!r}")
        if self.warmup_combine not in ("or", "and"):
            raise ValueError(f"unknown warmup_combine {self.warmup_combine!r}")
        if self.distance not in ("layerwise_cosine", "l2"):
            raise ValueError(f"unknown distance {self.distance!r}")
        self.aug_kinds = tuple(self.aug_kinds)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["aug_kinds"] = list(self.aug_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CondenseConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown CondenseConfig fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode.lower()]
    except KeyError:
        raise ValueError(f"unknown matching mode {mode!r}") from None


@dataclass
class SyntheticSet:
    images: np.ndarray  # (C * ipc, ch, H, W), class-major
    labels: np.ndarray
    ipc: int
    n_classes: int

    def class_slice(self, c: int) -> slice:
        return slice(c * self.ipc, (c + 1) * self.ipc)

    def __len__(self):
        return len(self.labels)


def synthetic_labels(n_classes: int, ipc: int) -> np.ndarray:
    return np.repeat(np.arange(n_classes), ipc).astype(np.int64)


def init_synthetic(dataset, ipc: int, strategy: str = "real_sample", seed: int = 0,
                   rng: np.random.Generator | None = None) -> SyntheticSet:
    rng = rng or rngmod.stream(seed, "synthetic_init")
    C = dataset.n_classes
    shape = dataset.x_train.shape[1:]
    if strategy == "real_sample":
        idx = dataset.class_index("train")
        imgs = []
        for c in range(C):
            if len(idx[c]) < ipc:
                raise ValueError(f"class {c} has {len(idx[c])} images, fewer than ipc={ipc}")
            imgs.append(dataset.x_train[rng.choice(idx[c], size=ipc, replace=False)])
        images = np.concatenate(imgs).astype(np.float32)
    elif strategy == "gaussian_noise":
        images = (0.1 * rng.standard_normal((C * ipc,) + shape)).astype(np.float32)
    else:
        raise ValueError(f"unknown synthetic init strategy {strategy!r}")
    return SyntheticSet(images, synthetic_labels(C, ipc), ipc, C)


# distances -------------------------------------------------------------------

def _as_var(g):
    if isinstance(g, tuple):
        g = g[1]
    return g if isinstance(g, Var) else Var(g)


def _slices(g: Var) -> Var:
    if g.ndim <= 1:
        return ad.reshape(g, (1, g.size))
    return ad.reshape(g, (g.shape[0], -1))


def gradient_distance(gX, gS, kind: str = "layerwise_cosine") -> Var:
    """Distance between two aligned lists of per-layer gradients.

    ``layerwise_cosine`` sums ``1 - cos`` over output slices of every layer
    (1-D parameters form a single slice); a slice with zero norm on either
    side contributes exactly 1. ``l2`` sums per-layer Euclidean norms of the
    difference.
    """
    gX, gS = list(gX), list(gS)
    if len(gX) != len(gS):
        raise ValueError(f"gradient lists differ in length ({len(gX)} vs {len(gS)})")
    total = None
    for a, b in zip(gX, gS):
        a, b = _as_var(a), _as_var(b)
        if a.shape != b.shape:
            raise ValueError(f"layer gradient shapes differ: {a.shape} vs {b.shape}")
        if kind == "l2":
            term = ad.l2norm(ad.sub(a, b))
        elif kind == "layerwise_cosine":
            term = _cosine_term(_slices(a), _slices(b))
        else:
            raise ValueError(f"unknown distance {kind!r}")
        total = term if total is None else ad.add(total, term)
    return total


def _cosine_term(a: Var, b: Var) -> Var:
    na_v = np.sqrt((a.value * a.value).sum(axis=1))
    nb_v = np.sqrt((b.value * b.value).sum(axis=1))
    dead = (na_v == 0) | (nb_v == 0)
    n_dead = int(dead.sum())
    if n_dead:
        log.warning("gradient_distance: %d zero-norm slice(s) scored as distance 1", n_dead)
        if n_dead == len(dead):
            return Var(np.asarray(float(n_dead), dtype=a.value.dtype))
        keep = np.flatnonzero(~dead)
        a, b = ad.take(a, keep), ad.take(b, keep)
    dots = ad.sum(ad.mul(a, b), axis=1)
    na = ad.sqrt(ad.sum(ad.square(a), axis=1))
    nb = ad.sqrt(ad.sum(ad.square(b), axis=1))
    cos = ad.div(dots, ad.mul(na, nb))
    term = ad.sum(ad.sub(1.0, cos))
    return ad.add(term, float(n_dead)) if n_dead else term


# matching losses -------------------------------------------------------------

def _loss_fn(kind, logits, labels):
    if kind == "hinge":
        y = np.where(np.asarray(labels) == 1, 1.0, -1.0)
        return ad.hinge(logits, y)
    return ad.cross_entropy(logits, labels)


def class_gradient(model, batch, label: int, loss: str = "cross_entropy", create_graph: bool = False):
    """Mean loss gradient of one class batch with respect to every parameter."""
    if batch.shape[0] == 0:
        raise ValueError(f"class {label} has an empty batch")
    logits = models.forward(model, batch)
    value = _loss_fn(loss, logits, np.full(batch.shape[0], label))
    return ad.grad(value, model.params, create_graph=create_graph)


def _sum_grads(gs):
    out = list(gs[0])
    for g in gs[1:]:
        out = [ad.add(x, y) if isinstance(x, Var) else x + y for x, y in zip(out, g)]
    return out


def _synthetic_var(synthetic) -> Var:
    if isinstance(synthetic, Var):
        return synthetic
    if isinstance(synthetic, SyntheticSet):
        return Var(synthetic.images, requires_grad=True)
    raise TypeError("synthetic must be a Var of images or a SyntheticSet")


def grouped_matching_loss(real, images: Var, labels, model, groups, distance="layerwise_cosine",
                          loss="cross_entropy", aug_params=None) -> Var:
    """``sum_groups D(sum_{c in group} g(X_c), sum_{c in group} g(S_c))``.

    ``real`` maps class id to a real image batch (treated as constant).
    ``aug_params`` optionally maps class id to the augmentation applied to
    that class's real and synthetic batches.
    """
    labels = np.asarray(labels)
    gX, gS = {}, {}
    for group in groups:
        for c in group:
            if c in gX:
                continue
            xb = real.get(c) if hasattr(real, "get") else real[c]
            if xb is None or len(xb) == 0:
                raise ValueError(f"class {c} has no real examples")
            sb = ad.take(images, np.flatnonzero(labels == c))
            if sb.shape[0] == 0:
                raise ValueError(f"class {c} has no synthetic examples")
            xv = Var(np.asarray(xb), dtype=images.dtype)
            if aug_params is not None and aug_params.get(c) is not None:
                xv, sb = aug.dsa_apply(xv, sb, aug_params[c])
            gX[c] = class_gradient(model, xv.detach(), c, loss, create_graph=False)
            gS[c] = class_gradient(model, sb, c, loss, create_graph=True)
    total = None
    for group in groups:
        term = gradient_distance(_sum_grads([gX[c] for c in group]),
                                 _sum_grads([gS[c] for c in group]), distance)
        total = term if total is None else ad.add(total, term)
    return total


def _classes(labels):
    return [int(c) for c in np.unique(np.asarray(labels))]


def _cfg_get(cfg, name, default):
    return getattr(cfg, name, default) if cfg is not None else default


def classwise_loss(real, synthetic, model, cfg: CondenseConfig | None = None, aug_params=None) -> Var:
    """Sum over classes of the distance between class-mean gradients."""
    images = _synthetic_var(synthetic)
    labels = synthetic.labels if isinstance(synthetic, SyntheticSet) else _labels_from(cfg, images)
    groups = [[c] for c in _classes(labels)]
    return grouped_matching_loss(real, images, labels, model, groups,
                                 _cfg_get(cfg, "distance", "layerwise_cosine"),
                                 _cfg_get(cfg, "loss", "cross_entropy"), aug_params)


def collective_loss(real, synthetic, model, cfg: CondenseConfig | None = None, aug_params=None) -> Var:
    """Distance between class-summed real and synthetic gradients."""
    images = _synthetic_var(synthetic)
    labels = synthetic.labels if isinstance(synthetic, SyntheticSet) else _labels_from(cfg, images)
    groups = [_classes(labels)]
    return grouped_matching_loss(real, images, labels, model, groups,
                                 _cfg_get(cfg, "distance", "layerwise_cosine"),
                                 _cfg_get(cfg, "loss", "cross_entropy"), aug_params)


def _labels_from(cfg, images):
    if cfg is None:
        raise ValueError("bare image Vars need a config with ipc to infer labels")
    return synthetic_labels(images.shape[0] // cfg.ipc, cfg.ipc)


def matching_groups(mode: str, classes, class_groups=None):
    mode = normalize_mode(mode)
    if mode == CLASS_WISE:
        return [[c] for c in classes]
    if class_groups:
        return [list(g) for g in class_groups]
    return [list(classes)]


# schedule --------------------------------------------------------------------

def select_mode(outer_idx: int, inner_step: int, cfg: CondenseConfig) -> str:
    """Matching mode for one synthetic update.

    ``inner_step`` counts synthetic updates since the last model
    re-initialisation. Warm-up only ever switches a collective run to
    class-wise matching; a class-wise run stays class-wise.
    """
    if cfg.warmup == "none" or cfg.matching_mode == CLASS_WISE:
        return cfg.matching_mode
    if cfg.warmup == "simple":
        warm = inner_step < cfg.gamma_i
    elif cfg.warmup_combine == "and":
        warm = outer_idx < cfg.gamma_o and inner_step < cfg.gamma_i
    else:
        warm = outer_idx < cfg.gamma_o or inner_step < cfg.gamma_i
    return CLASS_WISE if warm else CLASS_COLLECTIVE


# run log ---------------------------------------------------------------------

@dataclass
class RunLog:
    rows: list = field(default_factory=list)  # (outer, inner, mode, loss, wall_ms)
    grams: list = field(default_factory=list)  # (global_step, outer, inner, K)
    notes: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    def log_step(self, outer, inner, mode, loss, wall_ms):
        self.rows.append((int(outer), int(inner), mode, float(loss), float(wall_ms)))

    def losses(self):
        return np.array([r[3] for r in self.rows])

    def modes(self):
        return [r[2] for r in self.rows]


# main loop -------------------------------------------------------------------

def sample_real_batches(dataset, n: int, rng: np.random.Generator, runlog: RunLog | None = None):
    out = {}
    for c, idx in dataset.class_index("train").items():
        if len(idx) == 0:
            raise ValueError(f"class {c} is empty in the training split")
        replace = len(idx) < n
        if replace and runlog is not None and not any(m.startswith(f"class {c} ") for m in runlog.notes):
            runlog.notes.append(f"class {c} has {len(idx)} < {n} examples; sampling with replacement")
            log.warning(runlog.notes[-1])
        out[c] = dataset.x_train[rng.choice(idx, size=n, replace=replace)]
    return out


def model_hyper(cfg: CondenseConfig, dataset) -> dict:
    hyper = dict(cfg.model_hyper)
    C, H, W = dataset.x_train.shape[1:]
    hyper.setdefault("classes", 1 if (cfg.model_kind == "linear" and cfg.loss == "hinge") else dataset.n_classes)
    if cfg.model_kind == "convnet":
        hyper.setdefault("in_shape", [C, H, W])
    else:
        hyper.setdefault("in_dim", C * H * W)
    return hyper


def fresh_model(cfg: CondenseConfig, dataset, outer: int):
    seed = rngmod.substream_seed(cfg.seed, "model_init", outer)
    return models.build(cfg.model_kind, model_hyper(cfg, dataset), models.InitSpec(seed=seed),
                        dtype=np.dtype(cfg.dtype))


def train_model_pass(model, images, labels, cfg: CondenseConfig, state, rng, aug_rng=None):
    """One epoch over the (detached) synthetic set."""
    n = len(labels)
    bs = max(1, min(cfg.model_batch or n, n))
    order = rng.permutation(n)
    for start in range(0, n, bs):
        sel = order[start:start + bs]
        x = Var(images[sel])
        if cfg.augment and aug_rng is not None:
            x = _apply_chain(x, aug.sample_chain(aug_rng, cfg.aug_kinds, x.shape[2:]))
        value = _loss_fn(cfg.loss, models.forward(model, x), labels[sel])
        grads = ad.grad(value, model.params)
        state = models.sgd_step(model, grads, cfg.lr_model, cfg.momentum_model, state)
    return state


def _apply_chain(x, chain):
    for p in chain:
        x = aug.apply(x, p)
    return x


def gram_from_grad(g: np.ndarray) -> np.ndarray:
    G = g.reshape(g.shape[0], -1).astype(np.float64)
    return G @ G.T


def condense(dataset, cfg: CondenseConfig, synthetic: SyntheticSet | None = None,
             callback=None) -> tuple[SyntheticSet, RunLog]:
    """Run the alternating optimisation and return the learned set and a log.

    ``callback(outer, synthetic_images)`` is invoked after every outer loop
    when given.
    """
    dtype = np.dtype(cfg.dtype)
    runlog = RunLog()
    if synthetic is None:
        synthetic = init_synthetic(dataset, cfg.ipc, cfg.init, rng=rngmod.stream(cfg.seed, "synthetic_init"))
    images = synthetic.images.astype(dtype).copy()
    labels = synthetic.labels
    classes = list(range(synthetic.n_classes))
    batch_rng = rngmod.stream(cfg.seed, "batch")
    aug_rng = rngmod.stream(cfg.seed, "augment")
    train_rng = rngmod.stream(cfg.seed, "model_train")
    velocity = np.zeros_like(images)
    step_global = 0

    for outer in range(cfg.K_o):
        model = fresh_model(cfg, dataset, outer)
        mstate = None
        for t in range(cfg.T):
            for i in range(cfg.K_i):
                t0 = time.perf_counter()
                inner = t * cfg.K_i + i
                mode = select_mode(outer, inner, cfg)
                real = sample_real_batches(dataset, cfg.real_batch_per_class, batch_rng, runlog)
                aug_params = None
                if cfg.augment:
                    aug_params = {c: aug.sample_chain(aug_rng, cfg.aug_kinds, images.shape[2:]) for c in classes}
                S = Var(images, requires_grad=True)
                loss = grouped_matching_loss(real, S, labels, model,
                                             matching_groups(mode, classes, cfg.class_groups),
                                             cfg.distance, cfg.loss, aug_params)
                (g,) = ad.grad(loss, [S])
                lv = loss.item()
                if not np.isfinite(lv) or not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite matching loss at outer={outer}, inner={inner}")
                if cfg.gram_every and step_global % cfg.gram_every == 0 and len(runlog.grams) < cfg.gram_max:
                    runlog.grams.append((step_global, outer, inner, gram_from_grad(g)))
                velocity = cfg.momentum_synthetic * velocity + g
                images = (images - cfg.lr_synthetic * velocity).astype(dtype)
                runlog.log_step(outer, inner, mode, lv, 1e3 * (time.perf_counter() - t0))
                step_global += 1
            if t < cfg.T - 1:
                mstate = train_model_pass(model, images, labels, cfg, mstate, train_rng,
                                          aug_rng if cfg.augment else None)
        if callback is not None:
            callback(outer, images)
    if not np.all(np.isfinite(images)):
        raise NumericalError("synthetic images became non-finite")
    return SyntheticSet(images, labels.copy(), synthetic.ipc, synthetic.n_classes), runlog
