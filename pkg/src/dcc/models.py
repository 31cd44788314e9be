"""Small classifiers used as gradient sources: linear, MLP and ConvNet."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var


@dataclass
class InitSpec:
    """Scaled-uniform fan-in initialisation: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""

    seed: int = 0
    distribution: str = "scaled_uniform"


@dataclass
class Model:
    kind: str
    names: list[str]
    params: list[Var]
    hyper: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params]))

    def named(self):
        return list(zip(self.names, self.params))

    def copy(self) -> "Model":
        return Model(self.kind, list(self.names),
                     [Var(p.value.copy(), requires_grad=True) for p in self.params],
                     dict(self.hyper))


_KINDS = ("linear", "mlp", "convnet")


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(kind: str, hyper: dict, init: InitSpec | None = None, dtype=np.float32) -> Model:
    """Create a freshly initialised model.

    ``hyper`` keys by kind:

    * linear: ``in_dim`` (flattened input size), ``classes`` (1 means a
      single bias-free score ``w^T x`` as in ``sign(w^T x)``).
    * mlp: ``in_dim``, ``hidden`` (list of widths), ``classes``.
    * convnet: ``in_shape`` (C, H, W), ``width``, ``depth``, ``classes``.
    """
    if kind not in _KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {_KINDS}")
    init = init or InitSpec()
    rng = np.random.default_rng(init.seed)
    names, shapes = [], []
    hyper = dict(hyper)

    if kind == "linear":
        d, C = int(hyper["in_dim"]), int(hyper.get("classes", 1))
        if d < 1 or C < 1:
            raise ValueError("linear: in_dim and classes must be positive")
        if C == 1:
            names, shapes = ["w"], [((d,), d)]
        else:
            names, shapes = ["fc.weight", "fc.bias"], [((C, d), d), ((C,), d)]
    elif kind == "mlp":
        d, C = int(hyper["in_dim"]), int(hyper["classes"])
        widths = [int(h) for h in hyper.get("hidden", [64])]
        if d < 1 or C < 2 or any(h < 1 for h in widths):
            raise ValueError("mlp: in_dim, hidden widths must be positive and classes >= 2")
        prev = d
        for i, h in enumerate(widths + [C]):
            names += [f"fc{i}.weight", f"fc{i}.bias"]
            shapes += [((h, prev), prev), ((h,), prev)]
            prev = h
    else:
        ch, H, W = (int(v) for v in hyper["in_shape"])
        width, depth, C = int(hyper.get("width", 128)), int(hyper.get("depth", 3)), int(hyper["classes"])
        if C < 2 or width < 1 or depth < 1:
            raise ValueError("convnet: classes >= 2, width >= 1, depth >= 1 required")
        if H % (2 ** depth) or W % (2 ** depth):
            raise ValueError(f"convnet: input {H}x{W} not divisible by 2**depth={2 ** depth}")
        prev = ch
        for i in range(depth):
            # no conv bias: instance norm removes any per-channel constant
            names.append(f"conv{i}.weight")
            shapes.append(((width, prev, 3, 3), prev * 9))
            prev = width
        feat = width * (H // 2 ** depth) * (W // 2 ** depth)
        names += ["head.weight", "head.bias"]
        shapes += [((C, feat), feat), ((C,), feat)]

    params = [Var(_uniform(rng, shp, fan, dtype), requires_grad=True, name=n)
              for n, (shp, fan) in zip(names, shapes)]
    return Model(kind, names, params, hyper)


def _dense(x: Var, w: Var, b: Var | None) -> Var:
    out = ad.matmul(x, ad.transpose(w))
    if b is not None:
        out = ad.add(out, ad.broadcast_to(ad.reshape(b, (1, b.shape[0])), out.shape))
    return out


def features(model: Model, batch) -> Var:
    """Penultimate representation (input to the final dense layer)."""
    x = batch if isinstance(batch, Var) else Var(batch)
    p = model.params
    if model.kind == "linear":
        return ad.flatten(x) if x.ndim > 2 else x
    if model.kind == "mlp":
        h = ad.flatten(x) if x.ndim > 2 else x
        n_layers = len(p) // 2
        for i in range(n_layers - 1):
            h = ad.relu(_dense(h, p[2 * i], p[2 * i + 1]))
        return h
    _check_image_batch(model, x)
    h = x
    for i in range(int(model.hyper.get("depth", 3))):
        h = ad.conv2d(h, p[i], padding=1)
        h = ad.instance_norm(h)
        h = ad.relu(h)
        h = ad.avgpool2d(h, 2)
    return ad.flatten(h)


def _check_image_batch(model, x):
    want = tuple(int(v) for v in model.hyper["in_shape"])
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise ValueError(f"convnet expects batches of shape (N, {want}), got {x.shape}")


def forward(model: Model, batch) -> Var:
    """Logits of shape (N, C); for a single-score linear model (N, 1)."""
    x = batch if isinstance(batch, Var) else Var(batch, dtype=model.params[0].dtype)
    if model.kind == "linear":
        h = ad.flatten(x) if x.ndim > 2 else x
        if h.ndim != 2 or h.shape[1] != int(model.hyper["in_dim"]):
            raise ValueError(f"linear model expects inputs with {model.hyper['in_dim']} features, got {x.shape}")
        if len(model.params) == 1:
            w = model.params[0]
            return ad.matmul(h, ad.reshape(w, (w.shape[0], 1)))
        return _dense(h, model.params[0], model.params[1])
    if model.kind == "mlp":
        h = ad.flatten(x) if x.ndim > 2 else x
        if h.shape[1] != int(model.hyper["in_dim"]):
            raise ValueError(f"mlp expects {model.hyper['in_dim']} input features, got {h.shape[1]}")
    h = features(model, x)
    return _dense(h, model.params[-2], model.params[-1])


def per_layer_grads(model: Model, loss: Var, create_graph: bool = False):
    """One gradient per parameter tensor, in layer order, as (name, grad) pairs."""
    if not loss.requires_grad:
        raise ValueError("per_layer_grads: loss is not tracked")
    grads = ad.grad(loss, model.params, create_graph=create_graph)
    if not create_graph:
        grads = [Var(g) for g in grads]
    return list(zip(model.names, grads))


@dataclass
class SGDState:
    momentum_buffers: list[np.ndarray] | None = None


def sgd_step(model: Model, grads, lr: float, momentum: float = 0.0,
             state: SGDState | None = None, weight_decay: float = 0.0) -> SGDState:
    """Heavy-ball SGD: ``v = m*v + g; p -= lr*v``. Parameters are rebound, not mutated."""
    state = state or SGDState()
    gs = [g[1] if isinstance(g, tuple) else g for g in grads]
    gs = [g.value if isinstance(g, Var) else np.asarray(g) for g in gs]
    if len(gs) != len(model.params) or any(g.shape != p.shape for g, p in zip(gs, model.params)):
        raise ValueError("sgd_step: gradients are not aligned with model parameters")
    if state.momentum_buffers is None:
        state.momentum_buffers = [np.zeros_like(p.value) for p in model.params]
    for i, (p, g) in enumerate(zip(model.params, gs)):
        if weight_decay:
            g = g + weight_decay * p.value
        v = momentum * state.momentum_buffers[i] + g
        state.momentum_buffers[i] = v
        p.value = (p.value - lr * v).astype(p.value.dtype, copy=False)
    return state


def save_checkpoint(model: Model, path) -> None:
    """Write ``<path>.bin`` (flat little-endian float32) and ``<path>.json`` manifest."""
    path = Path(path)
    flat = np.concatenate([p.value.astype("<f4").ravel() for p in model.params])
    path.with_suffix(".bin").write_bytes(flat.tobytes())
    manifest = {"kind": model.kind, "hyper": model.hyper,
                "layers": [{"name": n, "shape": list(p.shape)} for n, p in model.named()]}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> Model:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    total = int(np.sum([np.prod(layer["shape"]) for layer in manifest["layers"]]))
    if flat.size != total:
        raise ValueError(f"checkpoint buffer has {flat.size} values, manifest expects {total}")
    names, params, off = [], [], 0
    for layer in manifest["layers"]:
        n = int(np.prod(layer["shape"]))
        params.append(Var(flat[off:off + n].reshape(layer["shape"]).astype(np.float32), requires_grad=True))
        names.append(layer["name"])
        off += n
    return Model(manifest["kind"], names, params, manifest["hyper"])
