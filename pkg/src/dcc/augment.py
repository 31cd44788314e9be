"""Differentiable Siamese augmentation.

One sampled transform instance is applied to both the real and the synthetic
batch. Every transform is a fixed linear map of the pixels (plus a constant for
brightness), so gradients flow to the synthetic images exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

KINDS = ("flip", "crop_shift", "cutout", "scale", "brightness")
MAX_SHIFT = 4
SCALE_RANGE = (0.8, 1.2)
MAX_BRIGHTNESS = 0.2


@dataclass
class AugParams:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None


def sample(rng: np.random.Generator, kind: str, hw) -> AugParams:
    H, W = hw
    if kind == "flip":
        return AugParams(kind, {"flip": bool(rng.random() < 0.5)})
    if kind == "crop_shift":
        dy, dx = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
        return AugParams(kind, {"dy": int(dy), "dx": int(dx)})
    if kind == "cutout":
        h = int(rng.integers(0, H // 2 + 1))
        w = int(rng.integers(0, W // 2 + 1))
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        return AugParams(kind, {"y0": y0, "x0": x0, "h": h, "w": w})
    if kind == "scale":
        sy, sx = rng.uniform(*SCALE_RANGE, size=2)
        return AugParams(kind, {"sy": float(sy), "sx": float(sx)})
    if kind == "brightness":
        return AugParams(kind, {"delta": float(rng.uniform(-MAX_BRIGHTNESS, MAX_BRIGHTNESS))})
    raise ValueError(f"unknown augmentation {kind!r}; expected one of {KINDS}")


def sample_chain(rng: np.random.Generator, kinds, hw) -> list[AugParams]:
    return [sample(rng, k, hw) for k in kinds]


def _shift_matrix(n, d):
    # out[i] = in[i - d], zero outside
    A = np.zeros((n, n))
    for i in range(n):
        j = i - d
        if 0 <= j < n:
            A[i, j] = 1.0
    return A


def _scale_matrix(n, s):
    """Bilinear resampling about the centre; out[i] reads in[c + (i - c) / s]."""
    A = np.zeros((n, n))
    c = (n - 1) / 2.0
    for i in range(n):
        src = c + (i - c) / s
        j0 = int(np.floor(src))
        t = src - j0
        for j, wgt in ((j0, 1.0 - t), (j0 + 1, t)):
            if 0 <= j < n and wgt:
                A[i, j] += wgt
    return A


def _validate(p: AugParams, hw):
    H, W = hw
    q = p.params
    if p.kind == "flip":
        return
    if p.kind == "crop_shift":
        if abs(q["dy"]) > MAX_SHIFT or abs(q["dx"]) > MAX_SHIFT:
            raise ValueError(f"crop_shift offsets must be within +-{MAX_SHIFT} px, got {q}")
    elif p.kind == "cutout":
        if q["h"] < 0 or q["w"] < 0 or q["h"] > H // 2 or q["w"] > W // 2:
            raise ValueError(f"cutout box must be at most half the side, got {q}")
        if q["y0"] < 0 or q["x0"] < 0 or q["y0"] + q["h"] > H or q["x0"] + q["w"] > W:
            raise ValueError(f"cutout box outside the image, got {q}")
    elif p.kind == "scale":
        lo, hi = SCALE_RANGE
        if not (lo <= q["sy"] <= hi and lo <= q["sx"] <= hi):
            raise ValueError(f"scale factors must lie in {SCALE_RANGE}, got {q}")
    elif p.kind == "brightness":
        if abs(q["delta"]) > MAX_BRIGHTNESS:
            raise ValueError(f"brightness delta must be within +-{MAX_BRIGHTNESS}, got {q}")
    else:
        raise ValueError(f"unknown augmentation {p.kind!r}")


def apply(x, p: AugParams) -> Var:
    """Apply one transform to an NCHW batch (array or Var)."""
    x = x if isinstance(x, Var) else Var(x)
    H, W = x.shape[2:]
    _validate(p, (H, W))
    q = p.params
    if p.kind == "flip":
        if not q["flip"]:
            return x
        return ad.resample_hw(x, np.eye(H), np.eye(W)[::-1])
    if p.kind == "crop_shift":
        if q["dy"] == 0 and q["dx"] == 0:
            return x
        return ad.resample_hw(x, _shift_matrix(H, q["dy"]), _shift_matrix(W, q["dx"]))
    if p.kind == "cutout":
        if q["h"] == 0 or q["w"] == 0:
            return x
        mask = np.ones(x.shape, dtype=x.dtype)
        mask[:, :, q["y0"]:q["y0"] + q["h"], q["x0"]:q["x0"] + q["w"]] = 0.0
        return ad.masked(x, mask)
    if p.kind == "scale":
        return ad.resample_hw(x, _scale_matrix(H, q["sy"]), _scale_matrix(W, q["sx"]))
    return ad.add(x, q["delta"])


def dsa_apply(real_batch, synth_batch, params):
    """Apply the same transform (or chain of transforms) to both batches."""
    real = real_batch if isinstance(real_batch, Var) else Var(real_batch)
    synth = synth_batch if isinstance(synth_batch, Var) else Var(synth_batch)
    if tuple(real.shape[2:]) != tuple(synth.shape[2:]):
        raise ValueError(f"dsa_apply: spatial shapes differ {real.shape} vs {synth.shape}")
    chain = [params] if isinstance(params, AugParams) else list(params)
    for p in chain:
        real = apply(real, p)
        synth = apply(synth, p)
    return real, synth
