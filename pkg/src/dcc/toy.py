"""Two-Gaussian linear toy model of class-wise vs class-collective matching.

Samples are ``x ~ N(y*alpha*phi1 + beta*phi2, I)`` in R^2 with labels
``y = +-1`` drawn uniformly. The classifier ``w = phi1`` is fixed and the
hinge loss gradient with respect to ``w`` is ``g_w(x, y) = -y*x`` on the
margin-active set and zero elsewhere. Everything here is float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .kernels._numpy import _norm_grad_loss
from .rng import stream

EPS_MAX = 1.0 - math.sqrt(2.0 / math.pi)
CLASS_WISE = "class_wise"
CLASS_COLLECTIVE = "class_collective"


@dataclass
class ToySpec:
    alpha: float = 1.0
    beta: float = 4.0
    phi1: tuple = (1.0, 0.0)
    phi2: tuple = (0.0, 1.0)
    N: int = 100_000
    eps: float = 0.2
    lam: float = 0.01
    seed: int = 0

    def __post_init__(self):
        p1, p2 = np.asarray(self.phi1, float), np.asarray(self.phi2, float)
        if p1.shape != (2,) or p2.shape != (2,):
            raise ValueError("phi1 and phi2 must be vectors in R^2")
        if abs(p1 @ p2) > 1e-12 or abs(p1 @ p1 - 1) > 1e-12 or abs(p2 @ p2 - 1) > 1e-12:
            raise ValueError("phi1, phi2 must be orthonormal")
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0 < self.eps <= EPS_MAX + 1e-12:
            raise ValueError(f"eps must lie in (0, {EPS_MAX:.4f}], got {self.eps}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.N < 2:
            raise ValueError("N must be >= 2")

    @property
    def basis(self):
        return np.asarray(self.phi1, float), np.asarray(self.phi2, float)

    def to_dict(self):
        d = asdict(self)
        d["phi1"], d["phi2"] = list(self.phi1), list(self.phi2)
        return d


@dataclass
class ToyDataset:
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    spec: ToySpec | None = None
    active: np.ndarray = field(init=False)

    def __post_init__(self):
        self.active = margin_active(self.x, self.y, self.w)

    @property
    def X_plus(self):
        return self.x[self.active & (self.y > 0)]

    @property
    def X_minus(self):
        return self.x[self.active & (self.y < 0)]

    @property
    def mu_plus(self):
        return _mean(self.X_plus, "X+")

    @property
    def mu_minus(self):
        return _mean(self.X_minus, "X-")


@dataclass
class ToyPair:
    s1: np.ndarray
    s2: np.ndarray

    def as_array(self):
        return np.stack([self.s1, self.s2])


def _mean(a, what):
    if len(a) == 0:
        raise ValueError(f"margin-active subset {what} is empty")
    return a.mean(axis=0)


def margin_active(x, y, w):
    """``-y * w^T x < 1``, taken literally (see the project notes on this predicate)."""
    return -y * (x @ w) < 1.0


def sample_toy(spec: ToySpec, seed: int | None = None) -> ToyDataset:
    rng = stream(spec.seed if seed is None else seed, "toy")
    phi1, phi2 = spec.basis
    y = rng.choice(np.array([-1.0, 1.0]), size=spec.N)
    x = y[:, None] * spec.alpha * phi1 + spec.beta * phi2 + rng.standard_normal((spec.N, 2))
    return ToyDataset(x, y, phi1.copy(), spec)


def hinge_grad(x, y, w):
    """Per-sample ``g_w(x, y)``: ``-y x`` where margin-active, else 0."""
    x = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(y, float))
    return np.where(margin_active(x, y, w)[:, None], -y[:, None] * x, 0.0)


def toy_matching_loss(real: ToyDataset, pair: ToyPair, lam: float = 0.0,
                      mode: str = CLASS_WISE, w=None) -> float:
    """Distance-based gradient matching loss for one synthetic point per class.

    Class-wise: ``||gbar(X+) - g(s1)|| + ||gbar(X-) - g(s2)||``. Collective:
    ``||(gbar(X+) + gbar(X-)) - (g(s1) + g(s2))||``. Both add the capacity term
    ``lam/|S| * sum ||s||``. Means run over the margin-active real subsets.
    """
    w = real.w if w is None else np.asarray(w, float)
    gr_p = -_mean(real.X_plus, "X+")
    gr_m = _mean(real.X_minus, "X-")
    gs_p = hinge_grad(pair.s1, 1.0, w)[0]
    gs_m = hinge_grad(pair.s2, -1.0, w)[0]
    if mode == CLASS_WISE:
        match = np.linalg.norm(gr_p - gs_p) + np.linalg.norm(gr_m - gs_m)
    elif mode == CLASS_COLLECTIVE:
        match = np.linalg.norm((gr_p + gr_m) - (gs_p + gs_m))
    else:
        raise ValueError(f"unknown toy mode {mode!r}")
    return float(match + lam / 2.0 * (np.linalg.norm(pair.s1) + np.linalg.norm(pair.s2)))


def _problem(real: ToyDataset, mode: str):
    # Both losses reduce to sum_g ||R_g - (C s)_g|| while |w^T s| <= eps < 1
    # keeps the synthetic points margin-active.
    mp, mm = real.mu_plus, real.mu_minus
    if mode == CLASS_WISE:
        return np.stack([mp, mm]), np.eye(2)
    if mode == CLASS_COLLECTIVE:
        return (mp - mm)[None, :], np.array([[1.0, -1.0]])
    raise ValueError(f"unknown toy mode {mode!r}")


def toy_loss_grad(real: ToyDataset, pair: ToyPair, lam: float = 0.0, mode: str = CLASS_WISE):
    """Analytic (sub)gradient of :func:`toy_matching_loss` w.r.t. ``(s1, s2)``."""
    R, C = _problem(real, mode)
    s = pair.as_array()
    if np.any(np.abs(s @ real.w) >= 1.0):
        raise ValueError("toy_loss_grad assumes both synthetic points are margin-active")
    return _norm_grad_loss(R, C, np.full(2, lam / 2.0), s)


def classwise_optimum(real: ToyDataset, eps: float) -> ToyPair:
    mp, mm = real.mu_plus, real.mu_minus
    np_, nm = np.linalg.norm(mp), np.linalg.norm(mm)
    if np_ == 0 or nm == 0:
        raise ValueError("degenerate sample: a class mean is zero")
    return ToyPair(eps * mp / np_, eps * mm / nm)


def collective_optimum(real: ToyDataset, eps: float) -> ToyPair:
    d = real.mu_plus - real.mu_minus
    nd = np.linalg.norm(d)
    if nd == 0:
        raise ValueError("degenerate sample: mu+ equals mu-")
    s1 = eps * d / nd
    return ToyPair(s1, -s1)


def numeric_optimum(real: ToyDataset, eps: float, lam: float = 0.0, mode: str = CLASS_WISE,
                    steps: int = 5000, lr: float = 1e-2, tol: float = 1e-8, s0=None):
    """Projected subgradient minimiser of the toy loss on the eps-ball.

    Returns ``(pair, info)`` where ``info`` has the step count and the final
    projected step length over ``lr`` (the convergence measure).
    """
    R, C = _problem(real, mode)
    s0 = np.zeros((2, 2)) if s0 is None else np.asarray(s0, float)
    s, n, moved = kernels.ball_pgd(R, C, np.full(2, lam / 2.0), s0, eps, lr, steps, tol)
    return ToyPair(s[0].copy(), s[1].copy()), {"steps": int(n), "residual": float(moved),
                                               "converged": bool(moved < tol)}


def ratio_R(s, phi1=(1.0, 0.0), phi2=(0.0, 1.0)) -> float:
    """Mean of ``|s^T phi1| / (|s^T phi1| + |s^T phi2|)`` over synthetic points."""
    arr = s.as_array() if isinstance(s, ToyPair) else np.atleast_2d(np.asarray(s, float))
    a = np.abs(arr @ np.asarray(phi1, float))
    b = np.abs(arr @ np.asarray(phi2, float))
    if np.any(a + b == 0):
        raise ValueError("ratio_R: a synthetic point has no component on either basis vector")
    return float(np.mean(a / (a + b)))


def verify_bounds(spec: ToySpec, trials: int = 20, tol: float = 0.03) -> dict:
    """Check the class-wise upper bound and the collective ``R = 1`` prediction.

    Every trial draws a fresh dataset. The report carries the per-trial ratios,
    the Monte Carlo standard error and the class-mean cosines with phi1 for both
    classes, since the bound formula assumes they coincide.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    phi1, phi2 = spec.basis
    bound = spec.alpha / (spec.alpha + spec.beta)
    r_cw, r_co, cos_p, cos_m = [], [], [], []
    for t in range(trials):
        ds = sample_toy(spec, seed=spec.seed * 100_003 + t)
        r_cw.append(ratio_R(classwise_optimum(ds, spec.eps), phi1, phi2))
        r_co.append(ratio_R(collective_optimum(ds, spec.eps), phi1, phi2))
        mp, mm = ds.mu_plus, ds.mu_minus
        cos_p.append(abs(phi1 @ mp) / np.linalg.norm(mp))
        cos_m.append(abs(phi1 @ mm) / np.linalg.norm(mm))
    r_cw, r_co = np.array(r_cw), np.array(r_co)
    se = lambda a: float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0
    return {
        "spec": spec.to_dict(),
        "trials": trials,
        "bound": bound,
        "tol": tol,
        "classwise_R": r_cw.tolist(),
        "collective_R": r_co.tolist(),
        "classwise_R_max": float(r_cw.max()),
        "collective_R_min": float(r_co.min()),
        "classwise_R_stderr": se(r_cw),
        "collective_R_stderr": se(r_co),
        "cos_phi1_mu_plus": float(np.mean(cos_p)),
        "cos_phi1_mu_minus": float(np.mean(cos_m)),
        "classwise_ok": bool(r_cw.max() <= bound + tol),
        "collective_ok": bool(r_co.min() >= 1.0 - tol),
    }


def beta_sweep(alpha=1.0, betas=(0, 1, 2, 4, 8), N=100_000, trials=5, seed=0, eps=0.2):
    """Mean class-wise and collective R for each beta; rows for the toy CSV."""
    rows = []
    for b in betas:
        spec = ToySpec(alpha=alpha, beta=float(b), N=N, eps=eps, seed=seed)
        rep = verify_bounds(spec, trials)
        rows.append({"alpha": alpha, "beta": float(b), "strategy": CLASS_WISE,
                     "R": float(np.mean(rep["classwise_R"])), "bound": rep["bound"]})
        rows.append({"alpha": alpha, "beta": float(b), "strategy": CLASS_COLLECTIVE,
                     "R": float(np.mean(rep["collective_R"])), "bound": 1.0})
    return rows
