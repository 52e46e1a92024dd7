"""Backward passes for the pooling operators, a finite-difference oracle and AMSGrad.

All adjoints take the upstream gradient with respect to the *unnormalized*
pooled vector; normalization has its own backward stage
(:func:`backward_l2norm`).

GMP adjoint (dual form ``xi = phi alpha``, ``A = K + lam I``, ``A alpha = 1``)::

    beta  = A^{-1} phi.T g
    dphi  = g alpha.T - xi beta.T - (phi beta) alpha.T
    dlam  = -beta . alpha

and for the primal form (``B = phi phi.T + lam I``, ``B xi = phi 1``)::

    gamma = B^{-1} g
    dphi  = gamma (1 - phi.T xi).T - xi (phi.T gamma).T
    dlam  = -gamma . xi

Both reuse the forward Cholesky factor, so a backward call costs one solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import pooling
from .errors import ShapeMismatch, UnknownOp, ZeroVector


@dataclass
class GradBundle:
    d_phi: np.ndarray
    d_lambda: Optional[float] = None
    d_mix_weight: Optional[float] = None
    d_lse_r: Optional[float] = None


def _upstream(phi, g):
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (phi.shape[0],):
        raise ShapeMismatch(f"upstream gradient has shape {g.shape}, expected ({phi.shape[0]},)")
    return g


def backward_avg(phi, upstream):
    phi = pooling._phi(phi)
    g = _upstream(phi, upstream)
    n = phi.shape[1]
    return GradBundle(np.repeat((g / n)[:, None], n, axis=1))


def backward_max(phi, upstream, argmax=None):
    """Route each dimension's gradient to its first maximal column."""
    phi = pooling._phi(phi)
    g = _upstream(phi, upstream)
    if argmax is None:
        argmax = phi.argmax(axis=1)
    d_phi = np.zeros_like(phi)
    d_phi[np.arange(phi.shape[0]), argmax] = g
    return GradBundle(d_phi)


def backward_mixed(phi, mix_weight, upstream, argmax=None):
    phi = pooling._phi(phi)
    g = _upstream(phi, upstream)
    d_max = backward_max(phi, g, argmax).d_phi
    d_avg = backward_avg(phi, g).d_phi
    d_phi = mix_weight * d_max + (1.0 - mix_weight) * d_avg
    diff = pooling.pool_max(phi).xi - pooling.pool_avg(phi).xi
    return GradBundle(d_phi, d_mix_weight=float(g @ diff))


def backward_lse(phi, r, upstream):
    phi = pooling._phi(phi)
    g = _upstream(phi, upstream)
    m = phi.max(axis=1)
    e = np.exp(r * (phi - m[:, None]))
    weights = e / e.sum(axis=1, keepdims=True)
    xi = m + np.log(e.mean(axis=1)) / r
    d_phi = g[:, None] * weights
    # d xi / d r = (sum_i p_i x_i - xi) / r
    d_r = float(g @ (((weights * phi).sum(axis=1) - xi) / r))
    return GradBundle(d_phi, d_lse_r=d_r)


def backward_l2norm(xi, upstream):
    """Adjoint of ``xi -> xi / ||xi||``: ``(g - (xhat . g) xhat) / ||xi||``."""
    xi = np.asarray(xi, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != xi.shape:
        raise ShapeMismatch(f"upstream gradient has shape {g.shape}, expected {xi.shape}")
    norm = np.linalg.norm(xi)
    if not norm > pooling.ZERO_NORM:
        raise ZeroVector("l2 normalization has no gradient at the zero vector")
    xhat = xi / norm
    return (g - (xhat @ g) * xhat) / norm


def backward_gmp(phi, lam, upstream, solution=None, strategy="dual"):
    """Gradient of ``upstream . xi_gmp(phi, lam)`` with respect to ``phi`` and ``lam``.

    Pass the :class:`~dgmp.pooling.GmpSolution` from the forward call to reuse
    its factorization; otherwise the forward solve is redone with ``strategy``.
    ``d_lambda`` is with respect to the clamped lambda that was actually used.
    """
    phi = pooling._phi(phi)
    g = _upstream(phi, upstream)
    if solution is None:
        cfg = pooling.PoolingConfig(method="gmp", lam=lam, normalize_output=False, gmp_strategy=strategy)
        _, solution = pooling.pool_gmp(phi, cfg)
    xi = solution.xi
    t = solution.target
    if solution.strategy == "dual":
        alpha = solution.alpha
        beta = solution.factor.solve(phi.T @ g)
        d_phi = np.outer(g, alpha) - np.outer(xi, beta) - np.outer(phi @ beta, alpha)
        d_lam = -float(beta @ alpha)
    else:
        gamma = solution.factor.solve(g)
        d_phi = np.outer(gamma, t - phi.T @ xi) - np.outer(xi, phi.T @ gamma)
        d_lam = -float(gamma @ xi)
    return GradBundle(d_phi, d_lambda=d_lam)


def backward_pool(phi, cfg, upstream, solution=None):
    """Backward of :func:`dgmp.pooling.pool` without its normalization stage.

    ``solution`` is the :class:`~dgmp.pooling.GmpSolution` of the forward pass
    (GMP only). Parameter gradients are filled in when the method uses them.
    """
    if cfg.method == "avg":
        return backward_avg(phi, upstream)
    if cfg.method == "max":
        return backward_max(phi, upstream)
    if cfg.method == "mixed":
        return backward_mixed(phi, cfg.mix_weight, upstream)
    if cfg.method == "lse":
        return backward_lse(phi, cfg.lse_r, upstream)
    return backward_gmp(phi, cfg.lam, upstream, solution=solution, strategy=cfg.gmp_strategy)


def finite_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (scalar or array)."""
    if np.isscalar(x):
        x = float(x)
        return (f(x + h) - f(x - h)) / (2 * h)
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        fp = f(x)
        x.flat[i] = orig - h
        fm = f(x)
        x.flat[i] = orig
        grad.flat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


# --- gradient checking -----------------------------------------------------

@dataclass
class CheckReport:
    op: str
    tolerance: float
    errors: dict = field(default_factory=dict)  # block name -> max relative error
    trials: int = 0
    skipped: int = 0  # trials at non-differentiable points
    passed: bool = True

    def to_dict(self):
        return {
            "op": self.op,
            "tolerance": self.tolerance,
            "trials": self.trials,
            "skipped_nondifferentiable": self.skipped,
            "max_relative_error": dict(self.errors),
            "passed": self.passed,
        }


@dataclass
class _Trial:
    # block name -> (analytic gradient, scalar function of that block, point, step)
    blocks: dict
    nondifferentiable: bool = False


def _random_phi(rng, d_range=(2, 8), n_range=(1, 10)):
    d = int(rng.integers(d_range[0], d_range[1] + 1))
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    return rng.standard_normal((d, n))


def _row_gap_kink(phi, h):
    """True if some row's two largest entries are within ``2h`` (a +-h nudge could swap the argmax)."""
    if phi.shape[1] < 2:
        return False
    top2 = np.sort(phi, axis=1)[:, -2:]
    return bool(np.any(top2[:, 1] - top2[:, 0] <= 2 * h))


def _trial_avg(rng, h):
    phi = _random_phi(rng)
    u = rng.standard_normal(phi.shape[0])
    f = lambda p: u @ pooling.pool_avg(p).xi
    return _Trial({"phi": (backward_avg(phi, u).d_phi, f, phi, h)})


def _trial_max(rng, h):
    phi = _random_phi(rng)
    u = rng.standard_normal(phi.shape[0])
    f = lambda p: u @ pooling.pool_max(p).xi
    return _Trial({"phi": (backward_max(phi, u).d_phi, f, phi, h)}, _row_gap_kink(phi, h))


def _trial_mixed(rng, h):
    # N >= 2: with one column max == avg and the mix-weight gradient is exactly zero
    phi = _random_phi(rng, n_range=(2, 10))
    u = rng.standard_normal(phi.shape[0])
    w = float(rng.uniform(0.05, 0.95))
    gb = backward_mixed(phi, w, u)
    return _Trial(
        {
            "phi": (gb.d_phi, lambda p: u @ pooling.pool_mixed(p, w).xi, phi, h),
            "mix_weight": (gb.d_mix_weight, lambda a: u @ pooling.pool_mixed(phi, a).xi, w, h),
        },
        _row_gap_kink(phi, h),
    )


def _trial_lse(rng, h):
    phi = _random_phi(rng)
    u = rng.standard_normal(phi.shape[0])
    r = float(rng.uniform(0.2, 5.0))
    gb = backward_lse(phi, r, u)
    return _Trial(
        {
            "phi": (gb.d_phi, lambda p: u @ pooling.pool_lse(p, r).xi, phi, h),
            "lse_r": (gb.d_lse_r, lambda s: u @ pooling.pool_lse(phi, s).xi, r, h),
        }
    )


def _trial_gmp(rng, h, lam=None):
    phi = _random_phi(rng, n_range=(1, 12))
    u = rng.standard_normal(phi.shape[0])
    if lam is None:
        lam = float(10.0 ** rng.uniform(-1, 3))
    strategy = "dual" if rng.random() < 0.5 else "primal"
    cfg = pooling.PoolingConfig(method="gmp", lam=lam, normalize_output=False, gmp_strategy=strategy)
    _, sol = pooling.pool_gmp(phi, cfg)
    gb = backward_gmp(phi, lam, u, solution=sol)

    def f_phi(p):
        return u @ pooling.pool_gmp(p, cfg)[0].xi

    def f_lam(s):
        return u @ pooling.pool_gmp(phi, pooling.PoolingConfig(
            method="gmp", lam=s, normalize_output=False, gmp_strategy=strategy))[0].xi

    return _Trial(
        {
            "phi": (gb.d_phi, f_phi, phi, h),
            "lambda": (gb.d_lambda, f_lam, lam, h * max(1.0, lam)),
        }
    )


def _trial_l2norm(rng, h):
    d = int(rng.integers(2, 10))
    xi = rng.standard_normal(d)
    u = rng.standard_normal(d)
    f = lambda x: u @ pooling.l2_normalize(x)
    return _Trial({"xi": (backward_l2norm(xi, u), f, xi, h)})


def _trial_triplet(rng, h):
    from .retrieval import TripletConfig, batch_hard_triplet_loss, triplet_selection_margin

    p = int(rng.integers(2, 4))
    k = int(rng.integers(2, 4))
    d = int(rng.integers(2, 6))
    labels = np.repeat(np.arange(p), k)
    emb = rng.standard_normal((d, p * k))
    cfg = TripletConfig(margin=float(rng.choice([0.1, 0.2, 0.5])), P=p, K=k,
                        distance="euclidean" if rng.random() < 0.5 else "cosine")
    loss, grad = batch_hard_triplet_loss(emb, labels, cfg)
    f = lambda e: batch_hard_triplet_loss(e, labels, cfg, with_grad=False)[0]
    # selection ties and hinges at zero are kinks
    kink = triplet_selection_margin(emb, labels, cfg) <= 4 * h * (1 + np.abs(emb).max())
    return _Trial({"embeddings": (grad, f, emb, h)}, kink)


OPS: dict[str, Callable] = {
    "avg": _trial_avg,
    "max": _trial_max,
    "mixed": _trial_mixed,
    "lse": _trial_lse,
    "gmp": _trial_gmp,
    "l2norm": _trial_l2norm,
    "triplet": _trial_triplet,
}


def grad_check(op_name, trials=20, tolerance=1e-6, seed=0, h=1e-5):
    """Compare every analytic gradient of ``op_name`` with central differences.

    Trials landing on a non-differentiable point (argmax or selection ties) are
    counted in ``skipped`` and excluded from pass/fail.
    """
    if op_name not in OPS:
        raise UnknownOp(f"unknown op {op_name!r}; known ops: {', '.join(OPS)}")
    rng = np.random.default_rng(seed)
    report = CheckReport(op_name, tolerance)
    for _ in range(trials):
        trial = OPS[op_name](rng, h)
        report.trials += 1
        if trial.nondifferentiable:
            report.skipped += 1
            continue
        for name, (analytic, f, point, step) in trial.blocks.items():
            err = relative_error(analytic, finite_diff(f, point, step))
            report.errors[name] = max(report.errors.get(name, 0.0), err)
    report.passed = all(e <= tolerance for e in report.errors.values())
    return report


# --- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    """AMSGrad state. ``lr_multipliers``, ``clamp_min`` and ``clamp_max`` are keyed by parameter name."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    lr_multipliers: dict = field(default_factory=dict)
    clamp_min: dict = field(default_factory=dict)
    clamp_max: dict = field(default_factory=dict)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)


def amsgrad_step(params, grads, state):
    """One AMSGrad update; returns ``(new_params, state)``.

    Weight decay is added to the gradient before the moment updates. The state
    is updated in place.
    """
    if set(grads) != set(params):
        raise ShapeMismatch(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new_params = {}
    for name in sorted(params):
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: parameter shape {p.shape} vs gradient shape {g.shape}")
        g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.v_max[name] = np.zeros_like(p)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.v_max[name] = np.maximum(state.v_max[name], state.v[name])
        lr = state.lr * state.lr_multipliers.get(name, 1.0)
        denom = np.sqrt(state.v_max[name] / bc2) + state.eps
        p = p - (lr / bc1) * state.m[name] / denom
        if name in state.clamp_min:
            p = np.maximum(p, state.clamp_min[name])
        if name in state.clamp_max:
            p = np.minimum(p, state.clamp_max[name])
        new_params[name] = p
    return new_params, state


def exponential_lr(base_lr, epoch, decay_start, factor=0.96):
    """Learning rate for ``epoch``: constant until ``decay_start``, then ``factor`` per epoch."""
    if epoch <= decay_start:
        return base_lr
    return base_lr * math.pow(factor, epoch - decay_start)
