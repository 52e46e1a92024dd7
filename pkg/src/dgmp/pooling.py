"""Global pooling operators over a set of local descriptors.

A descriptor set is a ``D x N`` matrix ``phi`` whose columns are the local
descriptors. Every operator maps it to a single ``D``-vector:

* ``avg``   -- per-dimension mean
* ``max``   -- per-dimension maximum
* ``mixed`` -- ``w * max + (1 - w) * avg``
* ``lse``   -- per-dimension ``(1/r) log mean exp(r x)``
* ``gmp``   -- generalized max pooling: the ridge regression solution
  ``argmin_xi ||phi.T xi - 1||^2 + lam ||xi||^2``, i.e. a weighted sum of
  descriptors whose weights equalize each descriptor's similarity to the result.

GMP is computed either in the dual (``N x N`` Gram system, yields the weights)
or in the primal (``D x D`` normal equations); ``auto`` picks the primal when
``N > D``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg
from .errors import InvalidInput, ZeroVector

LAMBDA_MIN = 1e-6
ZERO_NORM = 1e-300

METHODS = ("avg", "max", "mixed", "lse", "gmp")
STRATEGIES = ("auto", "primal", "dual")


@dataclass(frozen=True)
class DescriptorSet:
    phi: np.ndarray
    label: Optional[str] = None
    source_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "phi", linalg.as_matrix(self.phi, "phi"))

    @property
    def dim(self):
        return self.phi.shape[0]

    @property
    def size(self):
        return self.phi.shape[1]


@dataclass(frozen=True)
class ActivationVolume:
    """``h x w x d`` activations, indexed ``data[row, col, channel]``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidInput(f"activation volume must be h x w x d with all sizes >= 1, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def depth(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class PoolingConfig:
    """Pooling method and its parameters.

    ``lam`` is the GMP ridge parameter; it is stored as given and clamped to
    ``LAMBDA_MIN`` when used. ``mix_weight`` weights max against average in
    mixed pooling, ``lse_r`` is the log-sum-exp sharpness.
    """

    method: str = "gmp"
    lam: float = 1.0
    mix_weight: float = 0.5
    lse_r: float = 1.0
    normalize_output: bool = True
    gmp_strategy: str = "auto"
    learn_lambda: bool = True
    learn_mix_weight: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInput(f"unknown pooling method {self.method!r}; expected one of {METHODS}")
        if self.gmp_strategy not in STRATEGIES:
            raise InvalidInput(f"unknown GMP strategy {self.gmp_strategy!r}; expected one of {STRATEGIES}")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise InvalidInput(f"lam must be positive, got {self.lam}")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise InvalidInput(f"mix_weight must lie in [0, 1], got {self.mix_weight}")
        if not (np.isfinite(self.lse_r) and self.lse_r > 0):
            raise InvalidInput(f"lse_r must be positive, got {self.lse_r}")


@dataclass(frozen=True)
class GlobalDescriptor:
    xi: np.ndarray
    normalized: bool = False


@dataclass(frozen=True)
class GmpSolution:
    """Diagnostics of one GMP solve.

    ``alpha`` holds the per-descriptor weights (empty when the primal path ran
    without reconstruction). ``xi`` is the unnormalized result and ``factor``
    the Cholesky factor of the solved system, kept so the backward pass can
    reuse it.
    """

    alpha: np.ndarray
    lambda_used: float
    strategy: str
    optimality_residual: float
    xi: np.ndarray = field(repr=False)
    factor: linalg.SpdFactor = field(repr=False)
    target: float = 1.0


def _phi(ds):
    if isinstance(ds, DescriptorSet):
        return ds.phi
    return linalg.as_matrix(ds, "phi")


def clamp_lambda(lam):
    return max(float(lam), LAMBDA_MIN)


def volume_to_descriptors(vol, label=None, source_id=None):
    """One column per spatial location, enumerated row-major; column ``r*w + q`` is the fiber at ``(r, q)``."""
    if not isinstance(vol, ActivationVolume):
        vol = ActivationVolume(vol)
    h, w, d = vol.data.shape
    phi = vol.data.reshape(h * w, d).T.copy()
    return DescriptorSet(phi, label=label, source_id=source_id)


def l2_normalize(xi):
    xi = np.asarray(xi, dtype=np.float64)
    norm = np.linalg.norm(xi)
    if not norm > ZERO_NORM:
        raise ZeroVector("cannot normalize a zero vector")
    return xi / norm


def _finish(xi, normalize):
    if normalize:
        return GlobalDescriptor(l2_normalize(xi), True)
    return GlobalDescriptor(xi, False)


def pool_avg(ds, normalize=False):
    phi = _phi(ds)
    return _finish(phi.sum(axis=1) / phi.shape[1], normalize)


def pool_max(ds, normalize=False):
    return _finish(_phi(ds).max(axis=1), normalize)


def pool_mixed(ds, mix_weight, normalize=False):
    if not 0.0 <= mix_weight <= 1.0:
        raise InvalidInput(f"mix_weight must lie in [0, 1], got {mix_weight}")
    phi = _phi(ds)
    # endpoints return the pure operators bit-for-bit
    if mix_weight == 1.0:
        return pool_max(phi, normalize)
    if mix_weight == 0.0:
        return pool_avg(phi, normalize)
    xi = mix_weight * pool_max(phi).xi + (1.0 - mix_weight) * pool_avg(phi).xi
    return _finish(xi, normalize)


def pool_lse(ds, r, normalize=False):
    if not r > 0:
        raise InvalidInput(f"lse_r must be positive, got {r}")
    phi = _phi(ds)
    m = phi.max(axis=1)
    shifted = np.exp(r * (phi - m[:, None]))
    xi = m + np.log(shifted.mean(axis=1)) / r
    return _finish(xi, normalize)


def gmp_residual(phi, xi, lam, target=1.0):
    """Norm of the ridge objective's gradient, ``phi (phi.T xi - t) + lam xi``."""
    return float(np.linalg.norm(phi @ (phi.T @ xi - target) + lam * xi))


def pool_gmp_dual(ds, lam, normalize=False, target=1.0):
    """Solve ``(K + lam I) alpha = target * 1`` and return ``phi @ alpha``."""
    phi = _phi(ds)
    lam = clamp_lambda(lam)
    n = phi.shape[1]
    k = linalg.gram(phi)
    factor = linalg.cholesky(k + lam * np.eye(n))
    alpha = factor.solve(np.full(n, float(target)))
    xi = phi @ alpha
    sol = GmpSolution(
        alpha=alpha,
        lambda_used=lam,
        strategy="dual",
        optimality_residual=gmp_residual(phi, xi, lam, target),
        xi=xi,
        factor=factor,
        target=float(target),
    )
    return _finish(xi, normalize), sol


def _primal_solve(phi, lam, target, reconstruct_alpha):
    d = phi.shape[0]
    factor = linalg.cholesky(linalg.gram(phi.T) + lam * np.eye(d))
    xi = factor.solve(phi.sum(axis=1) * float(target))
    # One refinement step, residual taken against phi itself in extended
    # precision. The normal equations square the conditioning; without this a
    # repeated descriptor loses its direction at the eps * k|x|^2 / lam level.
    # (On platforms where longdouble is plain double this step is a no-op.)
    p = phi.astype(np.longdouble)
    x = xi.astype(np.longdouble)
    r = p @ (float(target) - p.T @ x) - lam * x
    xi = xi + factor.solve(np.asarray(r, dtype=float))
    if reconstruct_alpha:
        # alpha = (target - phi.T xi) / lam follows from the normal equations
        alpha = (float(target) - phi.T @ xi) / lam
    else:
        alpha = np.empty(0)
    sol = GmpSolution(
        alpha=alpha,
        lambda_used=lam,
        strategy="primal",
        optimality_residual=gmp_residual(phi, xi, lam, target),
        xi=xi,
        factor=factor,
        target=float(target),
    )
    return xi, sol


def pool_gmp_primal(ds, lam, normalize=False, target=1.0):
    """Solve the normal equations ``(phi phi.T + lam I) xi = phi @ (target * 1)``."""
    xi, _ = _primal_solve(_phi(ds), clamp_lambda(lam), target, False)
    return _finish(xi, normalize)


def choose_strategy(n_descriptors, dim, strategy="auto"):
    if strategy == "auto":
        return "primal" if n_descriptors > dim else "dual"
    if strategy not in ("primal", "dual"):
        raise InvalidInput(f"unknown GMP strategy {strategy!r}")
    return strategy


def pool_gmp(ds, cfg, reconstruct_alpha=False, target=1.0):
    phi = _phi(ds)
    strategy = choose_strategy(phi.shape[1], phi.shape[0], cfg.gmp_strategy)
    if strategy == "dual":
        return pool_gmp_dual(phi, cfg.lam, cfg.normalize_output, target)
    xi, sol = _primal_solve(phi, clamp_lambda(cfg.lam), target, reconstruct_alpha)
    return _finish(xi, cfg.normalize_output), sol


def pool(ds, cfg):
    phi = _phi(ds)
    norm = cfg.normalize_output
    if cfg.method == "avg":
        return pool_avg(phi, norm)
    if cfg.method == "max":
        return pool_max(phi, norm)
    if cfg.method == "mixed":
        return pool_mixed(phi, cfg.mix_weight, norm)
    if cfg.method == "lse":
        return pool_lse(phi, cfg.lse_r, norm)
    return pool_gmp(phi, cfg)[0]
