"""Variational CLUB estimators and the exact quantities used to check them.

All values are in nats.  The vCLUB double sums include the ``j == i`` terms
and are never clamped at zero; finite-sample estimates may be negative.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import gaussian_pair_stream
from .errors import DimensionError, ValidationError
from .model import CategoricalQ, GaussianQ, check_labels, gaussian_logprob
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MiEstimate:
    value: float
    n_pairs: int

    def __post_init__(self):
        if not math.isfinite(self.value) or self.n_pairs < 1:
            raise ValidationError(f"invalid MI estimate {self.value} over {self.n_pairs} pairs")


def gaussian_logprob_matrix(q: GaussianQ, xs, xd) -> Tensor:
    """``L[i, j] = log q1(x^d_j | x^s_i)`` for all pairs, shape [N, N]."""
    xs, xd = T.as_tensor(xs), T.as_tensor(xd)
    if xs.ndim != 2 or xd.ndim != 2 or xs.shape[0] != xd.shape[0]:
        raise DimensionError(f"x^s {xs.shape} and x^d {xd.shape} must be [N, D] batches")
    mu, logvar = q(xs)
    prec = T.exp(-logvar)
    pm = prec * mu
    # sum_k prec_ik (xd_jk - mu_ik)^2 expanded into three matmul-friendly pieces
    quad = prec @ (xd * xd).T - 2.0 * (pm @ xd.T) + (pm * mu).sum(axis=1, keepdims=True)
    norm = (T.LOG_2PI + logvar).sum(axis=1, keepdims=True)
    return -0.5 * norm - 0.5 * quad


def _contrast(logq: Tensor, positive: Tensor) -> Tensor:
    n = logq.shape[0]
    diff = T.reshape(positive, (n, 1)) - logq
    # same value as diff.sum(); pairing diff[i, j] with diff[j, i] cancels exactly when q ignores its input
    return (diff + diff.T).sum() * (0.5 / (n * n))


def vclub_embedding(q: GaussianQ, xs, xd) -> Tensor:
    """(1/N^2) sum_ij [log q1(x^d_i | x^s_i) - log q1(x^d_j | x^s_i)]."""
    logq = gaussian_logprob_matrix(q, xs, xd)
    n = logq.shape[0]
    idx = np.arange(n)
    return _contrast(logq, logq[idx, idx])


def vclub_label(q: CategoricalQ, x, y) -> Tensor:
    """(1/N^2) sum_ij [log q(y_i | x_i) - log q(y_j | x_i)] with a softmax head."""
    x = T.as_tensor(x)
    y = check_labels(y, q.num_classes)
    if x.ndim != 2 or x.shape[0] != len(y):
        raise DimensionError("need one label per row of x")
    logp = T.log_softmax(q(x), axis=1)
    logq = logp[:, y]
    return _contrast(logq, logp[np.arange(len(y)), y])


def estimate(value: Tensor, n_pairs: int) -> MiEstimate:
    return MiEstimate(float(value.data), int(n_pairs))


# ----------------------------------------------------------------------
# exact references
# ----------------------------------------------------------------------
def analytic_gaussian_mi(rho) -> float:
    """MI of a jointly Gaussian pair with per-dimension correlations ``rho``."""
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    if np.any(np.abs(rho) >= 1.0):
        raise ValidationError("correlations must satisfy |rho| < 1")
    return float(-0.5 * np.sum(np.log1p(-rho * rho)))


def analytic_gaussian_club(rho) -> float:
    """CLUB evaluated with the true Gaussian conditional: sum_k rho_k^2 / (1 - rho_k^2).

    Exceeds :func:`analytic_gaussian_mi` for every rho != 0; this is the value
    a well-fitted vCLUB estimator converges to on Gaussian pairs.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    if np.any(np.abs(rho) >= 1.0):
        raise ValidationError("correlations must satisfy |rho| < 1")
    return float(np.sum(rho * rho / (1.0 - rho * rho)))


def validate_joint(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ValidationError("joint table must be a non-empty 2-D array")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError("joint table has negative or non-finite entries")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValidationError(f"joint table sums to {p.sum()!r}, not 1")
    return p


def discrete_mi(p) -> float:
    """sum p(a,b) log p(a,b) / (p(a) p(b)), with 0 log 0 = 0."""
    p = validate_joint(p)
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa * pb)[nz])))


def club_exact_discrete(p) -> float:
    """E_p(a,b)[log p(b|a)] - E_p(a)E_p(b)[log p(b|a)] by enumeration.

    Rows with p(a) = 0 carry no weight and are skipped.  If the product of
    marginals puts mass where p(b|a) = 0 the bound is infinite and ``inf`` is
    returned.
    """
    p = validate_joint(p)
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    rows = pa > 0
    cond = p[rows] / pa[rows, None]
    w_joint = p[rows]
    w_prod = pa[rows, None] * pb[None, :]
    if np.any((w_prod > 0) & (cond == 0)):
        log.warning("conditional has zeros under the product of marginals; CLUB is infinite")
        return math.inf
    with np.errstate(divide="ignore"):
        logc = np.where(cond > 0, np.log(np.where(cond > 0, cond, 1.0)), 0.0)
    return float(np.sum(w_joint * logc) - np.sum(w_prod * logc))


def random_joint(rng: np.random.Generator, shape=(4, 4)) -> np.ndarray:
    """A strictly positive joint table drawn from a flat Dirichlet."""
    p = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
    p = np.maximum(p, 1e-12)
    return p / p.sum()


# ----------------------------------------------------------------------
# oracle suites
# ----------------------------------------------------------------------
def fit_gaussian_q(x: np.ndarray, y: np.ndarray, steps: int = 2000, lr: float = 1e-3,
                   hidden: int = 16, seed: int = 0) -> GaussianQ:
    """Fit q(y | x) by full-batch NLL minimisation with Adam."""
    rng = np.random.default_rng([seed, 23])
    q = GaussianQ(x.shape[1], hidden, rng, out_dim=y.shape[1])
    params = q.parameters()
    opt = Adam(params, lr=lr, weight_decay=0.0)
    xt, yt = T.Tensor(x), T.Tensor(y)
    for _ in range(steps):
        loss = -gaussian_logprob(q, xt, yt).mean()
        T.backward(loss)
        opt.step()
    return q


@dataclass(frozen=True)
class GaussianOracleRow:
    rho: float
    dim: int
    seed: int
    n: int
    vclub: float
    analytic_mi: float
    analytic_club: float

    @property
    def gap(self) -> float:
        return self.vclub - self.analytic_mi


def gaussian_oracle_case(rho: float, dim: int, n: int = 4096, seed: int = 0, steps: int = 2000,
                         lr: float = 1e-3, hidden: int = 16) -> GaussianOracleRow:
    """Draw correlated pairs, fit q1 on them and compare vCLUB with the exact MI."""
    rhos = np.full(dim, rho)
    x, y = gaussian_pair_stream(rhos, n, seed)
    q = fit_gaussian_q(x, y, steps=steps, lr=lr, hidden=hidden, seed=seed)
    with T.no_grad():
        value = float(vclub_embedding(q, x, y).data)
    return GaussianOracleRow(rho, dim, seed, n, value, analytic_gaussian_mi(rhos), analytic_gaussian_club(rhos))


def discrete_bound_suite(n_joints: int = 1000, shape=(4, 4), seed: int = 0) -> tuple[int, int]:
    """Count random strictly positive joints where CLUB >= MI; returns (holds, total)."""
    rng = np.random.default_rng(seed)
    holds = 0
    for _ in range(n_joints):
        p = random_joint(rng, shape)
        if club_exact_discrete(p) >= discrete_mi(p):
            holds += 1
    return holds, n_joints
