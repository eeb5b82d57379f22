"""Entropic and exact optimal transport between two minibatches.

Three entropic solvers share one Sinkhorn core:

* plain entropic OT with the Gibbs kernel ``exp(-C / eps)``;
* prior-aware cost (PACM): the cost is a blend of the max-normalized
  expression cost and the max-normalized plausibility matrix. Normalizing
  by the max rescales the cost, which acts like a larger ``eps`` and spreads
  the plan out; callers get a note about this in ``Coupling.meta`` rather
  than a silent ``eps`` correction;
* prior-aware entropy (PAER): the kernel is ``Mhat * exp(-C / eps)`` where
  ``Mhat`` is the row-wise softmax of ``-M``. Only rows are normalized, so
  ``Mhat`` is row-stochastic rather than a joint distribution; the Sinkhorn
  scalings absorb the difference.

In log-domain mode (the default) the iteration runs on dual potentials with
log-sum-exp reductions and ``log Mhat`` is folded into the kernel exponent,
so neither a tiny ``eps`` nor a sharp prior underflows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from ._util import pairwise_sqdist
from .geometry import PlausibilityMatrix

ASSIGNMENT_MAX_SIDE = 512
EXACT_MAX_ENTRIES = 4096
_CHECK_EVERY = 10

NORMALIZATION_NOTE = (
    "cost and plausibility matrices were divided by their maxima before blending; "
    "this scales the kernel like a larger epsilon and yields a more diffuse plan"
)


@dataclass
class SinkhornConfig:
    epsilon: float = 0.1
    max_iters: int = 2000
    tol_marginal: float = 1e-8
    log_domain: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.tol_marginal > 0:
            raise ValueError(f"tol_marginal must be positive, got {self.tol_marginal}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class Coupling:
    plan: np.ndarray
    a: np.ndarray
    b: np.ndarray
    converged: bool
    iterations: int
    marginal_error: float
    meta: dict = field(default_factory=dict)
    # log-scalings (f, g) with plan = exp(f_k + log K_kl + g_l); None for exact plans
    potentials: tuple | None = None

    @property
    def shape(self):
        return self.plan.shape


class SinkhornError(RuntimeError):
    pass


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def euclidean_cost(X_a, X_b) -> np.ndarray:
    return pairwise_sqdist(X_a, X_b)


def max_normalize(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    top = A.max() if A.size else 0.0
    return A / top if top > 0 else np.zeros_like(A)


def pacm_cost(C, M, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    M = M.values if isinstance(M, PlausibilityMatrix) else np.asarray(M, dtype=float)
    C = np.asarray(C, dtype=float)
    if C.shape != M.shape:
        raise ValueError(f"shape mismatch: cost {C.shape} vs prior {M.shape}")
    C_n = max_normalize(C)
    M_n = max_normalize(M)
    if alpha == 1.0:
        return C_n
    if alpha == 0.0:
        return M_n
    return alpha * C_n + (1.0 - alpha) * M_n


def log_prior(M) -> np.ndarray:
    """Row-wise log-softmax of ``-M``."""
    M = M.values if isinstance(M, PlausibilityMatrix) else np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("plausibility matrix has non-finite entries")
    return -M - _lse(-M, axis=1)[:, None]


def _lse(X, axis):
    m = X.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.exp(X - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(s, axis=axis)


def _check_marginals(a, b, shape):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (shape[0],) or b.shape != (shape[1],):
        raise ValueError(f"marginals {a.shape}, {b.shape} do not match cost {shape}")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("marginals must be strictly positive")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9:
        raise ValueError("marginals must each sum to 1")
    return a, b


class _LogKernel:
    """Log-sum-exp reductions of ``log_K + potential`` via shifted matrix-vector products.

    ``lse_l(log_K[k, l] + g[l]) = rowmax_k + max(g) + log(Kr[k] @ exp(g - max(g)))``
    where ``Kr = exp(log_K - rowmax)``. Both factors are at most 1, so nothing
    overflows; terms that underflow are below 1e-308 and cannot matter unless
    the whole sum is tiny, in which case that row is reduced directly.
    """

    _SAFE = 1e-200

    def __init__(self, log_K):
        self.log_K = log_K
        self.row_max = log_K.max(axis=1)
        self.col_max = log_K.max(axis=0)
        self.K_rows = np.exp(log_K - self.row_max[:, None])
        self.K_cols_T = np.exp(log_K - self.col_max[None, :]).T.copy()

    def lse_rows(self, g):
        gm = g.max()
        s = self.K_rows @ np.exp(g - gm)
        if s.min() > self._SAFE:
            return self.row_max + gm + np.log(s)
        bad = ~(s > self._SAFE)
        out = self.row_max + gm + np.log(np.where(bad, 1.0, s))
        out[bad] = _lse(self.log_K[bad] + g[None, :], axis=1)
        return out

    def lse_cols(self, f):
        fm = f.max()
        s = self.K_cols_T @ np.exp(f - fm)
        if s.min() > self._SAFE:
            return self.col_max + fm + np.log(s)
        bad = ~(s > self._SAFE)
        out = self.col_max + fm + np.log(np.where(bad, 1.0, s))
        out[bad] = _lse(self.log_K[:, bad] + f[:, None], axis=0)
        return out


def _sinkhorn_log(log_K, a, b, cfg: SinkhornConfig):
    kern = _LogKernel(log_K)
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    it = 0
    converged = False
    while it < cfg.max_iters:
        f = log_a - kern.lse_rows(g)
        g = log_b - kern.lse_cols(f)
        it += 1
        if it % _CHECK_EVERY == 0 or it == cfg.max_iters:
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                raise SinkhornError(f"dual potentials became non-finite at iteration {it}")
            row = np.exp(f + kern.lse_rows(g))
            if float(np.max(np.abs(row - a))) <= cfg.tol_marginal:
                converged = True
                break
    plan = np.exp(log_K + f[:, None] + g[None, :])
    return plan, converged, it, _marginal_error(plan, a, b), (f, g)


def _sinkhorn_plain(K, a, b, cfg: SinkhornConfig):
    if not np.all(np.isfinite(K)):
        raise SinkhornError("kernel has non-finite entries")
    if np.any(K.sum(axis=1) <= 0) or np.any(K.sum(axis=0) <= 0):
        raise SinkhornError("kernel has an all-zero row or column; marginals are unreachable "
                            "(try log-domain mode or a larger epsilon)")
    u = np.ones_like(a)
    v = np.ones_like(b)
    it = 0
    converged = False
    while it < cfg.max_iters:
        u = a / (K @ v)
        v = b / (K.T @ u)
        it += 1
        if it % _CHECK_EVERY == 0 or it == cfg.max_iters:
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise SinkhornError(f"scalings became non-finite at iteration {it}")
            err = float(np.max(np.abs(u * (K @ v) - a)))
            if err <= cfg.tol_marginal:
                converged = True
                break
    plan = u[:, None] * K * v[None, :]
    with np.errstate(divide="ignore"):
        duals = (np.log(u), np.log(v))
    return plan, converged, it, _marginal_error(plan, a, b), duals


def _marginal_error(plan, a, b) -> float:
    return float(max(np.max(np.abs(plan.sum(axis=1) - a)), np.max(np.abs(plan.sum(axis=0) - b))))


def _solve(log_K, a, b, cfg, meta):
    if cfg.log_domain:
        plan, conv, it, err, duals = _sinkhorn_log(log_K, a, b, cfg)
    else:
        plan, conv, it, err, duals = _sinkhorn_plain(np.exp(log_K), a, b, cfg)
    meta = dict(meta, epsilon=cfg.epsilon, log_domain=cfg.log_domain)
    return Coupling(plan, a, b, conv, it, err, meta, potentials=duals)


def sinkhorn_eot(C, cfg: SinkhornConfig | None = None, a=None, b=None) -> Coupling:
    cfg = cfg or SinkhornConfig()
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or not np.all(np.isfinite(C)):
        raise ValueError("cost must be a finite 2-D matrix")
    a = uniform(C.shape[0]) if a is None else a
    b = uniform(C.shape[1]) if b is None else b
    a, b = _check_marginals(a, b, C.shape)
    return _solve(-C / cfg.epsilon, a, b, cfg, {"solver": "eot"})


def sinkhorn_paer(C, M, cfg: SinkhornConfig | None = None, a=None, b=None) -> Coupling:
    cfg = cfg or SinkhornConfig()
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or not np.all(np.isfinite(C)):
        raise ValueError("cost must be a finite 2-D matrix")
    log_M = log_prior(M)
    if log_M.shape != C.shape:
        raise ValueError(f"shape mismatch: cost {C.shape} vs prior {log_M.shape}")
    a = uniform(C.shape[0]) if a is None else a
    b = uniform(C.shape[1]) if b is None else b
    a, b = _check_marginals(a, b, C.shape)
    return _solve(log_M - C / cfg.epsilon, a, b, cfg, {"solver": "paer"})


def paer_log_kernel(C, M, epsilon: float) -> np.ndarray:
    return log_prior(M) - np.asarray(C, dtype=float) / epsilon


def exact_ot(C, a=None, b=None, max_entries: int = EXACT_MAX_ENTRIES) -> Coupling:
    """Unregularized optimal plan.

    Uniform marginals on a square problem are solved as an assignment
    (up to ``ASSIGNMENT_MAX_SIDE`` per side); anything else goes to a linear
    program capped at ``max_entries`` plan entries.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.size == 0:
        raise ValueError("cost must be a nonempty 2-D matrix")
    n_a, n_b = C.shape
    a = uniform(n_a) if a is None else np.asarray(a, dtype=float)
    b = uniform(n_b) if b is None else np.asarray(b, dtype=float)
    a, b = _check_marginals(a, b, C.shape)
    is_uniform = np.allclose(a, 1.0 / n_a, rtol=1e-12, atol=0) and np.allclose(b, 1.0 / n_b, rtol=1e-12, atol=0)

    if is_uniform and n_a == n_b and n_a <= ASSIGNMENT_MAX_SIDE:
        rows, cols = linear_sum_assignment(C)
        plan = np.zeros_like(C)
        plan[rows, cols] = 1.0 / n_a
        return Coupling(plan, a, b, True, 0, _marginal_error(plan, a, b), {"solver": "assignment"})

    if C.size > max_entries:
        raise ValueError(f"exact OT limited to {max_entries} plan entries, got {C.size}")
    ii = np.repeat(np.arange(n_a), n_b)
    jj = np.tile(np.arange(n_b), n_a)
    cols = np.arange(C.size)
    A_eq = sparse.vstack([
        sparse.csr_matrix((np.ones(C.size), (ii, cols)), shape=(n_a, C.size)),
        sparse.csr_matrix((np.ones(C.size), (jj, cols)), shape=(n_b, C.size)),
    ]).tocsr()
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"exact OT linear program failed: {res.message}")
    plan = np.clip(res.x.reshape(n_a, n_b), 0.0, None)
    return Coupling(plan, a, b, True, int(getattr(res, "nit", 0)), _marginal_error(plan, a, b), {"solver": "linprog"})


def transport_cost(plan, C) -> float:
    return float(np.sum(np.asarray(plan) * np.asarray(C)))


def plan_entropy(plan) -> float:
    p = np.asarray(plan).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def sample_pairs(coupling, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` index pairs i.i.d. with probability proportional to the plan.

    Returns an integer array of shape (count, 2) holding (row, column) pairs.
    """
    plan = coupling.plan if isinstance(coupling, Coupling) else np.asarray(coupling, dtype=float)
    p = np.clip(plan.ravel(), 0.0, None)
    total = p.sum()
    if not total > 0:
        raise ValueError("cannot sample from a plan with no mass")
    flat = rng.choice(p.size, size=int(count), p=p / total)
    return np.stack(np.unravel_index(flat, plan.shape), axis=1)
