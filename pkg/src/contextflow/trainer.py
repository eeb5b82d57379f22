"""Conditional flow matching across consecutive snapshots.

Each epoch visits every consecutive pair of training slices, draws a
minibatch from both, couples them (independent, entropic OT, or one of the
two prior-regularized variants), samples points on the noisy straight paths
between coupled cells and regresses the network onto the path slopes. The
default cadence applies one optimizer step per epoch after the pair loop.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from . import transport
from ._util import pairwise_sqdist
from .geometry import SpatialSlice, build_tpm, default_radius, neighborhood_profiles
from .transport import Coupling, SinkhornConfig
from .velocity import AdamState, DivergenceError, VelocityField, adam_step, init_field, loss_and_grad

log = logging.getLogger(__name__)

COUPLING_MODES = ("random", "eot", "pacm", "paer")


@dataclass
class TrainConfig:
    coupling_mode: str = "eot"
    lam: float = 1.0
    alpha: float = 0.5
    epsilon: float = 0.1
    sigma: float = 0.05
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 1000
    radius: Optional[float] = None
    holdout: tuple = ()
    seed: int = 0
    hidden: tuple = (64, 64, 64)
    activation: str = "silu"
    per_pair_update: bool = False
    sinkhorn_max_iters: int = 2000
    sinkhorn_tol: float = 1e-8
    log_domain: bool = True

    def __post_init__(self):
        self.holdout = tuple(int(h) for h in self.holdout)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.coupling_mode not in COUPLING_MODES:
            raise ValueError(f"coupling_mode must be one of {COUPLING_MODES}, got {self.coupling_mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon < 0 or self.sigma < 0:
            raise ValueError("epsilon and sigma must be nonnegative")
        if self.coupling_mode == "paer" and self.epsilon == 0:
            raise ValueError("prior-aware entropy regularization needs epsilon > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["holdout"] = list(self.holdout)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(self.epsilon, self.sinkhorn_max_iters, self.sinkhorn_tol, self.log_domain)


class LongitudinalDataset:
    """Ordered snapshots with normalized times running from 0 to 1."""

    def __init__(self, slices: Sequence[SpatialSlice], meta: Optional[dict] = None):
        self.slices = list(slices)
        self.meta = dict(meta or {})
        if len(self.slices) < 2:
            raise ValueError("a longitudinal dataset needs at least two slices")
        times = [s.time for s in self.slices]
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise ValueError(f"slice times must be strictly increasing, got {times}")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise ValueError(f"normalized times must start at 0 and end at 1, got {times}")
        d = {s.d for s in self.slices}
        if len(d) != 1:
            raise ValueError(f"feature dimension differs across slices: {sorted(d)}")

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, i) -> SpatialSlice:
        return self.slices[i]

    @property
    def times(self) -> List[float]:
        return [s.time for s in self.slices]

    @property
    def d(self) -> int:
        return self.slices[0].d

    def __eq__(self, other):
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return self.slices == other.slices and self.meta == other.meta


def sample_conditional_path(x_i, x_j, t_i, t_j, t, sigma, rng):
    """Noisy point on the segment from ``x_i`` (at ``t_i``) to ``x_j`` (at ``t_j``).

    Works on single vectors or row-aligned batches; ``t`` may be a scalar or
    one time per row. Returns ``(x_t, u_target)``.
    """
    if not t_j > t_i:
        raise ValueError(f"need t_i < t_j, got {t_i}, {t_j}")
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < t_i) or np.any(t > t_j):
        raise ValueError(f"t must lie in [{t_i}, {t_j}]")
    span = t_j - t_i
    w_j = (t - t_i) / span
    w_i = (t_j - t) / span
    if x_i.ndim == 2 and t.ndim == 1:
        w_i, w_j = w_i[:, None], w_j[:, None]
    mean = w_i * x_i + w_j * x_j
    x_t = mean + sigma * rng.standard_normal(mean.shape) if sigma > 0 else mean
    return x_t, (x_j - x_i) / span


@dataclass
class PriorProfiles:
    """Per-cell neighborhood means computed on a whole slice."""

    expr_means: np.ndarray
    lr_means: Optional[np.ndarray]

    def subset(self, idx) -> "PriorProfiles":
        return PriorProfiles(self.expr_means[idx], None if self.lr_means is None else self.lr_means[idx])


def slice_profiles(slice_: SpatialSlice, radius: Optional[float] = None) -> PriorProfiles:
    r = radius if radius is not None else default_radius(slice_.coords)
    return PriorProfiles(*neighborhood_profiles(slice_, r))


def _tpm(profiles_i: PriorProfiles, profiles_j: PriorProfiles, lam: float):
    ss = pairwise_sqdist(profiles_i.expr_means, profiles_j.expr_means) if lam > 0 else None
    lr = None
    if lam < 1:
        if profiles_i.lr_means is None or profiles_j.lr_means is None:
            raise ValueError("lambda < 1 requires ligand-receptor features on both slices")
        lr = pairwise_sqdist(profiles_i.lr_means, profiles_j.lr_means)
    if ss is None:
        ss = np.zeros_like(lr)
    return build_tpm(ss, lr, lam)


def make_coupling(batch_i: SpatialSlice, batch_j: SpatialSlice, cfg: TrainConfig,
                  profiles_i: Optional[PriorProfiles] = None,
                  profiles_j: Optional[PriorProfiles] = None) -> Coupling:
    """Couple two minibatches according to ``cfg.coupling_mode``.

    The expression cost is max-normalized in every OT mode so that one
    ``epsilon`` means the same thing across modes. Neighborhood profiles
    default to being computed on the minibatches themselves; the trainer
    passes whole-slice profiles restricted to the minibatch instead.
    """
    n_i, n_j = batch_i.n, batch_j.n
    a, b = transport.uniform(n_i), transport.uniform(n_j)
    if cfg.coupling_mode == "random":
        plan = np.outer(a, b)
        return Coupling(plan, a, b, True, 0, 0.0, {"solver": "independent"})

    C = transport.max_normalize(transport.euclidean_cost(batch_i.expr, batch_j.expr))
    if cfg.coupling_mode == "eot":
        return _entropic_or_exact(C, cfg)

    if profiles_i is None:
        profiles_i = slice_profiles(batch_i, cfg.radius)
    if profiles_j is None:
        profiles_j = slice_profiles(batch_j, cfg.radius)
    M = _tpm(profiles_i, profiles_j, cfg.lam)
    if cfg.coupling_mode == "pacm":
        coupling = _entropic_or_exact(transport.pacm_cost(C, M, cfg.alpha), cfg)
        coupling.meta["note"] = transport.NORMALIZATION_NOTE
        return coupling
    return transport.sinkhorn_paer(C, M, cfg.sinkhorn(), a, b)


def _entropic_or_exact(C, cfg: TrainConfig) -> Coupling:
    if cfg.epsilon == 0:
        return transport.exact_ot(C, max_entries=max(C.size, transport.EXACT_MAX_ENTRIES))
    return transport.sinkhorn_eot(C, cfg.sinkhorn())


@dataclass
class TrainResult:
    field: VelocityField
    optimizer: AdamState
    log: List[dict]
    slice_usage: Counter = field(default_factory=Counter)


def training_pairs(n_slices: int, holdout: Sequence[int]):
    keep = [i for i in range(n_slices) if i not in set(holdout)]
    return list(zip(keep[:-1], keep[1:]))


def _minibatch(rng, n, size):
    if size >= n:
        return np.arange(n)
    return rng.choice(n, size=size, replace=False)


def train(dataset: LongitudinalDataset, cfg: TrainConfig,
          field: Optional[VelocityField] = None,
          optimizer: Optional[AdamState] = None) -> TrainResult:
    for h in cfg.holdout:
        if not 0 <= h < len(dataset):
            raise ValueError(f"holdout index {h} out of range for {len(dataset)} slices")
    pairs = training_pairs(len(dataset), cfg.holdout)
    if not pairs:
        raise ValueError("need at least two slices that are not held out")

    init_seq, run_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(run_seq)
    if field is None:
        field = init_field(dataset.d, cfg.hidden, seed=init_seq, activation=cfg.activation)
    if optimizer is None:
        optimizer = AdamState.for_field(field, lr=cfg.lr)

    used = sorted({i for p in pairs for i in p})
    profiles = {}
    if cfg.coupling_mode in ("pacm", "paer"):
        profiles = {i: slice_profiles(dataset[i], cfg.radius) for i in used}

    usage: Counter = Counter()
    records = []
    for epoch in range(cfg.epochs):
        chunks, diag, pair_losses = [], [], []
        for i, j in pairs:
            s_i, s_j = dataset[i], dataset[j]
            idx_i = _minibatch(rng, s_i.n, cfg.batch_size)
            idx_j = _minibatch(rng, s_j.n, cfg.batch_size)
            usage[i] += 1
            usage[j] += 1
            coupling = make_coupling(
                s_i.subset(idx_i), s_j.subset(idx_j), cfg,
                profiles[i].subset(idx_i) if profiles else None,
                profiles[j].subset(idx_j) if profiles else None,
            )
            diag.append({
                "pair": [i, j],
                "iterations": coupling.iterations,
                "marginal_error": coupling.marginal_error,
                "converged": bool(coupling.converged),
            })
            kl = transport.sample_pairs(coupling, cfg.batch_size, rng)
            x0 = s_i.expr[idx_i[kl[:, 0]]]
            x1 = s_j.expr[idx_j[kl[:, 1]]]
            t = rng.uniform(s_i.time, s_j.time, size=len(kl))
            x_t, u = sample_conditional_path(x0, x1, s_i.time, s_j.time, t, cfg.sigma, rng)
            if cfg.per_pair_update:
                loss, grads = _checked_loss(field, t, x_t, u, epoch)
                field, optimizer = adam_step(field, optimizer, grads)
                pair_losses.append(loss)
            else:
                chunks.append((t, x_t, u))

        if cfg.per_pair_update:
            loss = float(np.mean(pair_losses))
        else:
            T = np.concatenate([c[0] for c in chunks])
            X = np.concatenate([c[1] for c in chunks])
            U = np.concatenate([c[2] for c in chunks])
            loss, grads = _checked_loss(field, T, X, U, epoch)
            field, optimizer = adam_step(field, optimizer, grads)
        records.append({"epoch": epoch, "loss": loss, "pairs": diag})
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.6g", epoch, loss)
    return TrainResult(field, optimizer, records, usage)


def _checked_loss(field, t, x, u, epoch):
    try:
        loss, grads = loss_and_grad(field, t, x, u)
    except (DivergenceError, ValueError) as exc:
        raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError(f"training diverged at epoch {epoch}: loss={loss}")
    return loss, grads
