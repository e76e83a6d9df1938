"""Anchor selection: anchored EM and minimum-entropy search."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize

from .asymptotics import DEFAULT_PERM_CAP, all_permutations, log_entropy_from_logits
from .core import (
    AnchorSet,
    MixtureParams,
    PriorSpec,
    as_points,
    component_logpdf,
    log_prior_density,
    log_responsibilities,
)
from .errors import (
    AllStartsFailedError,
    InfeasibleBudgetError,
    NumericalError,
    ValidationError,
    WeightMapUndefinedError,
)
from .rng import stream

log = logging.getLogger(__name__)

INNER_TOL = 1e-10
INNER_MAX_SWEEPS = 100


# ---------------------------------------------------------------------------
# E step
# ---------------------------------------------------------------------------


def _check_budgets(budgets: Sequence[int], n: int, k: int) -> np.ndarray:
    budgets = np.asarray(budgets, dtype=int)
    if budgets.shape != (k,):
        raise ValidationError(f"need one anchor budget per component ({k}), got {budgets.shape}")
    if np.any(budgets < 0):
        raise ValidationError("anchor budgets must be non-negative")
    if budgets.sum() > n:
        raise InfeasibleBudgetError(f"total anchor budget {budgets.sum()} exceeds n = {n}")
    return budgets


def assignment_objective(resp: np.ndarray, anchors: AnchorSet) -> float:
    return float(sum(resp[list(s), j].sum() for j, s in enumerate(anchors.sets)))


def e_step_assign(resp: np.ndarray, budgets: Sequence[int], solver: str = "exact") -> AnchorSet:
    """Disjoint anchor sets with |A_j| = m_j maximizing sum_j sum_{i in A_j} r_ij.

    ``exact`` solves the transportation problem as a rectangular assignment
    with component j replicated m_j times; ``greedy`` repeatedly takes the
    largest remaining r_ij among unanchored rows and unfilled components.
    Equal values resolve to the lowest row index.
    """
    resp = np.asarray(resp, dtype=float)
    n, k = resp.shape
    budgets = _check_budgets(budgets, n, k)
    if solver == "exact":
        cols = np.repeat(np.arange(k), budgets)
        if cols.size == 0:
            return AnchorSet.empty(k)
        # lexicographic tie-break toward low row indices; far below any real gap
        tiebreak = np.arange(n)[:, None] * (1e-13 / max(n, 1))
        rows, picked = linear_sum_assignment(resp[:, cols] - tiebreak, maximize=True)
        sets = [[] for _ in range(k)]
        for i, c in zip(rows, picked):
            sets[cols[c]].append(int(i))
        return AnchorSet(tuple(tuple(s) for s in sets))
    if solver == "greedy":
        return _greedy_assign(resp, budgets)
    raise ValidationError(f"unknown E-step solver {solver!r}")


def _greedy_assign(resp: np.ndarray, budgets: np.ndarray) -> AnchorSet:
    n, k = resp.shape
    work = resp.copy()
    remaining = budgets.copy()
    work[:, remaining == 0] = -np.inf
    sets = [[] for _ in range(k)]
    for _ in range(int(budgets.sum())):
        flat = int(np.argmax(work))      # row-major: lowest row wins ties
        i, j = divmod(flat, k)
        sets[j].append(i)
        work[i, :] = -np.inf
        remaining[j] -= 1
        if remaining[j] == 0:
            work[:, j] = -np.inf
    return AnchorSet(tuple(tuple(s) for s in sets))


# ---------------------------------------------------------------------------
# M step
# ---------------------------------------------------------------------------


def _map_weights(counts: np.ndarray, alpha: float) -> np.ndarray:
    k = counts.size
    num = counts + alpha - 1.0
    if np.any(num < 0):
        j = int(np.flatnonzero(num < 0)[0])
        raise WeightMapUndefinedError(
            f"Dirichlet({alpha}) MAP undefined: component {j} has expected count {counts[j]:.4g} < {1 - alpha:.4g}")
    total = counts.sum() + k * (alpha - 1.0)
    return num / total


def m_step(data, resp: np.ndarray, prior: PriorSpec, init: MixtureParams | None = None) -> MixtureParams:
    """Maximizer of the expected complete-data log posterior under q = resp."""
    y = as_points(data)
    prior.check_dimension(y.shape[1])
    q = np.asarray(resp, dtype=float)
    counts = q.sum(axis=0)
    weights = _map_weights(counts, prior.dirichlet)
    if prior.family == "normal_gamma":
        means, var = _m_step_normal_gamma(y[:, 0], q, counts, prior, init)
        return MixtureParams(means[:, None], var, weights)
    means, covs = _m_step_normal_wishart(y, q, counts, prior)
    if y.shape[1] == 1:
        covs = covs[:, 0, 0]
    return MixtureParams(means, covs, weights)


def _m_step_normal_gamma(y, q, counts, prior, init):
    kappa, mu = prior.kappa, prior.mean[0]
    a0, b0 = prior.shape, prior.rate_point
    sy = q.T @ y
    if init is not None:
        var = np.array(init.scales, dtype=float)
    else:
        var = np.full(q.shape[1], max(np.var(y), 1e-8))
    theta = None
    for _ in range(INNER_MAX_SWEEPS):
        theta_new = (kappa * mu + sy / var) / (kappa + counts / var)
        ss = (q * (y[:, None] - theta_new[None, :]) ** 2).sum(axis=0)
        var_new = (2.0 * b0 + ss) / (2.0 * a0 + 2.0 + counts)
        done = theta is not None and np.all(np.abs(theta_new - theta) <= INNER_TOL * (1 + np.abs(theta))) \
            and np.all(np.abs(var_new - var) <= INNER_TOL * var)
        theta, var = theta_new, var_new
        if done:
            break
    return theta, var


def _m_step_normal_wishart(y, q, counts, prior):
    n, p = y.shape
    k = q.shape[1]
    kappa, mu = prior.kappa, prior.mean
    psi = np.linalg.inv(prior.scale_matrix)
    means = (kappa * mu[None, :] + q.T @ y) / (kappa + counts)[:, None]
    covs = np.empty((k, p, p))
    for j in range(k):
        d = y - means[j]
        S = (q[:, j, None] * d).T @ d
        dm = means[j] - mu
        B = psi + S + kappa * np.outer(dm, dm)
        covs[j] = 0.5 * (B + B.T) / (counts[j] + prior.dof + p + 2.0)
    return means, covs


# ---------------------------------------------------------------------------
# Lower bound
# ---------------------------------------------------------------------------


def kl_per_row(q: np.ndarray, log_r: np.ndarray) -> float:
    """sum_i sum_j q_ij log(q_ij / r_ij) with 0 log 0 = 0."""
    pos = q > 0
    if np.any(pos & ~np.isfinite(log_r)):
        return np.inf
    with np.errstate(divide="ignore"):
        logq = np.log(np.where(pos, q, 1.0))
    return float(np.sum(np.where(pos, q * (logq - log_r), 0.0)))


def lower_bound(data, anchors: AnchorSet, params: MixtureParams, prior: PriorSpec,
                resp: np.ndarray | None = None) -> float:
    """F(gamma, eta, q) = log p(gamma, eta | y) - KL(q || q*) up to the evidence constant.

    ``resp`` is q (anchored rows one-hot); when omitted q equals the
    unconstrained responsibilities off the anchors.  Returns -inf when an
    anchored row has zero responsibility for its component.
    """
    y = as_points(data)
    n = y.shape[0]
    log_w = np.log(np.maximum(params.weights, 0.0), where=params.weights > 0,
                   out=np.full(params.k, -np.inf))
    a = log_w[None, :] + component_logpdf(params, y)
    mx = a.max(axis=1, keepdims=True)
    norm = mx[:, 0] + np.log(np.exp(a - mx).sum(axis=1))
    log_r = a - norm[:, None]
    log_post = float(norm.sum()) + log_prior_density(params, prior)
    if resp is None:
        q = np.exp(log_r)
    else:
        q = np.array(resp, dtype=float)
    labels = anchors.labels(n)
    rows = np.flatnonzero(labels >= 0)
    q[rows] = 0.0
    q[rows, labels[rows]] = 1.0
    kl = kl_per_row(q, log_r)
    if not np.isfinite(kl):
        warnings.warn("anchored row has zero responsibility for its component; lower bound is -inf",
                      RuntimeWarning, stacklevel=2)
        return -np.inf
    return log_post - kl


# ---------------------------------------------------------------------------
# Anchored EM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EMConfig:
    k: int
    budgets: tuple
    tol: float = 1e-8
    max_iter: int = 1000
    n_starts: int = 25
    solver: str = "exact"
    seed: int = 0

    def __post_init__(self):
        budgets = self.budgets
        if isinstance(budgets, int):
            budgets = (budgets,) * self.k
        budgets = tuple(int(b) for b in budgets)
        object.__setattr__(self, "budgets", budgets)
        if self.k < 2:
            raise ValidationError("anchored EM needs k >= 2")
        if len(budgets) != self.k:
            raise ValidationError("need one anchor budget per component")
        if self.tol <= 0:
            raise ValidationError("tol must be positive")
        if sum(1 for b in budgets if b >= 1) < self.k - 1:
            raise ValidationError("at least k - 1 components need an anchor for a unique labeling")
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValidationError("n_starts and max_iter must be positive")
        if self.solver not in ("exact", "greedy"):
            raise ValidationError(f"unknown E-step solver {self.solver!r}")


@dataclass
class EMState:
    params: MixtureParams
    anchors: AnchorSet
    resp: np.ndarray
    lower_bound: float
    iteration: int


@dataclass
class StartTrace:
    start: int
    iterations: list = field(default_factory=list)   # (iteration, F, AnchorSet)
    converged: bool = False
    error: str | None = None

    @property
    def values(self) -> np.ndarray:
        return np.array([f for _, f, _ in self.iterations])


@dataclass
class EMResult:
    best: EMState
    best_start: int
    traces: list


def _initial_params(y: np.ndarray, k: int, rng: np.random.Generator) -> MixtureParams:
    n, p = y.shape
    rows = rng.choice(n, size=k, replace=False)
    if p == 1:
        scales = np.full(k, np.var(y))
    else:
        scales = np.repeat(np.cov(y, rowvar=False)[None, :, :], k, axis=0)
    return MixtureParams(y[rows], scales, np.full(k, 1.0 / k))


def _run_start(y, prior, config: EMConfig, start: int):
    rng = stream(config.seed, "em", start)
    trace = StartTrace(start)
    state = None
    try:
        params = _initial_params(y, config.k, rng)
        prev = None
        for it in range(1, config.max_iter + 1):
            log_r = log_responsibilities(y, params)
            r = np.exp(log_r)
            anchors = e_step_assign(r, config.budgets, config.solver)
            q = r.copy()
            labels = anchors.labels(y.shape[0])
            rows = np.flatnonzero(labels >= 0)
            q[rows] = 0.0
            q[rows, labels[rows]] = 1.0
            params = m_step(y, q, prior, init=params)
            F = lower_bound(y, anchors, params, prior, q)
            if not np.isfinite(F):
                raise NumericalError(f"lower bound became non-finite at iteration {it}")
            trace.iterations.append((it, F, anchors))
            state = EMState(params, anchors, q, F, it)
            if prev is not None and F - prev < config.tol:
                trace.converged = True
                break
            prev = F
    except (NumericalError, np.linalg.LinAlgError, ValidationError, FloatingPointError) as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
        state = None
    return state, trace


def _run_start_packed(args):
    return _run_start(*args)


def canonicalize_state(state: EMState) -> EMState:
    order = state.anchors.canonical_order()
    return EMState(state.params.permuted(order), state.anchors.permuted(order),
                   state.resp[:, order], state.lower_bound, state.iteration)


def anchored_em(data, prior: PriorSpec, config: EMConfig, workers: int = 1) -> EMResult:
    """Multi-start anchored EM; the winner has the largest final lower bound.

    The returned best state is relabeled to the canonical anchor labeling.
    """
    y = as_points(data)
    prior.check_dimension(y.shape[1])
    if config.k > y.shape[0]:
        raise ValidationError("k exceeds the number of observations")
    jobs = [(y, prior, config, s) for s in range(config.n_starts)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_start_packed, jobs))
    else:
        results = [_run_start(*job) for job in jobs]
    traces = [t for _, t in results]
    best, best_start = None, -1
    for s, (state, _) in enumerate(results):
        if state is not None and (best is None or state.lower_bound > best.lower_bound):
            best, best_start = state, s
    if best is None:
        raise AllStartsFailedError("every anchored EM start failed",
                                   diagnostics=[{"start": t.start, "error": t.error} for t in traces])
    return EMResult(canonicalize_state(best), best_start, traces)


# ---------------------------------------------------------------------------
# Minimum-entropy selection
# ---------------------------------------------------------------------------


def snap_to_observations(x_star: np.ndarray, points) -> list[int]:
    """Map each coordinate vector to a distinct nearest observation.

    Pairs are committed greedily by increasing distance; a taken row is
    skipped and ties go to the lowest row index.  Returns rows aligned with
    the rows of ``x_star``.
    """
    y = as_points(points)
    x = np.asarray(x_star, dtype=float).reshape(-1, y.shape[1])
    if x.shape[0] > y.shape[0]:
        raise InfeasibleBudgetError("more anchor coordinates than observations")
    d = np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2))
    out = [-1] * x.shape[0]
    # stable sort on (distance, row, coordinate)
    order = np.lexsort((np.repeat(np.arange(x.shape[0])[:, None], y.shape[0], axis=1).ravel(),
                        np.tile(np.arange(y.shape[0]), x.shape[0]),
                        d.ravel()))
    taken = set()
    for flat in order:
        c, i = divmod(int(flat), y.shape[0])
        if out[c] >= 0 or i in taken:
            continue
        out[c] = i
        taken.add(i)
        if len(taken) == x.shape[0]:
            break
    return out


class _EntropyObjective:
    def __init__(self, gamma0: MixtureParams, budgets: np.ndarray, cap: int):
        self.gamma0 = gamma0
        self.budgets = budgets
        self.owner = np.repeat(np.arange(gamma0.k), budgets)
        self.perms = all_permutations(gamma0.k, cap)
        self.rows = np.arange(gamma0.k)[None, :]

    def logits(self, x: np.ndarray) -> np.ndarray:
        p = self.gamma0.p
        lp = component_logpdf(self.gamma0, x.reshape(-1, p))          # (m, k)
        L = np.zeros((self.gamma0.k, self.gamma0.k))
        np.add.at(L, self.owner, lp)
        return L[self.rows, self.perms].sum(axis=1)

    def log_entropy(self, x: np.ndarray) -> float:
        return log_entropy_from_logits(self.logits(x))

    def entropy(self, x: np.ndarray) -> float:
        return float(np.exp(self.log_entropy(x)))


@dataclass
class MinEntropyResult:
    anchors: AnchorSet
    x_star: np.ndarray
    entropy: float
    converged: bool
    warning: str | None = None


def anchor_set_entropy(data, anchors: AnchorSet, gamma0: MixtureParams, cap: int = DEFAULT_PERM_CAP) -> float:
    from .asymptotics import relabeling_entropy, relabeling_probs
    return relabeling_entropy(relabeling_probs(anchors.values(data), gamma0, cap))


def min_entropy_select(data, gamma_hat: MixtureParams, budgets: Sequence[int], opt_tol: float = 1e-10,
                       n_starts: int = 10, seed: int = 0, initial: Sequence[AnchorSet] = (),
                       max_restarts: int = 3, perm_cap: int = DEFAULT_PERM_CAP) -> MinEntropyResult:
    """Anchors minimizing the plug-in relabeling entropy.

    The entropy is minimized as a smooth function of the anchor coordinates
    (its logarithm, for conditioning; same minimizers) with a bounded
    quasi-Newton method and finite-difference gradients, from random data
    subsets and from any ``initial`` anchor sets.  Each optimum is snapped to
    observations; the lowest-entropy snapped set wins, with ``initial`` sets
    themselves kept as candidates.
    """
    y = as_points(data)
    n, p = y.shape
    budgets = _check_budgets(budgets, n, gamma_hat.k)
    obj = _EntropyObjective(gamma_hat, budgets, perm_cap)
    m = int(budgets.sum())
    lo, hi = y.min(axis=0), y.max(axis=0)
    bounds = list(zip(np.tile(lo, m), np.tile(hi, m)))
    rng = stream(seed, "min_entropy", 0)

    def to_anchor_set(rows):
        sets = [[] for _ in range(gamma_hat.k)]
        for c, i in enumerate(rows):
            sets[obj.owner[c]].append(i)
        return AnchorSet(tuple(tuple(s) for s in sets))

    starts = []
    for a in initial:
        if a.sizes != tuple(budgets):
            raise ValidationError("initial anchor sets must match the budgets")
        starts.append(np.concatenate([y[list(s)] for s in a.sets if s]).ravel())
    for _ in range(n_starts):
        starts.append(y[rng.choice(n, size=m, replace=False)].ravel())

    best = None
    any_converged = False
    for a in initial:
        h = anchor_set_entropy(y, a, gamma_hat, perm_cap)
        cand = (h, a, np.concatenate([y[list(s)] for s in a.sets if s]))
        if best is None or h < best[0]:
            best = cand
    for x0 in starts:
        res = None
        for attempt in range(max_restarts):
            res = minimize(obj.log_entropy, x0, method="L-BFGS-B", bounds=bounds,
                           options={"ftol": opt_tol, "gtol": opt_tol, "maxiter": 2000})
            if res.success:
                break
            x0 = res.x
        any_converged |= bool(res.success)
        rows = snap_to_observations(res.x.reshape(m, p), y)
        anchors = to_anchor_set(rows)
        h = anchor_set_entropy(y, anchors, gamma_hat, perm_cap)
        if best is None or h < best[0] - 1e-15:
            best = (h, anchors, res.x.reshape(m, p))
    warning = None if any_converged else "entropy optimizer did not report convergence from any start"
    if warning:
        log.warning(warning)
    h, anchors, x_star = best
    return MinEntropyResult(anchors.canonical(), np.asarray(x_star).reshape(m, p), h, any_converged, warning)
