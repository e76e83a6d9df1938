"""Predictive simulation study: best-m anchor search and ELPPD on a (delta, sigma) grid.

The model throughout is the two-component location mixture with known unit
variances and equal weights.  Posterior sampling is exact: allocations are
drawn from their enumerated posterior and the means conjugately.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import (
    LOG_2PI,
    AnchorSet,
    LocationPrior,
    _group_stats,
    _log_marginal_from_stats,
    anchored_marginal_loglik_enumerate,
    as_points,
    enumerate_posterior,
)
from .errors import EnumerationTooLargeError, ValidationError
from .rng import stream

MODELS_PER_M_GUARD = 10**6
TABLE_MAX_N = 13
SIM_SCHEMA = "anchormix.simulation/v1"


@dataclass(frozen=True)
class SimConfig:
    deltas: tuple = (0.25, 1.75, 2.75)
    sigmas: tuple = (0.1, 1.0)
    datasets: int = 100          # J
    n: int = 10
    replicates: int = 100        # N tilde
    draws: int = 500             # T
    m_values: tuple = tuple(range(2, 11))
    prior_mean: float = 0.0
    prior_var: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.datasets < 1 or self.replicates < 1 or self.draws < 1:
            raise ValidationError("n >= 2 and positive datasets, replicates and draws are required")
        if any(m < 2 or m > self.n for m in self.m_values):
            raise ValidationError("m must lie in 2..n so each component gets an anchor")
        for m in self.m_values:
            if anchor_model_count(self.n, m) > MODELS_PER_M_GUARD:
                raise ValidationError(f"{anchor_model_count(self.n, m)} anchor models at m = {m}; reduce n or m")

    @property
    def prior(self) -> LocationPrior:
        return LocationPrior(self.prior_mean, self.prior_var)


@dataclass(frozen=True)
class MasterBatch:
    """Standard-normal values with their true component labels (1 or 2)."""

    z: np.ndarray        # (J, n)
    labels: np.ndarray   # (J, n)


def make_master_batch(J: int, n: int, seed: int, purpose: str = "master_batch") -> MasterBatch:
    rng = stream(seed, purpose)
    z = rng.standard_normal((J, n))
    labels = rng.integers(1, 3, size=(J, n))
    return MasterBatch(z, labels)


def transform_batch(batch: MasterBatch, delta: float, sigma: float) -> np.ndarray:
    """Label-1 values stay standard normal; label-2 values become sigma * z + delta."""
    return np.where(batch.labels == 1, batch.z, sigma * batch.z + delta)


# ---------------------------------------------------------------------------
# Best anchor model search
# ---------------------------------------------------------------------------


def anchor_model_count(n: int, m: int) -> int:
    """Canonical two-component anchor models with m points and both sets non-empty."""
    return math.comb(n, m) * (2 ** (m - 1) - 1)


@lru_cache(maxsize=8)
def _ternary_digits(n: int) -> np.ndarray:
    """All 3^n codes as digits (0 = component 1, 1 = component 2, 2 = free); row 0 is most significant."""
    codes = np.arange(3**n)
    return ((codes[:, None] // 3 ** np.arange(n - 1, -1, -1)[None, :]) % 3).astype(np.int8)


@lru_cache(maxsize=8)
def _canonical_masks(n: int):
    digits = _ternary_digits(n)
    anchored = digits < 2
    m = anchored.sum(axis=1)
    first = np.argmax(anchored, axis=1)
    first_digit = digits[np.arange(digits.shape[0]), first]
    valid = (m >= 2) & (first_digit == 0) & np.any(digits == 1, axis=1)
    return m, valid


def anchored_log_evidence_table(y: np.ndarray, prior: LocationPrior, sigma2: float = 1.0) -> np.ndarray:
    """log m_A(y) for every two-component anchor assignment, indexed by ternary code.

    Built from all 2^n allocation evidences by a per-row sum transform, then
    scaled by 2^-(n - m) for the equal-weight allocation prior.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if n > TABLE_MAX_N:
        raise EnumerationTooLargeError(f"n = {n} is too large for the full evidence table")
    b = np.arange(2**n)
    allocs = ((b[:, None] >> np.arange(n - 1, -1, -1)[None, :]) & 1).astype(np.int64)
    mu, tau2 = prior.arrays(2)
    counts, sums, sumsq = _group_stats(y, allocs, 2)
    table = _log_marginal_from_stats(counts, sums, sumsq, mu, tau2, sigma2).reshape((2,) * n)
    for axis in range(n):
        free = np.logaddexp(np.take(table, 0, axis=axis), np.take(table, 1, axis=axis))
        table = np.concatenate([table, np.expand_dims(free, axis)], axis=axis)
    flat = table.reshape(-1)
    m, _ = _canonical_masks(n)
    return flat - (n - m) * np.log(2.0)


def _anchors_from_digits(d: np.ndarray) -> AnchorSet:
    return AnchorSet((tuple(np.flatnonzero(d == 0)), tuple(np.flatnonzero(d == 1))))


def best_anchor_models(y, prior: LocationPrior, sigma2: float = 1.0, m_values=None) -> dict:
    """{m: (log evidence, AnchorSet)} for the highest-evidence canonical anchor model at each m.

    Ties within 1e-12 resolve to the lexicographically smallest (A_1, A_2).
    """
    y = as_points(y)[:, 0]
    n = y.size
    m_values = range(2, n + 1) if m_values is None else m_values
    for m in m_values:
        if not 2 <= m <= n:
            raise ValidationError(f"m = {m} outside 2..{n}")
        if anchor_model_count(n, m) > MODELS_PER_M_GUARD:
            raise ValidationError(f"{anchor_model_count(n, m)} anchor models at m = {m}; reduce n or m")
    if n > TABLE_MAX_N:
        return {m: _best_by_direct_search(y, m, prior, sigma2) for m in m_values}
    scores = anchored_log_evidence_table(y, prior, sigma2)
    digits = _ternary_digits(n)
    mcount, valid = _canonical_masks(n)
    out = {}
    for m in m_values:
        idx = np.flatnonzero(valid & (mcount == m))
        s = scores[idx]
        best = s.max()
        cands = [_anchors_from_digits(digits[i]) for i in idx[s >= best - 1e-12]]
        choice = min(cands, key=lambda a: (a.sets[0], a.sets[1]))
        out[m] = (float(best), choice)
    return out


def _canonical_anchor_models(n: int, m: int):
    from itertools import combinations
    for rows in combinations(range(n), m):
        rest = rows[1:]
        for mask in range(2 ** (m - 1)):
            second = tuple(r for b, r in enumerate(rest) if mask >> b & 1)
            if not second:
                continue
            first = (rows[0],) + tuple(r for b, r in enumerate(rest) if not mask >> b & 1)
            yield AnchorSet((first, second))


def _best_by_direct_search(y, m, prior, sigma2):
    best = None
    for a in _canonical_anchor_models(len(y), m):
        s = anchored_marginal_loglik_enumerate(y, a, prior, sigma2)
        key = (a.sets[0], a.sets[1])
        if best is None or s > best[0] + 1e-12 or (abs(s - best[0]) <= 1e-12 and key < best[2]):
            best = (s, a, key)
    return best[0], best[1]


def best_anchor_model(dataset, m: int, prior: LocationPrior, sigma2: float = 1.0) -> AnchorSet:
    return best_anchor_models(dataset, prior, sigma2, [m])[m][1]


# ---------------------------------------------------------------------------
# ELPPD
# ---------------------------------------------------------------------------


def sample_location_posterior(dataset, anchors: AnchorSet, prior: LocationPrior, T: int,
                              rng: np.random.Generator, sigma2: float = 1.0) -> np.ndarray:
    """T exact posterior draws of the component means, shape (T, k)."""
    post = enumerate_posterior(dataset, anchors, prior, sigma2)
    idx = rng.choice(post.weights.size, size=T, p=post.weights)
    return post.means[idx] + np.sqrt(post.variances[idx]) * rng.standard_normal((T, anchors.k))


def elppd_from_samples(theta: np.ndarray, replicates: np.ndarray, sigma2: float = 1.0,
                       weights=None) -> float:
    """(1/N) sum_i sum_k log( T^-1 sum_t f(y~_ik | gamma_t) ) for replicates of shape (N, n)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    T, k = theta.shape
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    rep = np.atleast_2d(np.asarray(replicates, dtype=float))
    vals = rep.ravel()
    # the T-average of a k-mixture is one kT-atom mixture; shift each row by its nearest atom
    atoms = theta.T.ravel()
    log_w = np.repeat(np.log(w) - np.log(T), T)
    a = log_w[None, :] - 0.5 * (vals[:, None] - atoms[None, :]) ** 2 / sigma2
    top = a.max(axis=1, keepdims=True)
    lppd = top[:, 0] + np.log(np.exp(a - top).sum(axis=1)) - 0.5 * (LOG_2PI + np.log(sigma2))
    return float(lppd.sum() / rep.shape[0])


def elppd(dataset, anchors: AnchorSet, prior: LocationPrior, replicates: np.ndarray, T: int,
          seed: int | np.random.Generator, sigma2: float = 1.0) -> float:
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "elppd")
    theta = sample_location_posterior(dataset, anchors, prior, T, rng, sigma2)
    return elppd_from_samples(theta, replicates, sigma2)


# ---------------------------------------------------------------------------
# Simulation driver
# ---------------------------------------------------------------------------


@dataclass
class SimResult:
    config: SimConfig
    rows: list = field(default_factory=list)   # (delta, sigma, m, dataset_id, elppd, log_evidence)

    def summary(self) -> dict:
        cells = []
        for delta in self.config.deltas:
            for sigma in self.config.sigmas:
                for m in self.config.m_values:
                    v = np.array([r[4] for r in self.rows if r[0] == delta and r[1] == sigma and r[2] == m])
                    q1, med, q3 = np.percentile(v, [25, 50, 75])
                    cells.append({"delta": delta, "sigma": sigma, "m": m, "median": float(med), "q1": float(q1),
                                  "q3": float(q3), "min": float(v.min()), "max": float(v.max())})
        return {"schema": SIM_SCHEMA, "config": _config_dict(self.config),
                "transform": "y = z if label 1; y = sigma * z + delta if label 2",
                "posterior_sampling": "exact enumeration of allocations, conjugate means",
                "cells": cells}

    def cell_values(self, delta, sigma, m) -> np.ndarray:
        return np.array([r[4] for r in self.rows if r[0] == delta and r[1] == sigma and r[2] == m])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta", "sigma", "m", "dataset_id", "elppd"])
        for delta, sigma, m, j, e, _ in self.rows:
            w.writerow([repr(float(delta)), repr(float(sigma)), m, j + 1, repr(float(e))])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def _config_dict(c: SimConfig) -> dict:
    return {"deltas": list(c.deltas), "sigmas": list(c.sigmas), "datasets": c.datasets, "n": c.n,
            "replicates": c.replicates, "draws": c.draws, "m_values": list(c.m_values),
            "prior_mean": c.prior_mean, "prior_var": c.prior_var, "seed": c.seed}


def _run_cell(config: SimConfig, cell: int, delta: float, sigma: float):
    master = make_master_batch(config.datasets, config.n, config.seed)
    reps = transform_batch(make_master_batch(config.replicates, config.n, config.seed, "replicate_batch"),
                           delta, sigma)
    data = transform_batch(master, delta, sigma)
    rows = []
    for j in range(config.datasets):
        best = best_anchor_models(data[j], config.prior, 1.0, config.m_values)
        for m in config.m_values:
            score, anchors = best[m]
            rng = stream(config.seed, "elppd", cell, j, m)
            e = elppd(data[j], anchors, config.prior, reps, config.draws, rng)
            rows.append((delta, sigma, m, j, e, score))
    return rows


def _run_cell_packed(args):
    return _run_cell(*args)


def run_simulation(config: SimConfig, workers: int = 1) -> SimResult:
    """Full factorial over (delta, sigma, m, dataset); rows ordered by (delta, sigma, m, dataset)."""
    jobs = []
    cell = 0
    for delta in config.deltas:
        for sigma in config.sigmas:
            jobs.append((config, cell, delta, sigma))
            cell += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_cell_packed, jobs))
    else:
        parts = [_run_cell(*job) for job in jobs]
    rows = [r for part in parts for r in part]
    order = {(d, s): i for i, (d, s) in enumerate((d, s) for d in config.deltas for s in config.sigmas)}
    rows.sort(key=lambda r: (order[(r[0], r[1])], config.m_values.index(r[2]), r[3]))
    return SimResult(config, rows)
