"""Multi-chain Gibbs sampler for anchored Gaussian mixtures, plus posterior summaries."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from .core import AnchorSet, MixtureParams, PriorSpec, as_points, component_logpdf
from .errors import AnchorMixError, ChainFailureError, ValidationError
from .rng import stream

DRAWS_SCHEMA = "anchormix.draws/v1"
SUMMARY_SCHEMA = "anchormix.summary/v1"
KDE_GRID = 512
KDE_BANDWIDTH = "silverman"


@dataclass(frozen=True)
class SamplerConfig:
    """``iterations`` counts every sweep of a chain, burn-in included."""

    chains: int = 50
    iterations: int = 10_000
    burn_in: int = 1_000
    target_draws: int = 5_000
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValidationError("need at least one chain")
        if self.iterations <= self.burn_in or self.burn_in < 0:
            raise ValidationError("iterations must exceed burn_in")
        if not 1 <= self.target_draws <= self.chains * (self.iterations - self.burn_in):
            raise ValidationError("target_draws must be between 1 and chains * (iterations - burn_in)")

    def kept_iterations(self, chain: int) -> np.ndarray:
        """0-based sweep indices stored for ``chain``: evenly spaced, tail remainder dropped."""
        quota = self.target_draws // self.chains + (1 if chain < self.target_draws % self.chains else 0)
        if quota == 0:
            return np.empty(0, dtype=int)
        stride = (self.iterations - self.burn_in) // quota
        return self.burn_in + stride * np.arange(1, quota + 1) - 1


@dataclass
class ChainState:
    alloc: np.ndarray
    means: np.ndarray          # (k, p)
    covs: np.ndarray           # (k, p, p)
    weights: np.ndarray
    rate: float | None = None  # b0 when it has a hyperprior

    def params(self) -> MixtureParams:
        k, p = self.means.shape
        scales = self.covs[:, 0, 0] if p == 1 else self.covs
        return MixtureParams(self.means, scales, self.weights)


@dataclass
class PosteriorDraws:
    means: np.ndarray          # (D, k, p)
    covs: np.ndarray           # (D, k, p, p)
    weights: np.ndarray        # (D, k)
    rate: np.ndarray | None    # (D,) or None
    alloc: np.ndarray          # (D, n)
    chain: np.ndarray
    iteration: np.ndarray      # 1-based sweep number
    anchors: AnchorSet

    def __post_init__(self):
        labels = self.anchors.labels(self.alloc.shape[1])
        rows = np.flatnonzero(labels >= 0)
        if rows.size and not np.all(self.alloc[:, rows] == labels[rows][None, :]):
            raise AnchorMixError("a stored allocation leaves the anchored support")

    @property
    def size(self) -> int:
        return self.means.shape[0]

    @property
    def k(self) -> int:
        return self.means.shape[1]

    @property
    def p(self) -> int:
        return self.means.shape[2]

    @property
    def variances(self) -> np.ndarray:
        """(D, k, p) diagonal of each covariance draw."""
        return np.diagonal(self.covs, axis1=2, axis2=3)

    @classmethod
    def concatenate(cls, parts: list["PosteriorDraws"]) -> "PosteriorDraws":
        rate = None if parts[0].rate is None else np.concatenate([d.rate for d in parts])
        return cls(np.concatenate([d.means for d in parts]), np.concatenate([d.covs for d in parts]),
                   np.concatenate([d.weights for d in parts]), rate,
                   np.concatenate([d.alloc for d in parts]), np.concatenate([d.chain for d in parts]),
                   np.concatenate([d.iteration for d in parts]), parts[0].anchors)


# ---------------------------------------------------------------------------
# Full conditionals
# ---------------------------------------------------------------------------


def _wishart_cov_draw(rng: np.random.Generator, dof: float, scale_inv: np.ndarray) -> np.ndarray:
    """Sigma = Lambda^{-1} with Lambda ~ Wishart(dof, scale_inv^{-1}) via the Bartlett factor."""
    p = scale_inv.shape[0]
    V = np.linalg.inv(scale_inv)
    L = np.linalg.cholesky(0.5 * (V + V.T))
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(dof - np.arange(p)))
    A[np.tril_indices(p, -1)] = rng.standard_normal(p * (p - 1) // 2)
    LA = L @ A
    inv = np.linalg.inv(LA)
    cov = inv.T @ inv
    return 0.5 * (cov + cov.T)


def sample_allocations(rng, y, state: ChainState, free: np.ndarray) -> None:
    if free.size == 0:
        return
    logits = np.log(state.weights)[None, :] + component_logpdf(state.params(), y[free])
    logits -= logits.max(axis=1, keepdims=True)
    cum = np.cumsum(np.exp(logits), axis=1)
    u = rng.random(free.size) * cum[:, -1]
    state.alloc[free] = np.minimum((cum < u[:, None]).sum(axis=1), state.weights.size - 1)


def update_parameters(rng, y, state: ChainState, prior: PriorSpec) -> None:
    """theta -> scales -> b0 -> eta given the current allocation."""
    k = state.weights.size
    counts = np.bincount(state.alloc, minlength=k).astype(float)
    if prior.family == "normal_gamma":
        yv = y[:, 0]
        lam = 1.0 / state.covs[:, 0, 0]
        sums = np.bincount(state.alloc, weights=yv, minlength=k)
        prec = prior.kappa + counts * lam
        mean = (prior.kappa * prior.mean[0] + lam * sums) / prec
        theta = mean + rng.standard_normal(k) / np.sqrt(prec)
        ss = np.bincount(state.alloc, weights=(yv - theta[state.alloc]) ** 2, minlength=k)
        rate = state.rate if prior.rate_hyper is not None else prior.rate
        lam = rng.gamma(prior.shape + 0.5 * counts, 1.0 / (rate + 0.5 * ss))
        state.means[:, 0] = theta
        state.covs[:, 0, 0] = 1.0 / lam
        if prior.rate_hyper is not None:
            g, h = prior.rate_hyper
            state.rate = float(rng.gamma(g + k * prior.shape, 1.0 / (h + lam.sum())))
    else:
        p = y.shape[1]
        psi = np.linalg.inv(prior.scale_matrix)
        for j in range(k):
            yj = y[state.alloc == j]
            nj = counts[j]
            center = (prior.kappa * prior.mean + yj.sum(axis=0)) / (prior.kappa + nj)
            Lc = np.linalg.cholesky(state.covs[j] / (prior.kappa + nj))
            theta = center + Lc @ rng.standard_normal(p)
            d = yj - theta
            dm = theta - prior.mean
            B = psi + d.T @ d + prior.kappa * np.outer(dm, dm)
            state.means[j] = theta
            state.covs[j] = _wishart_cov_draw(rng, prior.dof + nj + 1.0, B)
    state.weights = rng.dirichlet(prior.dirichlet + counts)
    # Dirichlet draws can underflow to exact zeros for tiny concentrations
    if np.any(state.weights <= 0):
        state.weights = np.maximum(state.weights, np.finfo(float).tiny)
        state.weights /= state.weights.sum()


def gibbs_sweep(rng, y, labels: np.ndarray, prior: PriorSpec, state: ChainState) -> ChainState:
    """One full cycle s -> theta -> scales -> b0 -> eta; mutates and returns ``state``."""
    sample_allocations(rng, y, state, np.flatnonzero(labels < 0))
    update_parameters(rng, y, state, prior)
    return state


def _finite(state: ChainState) -> bool:
    ok = np.all(np.isfinite(state.means)) and np.all(np.isfinite(state.covs)) and np.all(np.isfinite(state.weights))
    if state.rate is not None:
        ok = ok and np.isfinite(state.rate) and state.rate > 0
    return bool(ok and np.all(np.diagonal(state.covs, axis1=1, axis2=2) > 0))


def initial_state(rng, y, labels, prior: PriorSpec, k: int, init: MixtureParams | None) -> ChainState:
    n, p = y.shape
    free = np.flatnonzero(labels < 0)
    alloc = labels.copy()
    rate = prior.rate_point if prior.rate_hyper is not None else None
    if init is not None:
        state = ChainState(alloc, np.array(init.means, dtype=float), np.array(init.covariances(), dtype=float),
                           np.array(init.weights, dtype=float), rate)
        sample_allocations(rng, y, state, free)
        return state
    alloc[free] = rng.integers(0, k, size=free.size)
    cov = np.atleast_2d(np.cov(y, rowvar=False)) if n > 1 else np.eye(p)
    if not np.all(np.linalg.eigvalsh(cov) > 0):
        cov = cov + np.eye(p) * 1e-6
    state = ChainState(alloc, np.repeat(y.mean(axis=0)[None, :], k, axis=0), np.repeat(cov[None], k, axis=0),
                       np.full(k, 1.0 / k), rate)
    update_parameters(rng, y, state, prior)
    return state


def _run_chain(y, labels, prior, config: SamplerConfig, chain: int, k: int, init):
    rng = stream(config.seed, "gibbs", chain)
    keep = config.kept_iterations(chain)
    D, (n, p) = keep.size, y.shape
    out_means = np.empty((D, k, p))
    out_covs = np.empty((D, k, p, p))
    out_w = np.empty((D, k))
    out_rate = np.empty(D) if prior.rate_hyper is not None else None
    out_alloc = np.empty((D, n), dtype=np.int16)
    state = initial_state(rng, y, labels, prior, k, init)
    slot = 0
    free = np.flatnonzero(labels < 0)
    for it in range(config.iterations):
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                sample_allocations(rng, y, state, free)
                update_parameters(rng, y, state, prior)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            raise ChainFailureError(f"chain {chain} failed at iteration {it + 1}: {exc}", chain, it + 1) from exc
        if not _finite(state):
            raise ChainFailureError(f"chain {chain} produced non-finite parameters at iteration {it + 1}",
                                    chain, it + 1)
        if slot < D and it == keep[slot]:
            out_means[slot] = state.means
            out_covs[slot] = state.covs
            out_w[slot] = state.weights
            if out_rate is not None:
                out_rate[slot] = state.rate
            out_alloc[slot] = state.alloc
            slot += 1
    return out_means, out_covs, out_w, out_rate, out_alloc, np.full(D, chain), keep + 1


def _run_chain_packed(args):
    return _run_chain(*args)


def gibbs_fit(data, anchors: AnchorSet, prior: PriorSpec, config: SamplerConfig,
              init: MixtureParams | None = None, workers: int = 1) -> PosteriorDraws:
    """Posterior draws pooled over chains in chain order.

    ``init`` (typically the anchored EM MAP) seeds each chain's allocations
    from its responsibilities; without it allocations start uniform.
    Anchored counts enter the Dirichlet update.
    """
    y = as_points(data)
    prior.check_dimension(y.shape[1])
    k = anchors.k
    labels = anchors.labels(y.shape[0])
    if anchors.k0 < k - 1:
        raise ValidationError("anchor model needs k0 >= k - 1 non-empty anchor sets")
    if init is not None and (init.k != k or init.p != y.shape[1]):
        raise ValidationError("initial parameters do not match k and p")
    jobs = [(y, labels, prior, config, c, k, init) for c in range(config.chains)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chain_packed, jobs))
    else:
        parts = [_run_chain(*job) for job in jobs]
    cat = lambda i: np.concatenate([part[i] for part in parts])  # noqa: E731
    rate = None if prior.rate_hyper is None else cat(3)
    return PosteriorDraws(cat(0), cat(1), cat(2), rate, cat(4), cat(5), cat(6), anchors)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def _kde_grid(x: np.ndarray) -> dict:
    x = np.asarray(x, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        return {"point_mass": lo, "grid": None, "density": None}
    kde = gaussian_kde(x, bw_method=KDE_BANDWIDTH)
    bw = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(lo - 3 * bw, hi + 3 * bw, KDE_GRID)
    return {"grid": grid.tolist(), "density": kde(grid).tolist(), "bandwidth": bw}


def _histogram(x: np.ndarray, bins: int = 50) -> dict:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        return {"edges": [lo, lo], "counts": [int(x.size)]}
    counts, edges = np.histogram(x, bins=bins)
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def _mean_sd(x: np.ndarray, axis=0):
    mean = np.mean(x, axis=axis)
    sd = np.std(x, axis=axis, ddof=1) if x.shape[axis] > 1 else np.zeros_like(mean)
    return mean, sd


def summarize(draws: PosteriorDraws, densities: bool = True) -> dict:
    """Posterior means and standard deviations per component, plus density grids."""
    if draws.size == 0:
        raise ValidationError("no draws to summarize")
    k, p = draws.k, draws.p
    th_mean, th_sd = _mean_sd(draws.means)
    var = draws.variances
    w_mean, w_sd = _mean_sd(draws.weights)
    out = {
        "schema": SUMMARY_SCHEMA,
        "draws": int(draws.size),
        "chains": int(np.unique(draws.chain).size),
        "k": k,
        "p": p,
        "theta": {"mean": th_mean.tolist(), "sd": th_sd.tolist()},
        "weights": {"mean": w_mean.tolist(), "sd": w_sd.tolist()},
        "density_settings": {"kernel": "gaussian", "bandwidth": KDE_BANDWIDTH, "grid_points": KDE_GRID},
    }
    if p == 1:
        s2_mean, s2_sd = _mean_sd(var[:, :, 0])
        s_mean, s_sd = _mean_sd(np.sqrt(var[:, :, 0]))
        out["sigma2"] = {"mean": s2_mean.tolist(), "sd": s2_sd.tolist()}
        out["sigma"] = {"mean": s_mean.tolist(), "sd": s_sd.tolist()}
    else:
        c_mean, c_sd = _mean_sd(draws.covs)
        out["cov"] = {"mean": c_mean.tolist(), "sd": c_sd.tolist()}
        d_mean, d_sd = _mean_sd(var)
        out["cov_diag"] = {"mean": d_mean.tolist(), "sd": d_sd.tolist()}
    if draws.rate is not None:
        r_mean, r_sd = _mean_sd(draws.rate)
        out["b0"] = {"mean": float(r_mean), "sd": float(r_sd)}
    if densities:
        dens = {"theta": [], "scale": [], "histogram": {"theta": [], "scale": []}}
        for j in range(k):
            dens["theta"].append([_kde_grid(draws.means[:, j, d]) for d in range(p)])
            dens["histogram"]["theta"].append([_histogram(draws.means[:, j, d]) for d in range(p)])
            scale = np.sqrt(var[:, j, :]) if p == 1 else var[:, j, :]
            dens["scale"].append([_kde_grid(scale[:, d]) for d in range(p)])
            dens["histogram"]["scale"].append([_histogram(scale[:, d]) for d in range(p)])
        if p > 1:
            dens["theta_pairs"] = []
            for j in range(k):
                pairs = []
                for a in range(p):
                    for b in range(a + 1, p):
                        H, xe, ye = np.histogram2d(draws.means[:, j, a], draws.means[:, j, b], bins=50, density=True)
                        pairs.append({"dims": [a, b], "x_edges": xe.tolist(), "y_edges": ye.tolist(),
                                      "density": H.tolist()})
                dens["theta_pairs"].append(pairs)
        out["densities"] = dens
    return out


def table_block(summary: dict) -> dict:
    """Table-style 'mean (sd)' strings per component."""
    def fmt(block, d=0):
        return [f"{m[d] if isinstance(m, list) else m:.3f} ({s[d] if isinstance(s, list) else s:.2f})"
                for m, s in zip(block["mean"], block["sd"])]
    out = {"theta": [fmt(summary["theta"], d) for d in range(summary["p"])]}
    if "sigma" in summary:
        out["sigma"] = fmt(summary["sigma"])
    return out


def allocation_frequencies(draws: PosteriorDraws) -> np.ndarray:
    """(n, k) relative frequency of s_i = j over draws."""
    k = draws.k
    freq = np.stack([(draws.alloc == j).mean(axis=0) for j in range(k)], axis=1)
    return freq / freq.sum(axis=1, keepdims=True)


def allocation_table(draws: PosteriorDraws, groups) -> tuple[list, np.ndarray]:
    """Group x component allocation probabilities averaged over each group's rows.

    Groups are listed in order of first appearance.
    """
    if groups is None:
        raise ValidationError("allocation table needs group labels")
    groups = list(groups)
    if len(groups) != draws.alloc.shape[1]:
        raise ValidationError("group labels do not match the number of observations")
    freq = allocation_frequencies(draws)
    names = list(dict.fromkeys(groups))
    g = np.array(groups, dtype=object)
    table = np.stack([freq[g == name].mean(axis=0) for name in names])
    return names, table / table.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------


def draws_columns(k: int, p: int, n: int, rate: bool) -> list[str]:
    cols = ["chain", "iter"]
    if p == 1:
        cols += [f"theta_{j + 1}" for j in range(k)]
        cols += [f"sigma2_{j + 1}" for j in range(k)]
    else:
        cols += [f"theta_{j + 1}_{d + 1}" for j in range(k) for d in range(p)]
        cols += [f"Sigma_{j + 1}_{a + 1}{b + 1}" for j in range(k) for a in range(p) for b in range(a, p)]
    cols += [f"eta_{j + 1}" for j in range(k)]
    if rate:
        cols.append("b0")
    cols += [f"s_{i + 1}" for i in range(n)]
    return cols


def write_draws_csv(draws: PosteriorDraws, path) -> None:
    """One row per draw; first line is the ``# schema`` tag.  Labels are 1-based."""
    k, p, n = draws.k, draws.p, draws.alloc.shape[1]
    iu = np.triu_indices(p)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {DRAWS_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(draws_columns(k, p, n, draws.rate is not None))
        for d in range(draws.size):
            row = [int(draws.chain[d]), int(draws.iteration[d])]
            row += [repr(float(v)) for v in draws.means[d].ravel()]
            if p == 1:
                row += [repr(float(v)) for v in draws.covs[d, :, 0, 0]]
            else:
                row += [repr(float(v)) for j in range(k) for v in draws.covs[d, j][iu]]
            row += [repr(float(v)) for v in draws.weights[d]]
            if draws.rate is not None:
                row.append(repr(float(draws.rate[d])))
            row += [int(v) + 1 for v in draws.alloc[d]]
            w.writerow(row)


def read_draws_csv(path, anchors: AnchorSet, p: int) -> PosteriorDraws:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema: {DRAWS_SCHEMA}":
            raise ValidationError(f"unrecognized draws file header {first!r}")
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    k = anchors.k
    data = np.array(rows, dtype=float) if rows else np.empty((0, len(header)))
    col = {name: i for i, name in enumerate(header)}
    n = sum(1 for h in header if h.startswith("s_"))
    D = data.shape[0]
    if p == 1:
        means = data[:, [col[f"theta_{j + 1}"] for j in range(k)]].reshape(D, k, 1)
        covs = data[:, [col[f"sigma2_{j + 1}"] for j in range(k)]].reshape(D, k, 1, 1)
    else:
        means = data[:, [col[f"theta_{j + 1}_{d + 1}"] for j in range(k) for d in range(p)]].reshape(D, k, p)
        covs = np.empty((D, k, p, p))
        for j in range(k):
            for a in range(p):
                for b in range(a, p):
                    covs[:, j, a, b] = covs[:, j, b, a] = data[:, col[f"Sigma_{j + 1}_{a + 1}{b + 1}"]]
    weights = data[:, [col[f"eta_{j + 1}"] for j in range(k)]]
    rate = data[:, col["b0"]] if "b0" in col else None
    alloc = data[:, [col[f"s_{i + 1}"] for i in range(n)]].astype(np.int16) - 1
    return PosteriorDraws(means, covs, weights, rate, alloc, data[:, 0].astype(int), data[:, 1].astype(int), anchors)


def write_summary_json(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=1, sort_keys=True))
