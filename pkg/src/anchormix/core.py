"""Data model, priors, mixture densities and small-instance enumeration oracles.

Component labels and row indices are 0-based throughout the library; reports
translate rows back to dataset ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp, multigammaln

from .errors import (
    EnumerationTooLargeError,
    InvalidParameterError,
    NumericalDegeneracyError,
    ValidationError,
)

LOG_2PI = float(np.log(2.0 * np.pi))
ROW_SUM_TOL = 1e-12
DEFAULT_ENUM_CAP = 2**20


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """n observations in p dimensions with row ids and optional group tags."""

    points: np.ndarray
    ids: tuple = ()
    groups: tuple | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValidationError(f"points must be a non-empty n x p matrix, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            bad = np.argwhere(~np.isfinite(pts))[0]
            raise ValidationError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        object.__setattr__(self, "points", _frozen(pts))
        ids = tuple(str(i) for i in self.ids) if self.ids else tuple(str(i + 1) for i in range(pts.shape[0]))
        if len(ids) != pts.shape[0]:
            raise ValidationError("ids length does not match number of rows")
        if len(set(ids)) != len(ids):
            raise ValidationError("row ids must be unique")
        object.__setattr__(self, "ids", ids)
        if self.groups is not None:
            groups = tuple(str(g) for g in self.groups)
            if len(groups) != pts.shape[0]:
                raise ValidationError("groups length does not match number of rows")
            object.__setattr__(self, "groups", groups)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def p(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class MixtureParams:
    """Component means (k x p), scales and mixing weights.

    ``scales`` holds variances with shape (k,) when p == 1 and covariance
    matrices with shape (k, p, p) otherwise.
    """

    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        k, p = means.shape
        scales = np.asarray(self.scales, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if p == 1:
            scales = scales.reshape(k)
            if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
                raise InvalidParameterError(f"variances must be positive and finite, got {scales}")
        else:
            if scales.shape != (k, p, p):
                raise InvalidParameterError(f"covariances must have shape {(k, p, p)}, got {scales.shape}")
            for j in range(k):
                if not np.allclose(scales[j], scales[j].T, rtol=1e-10, atol=1e-12):
                    raise InvalidParameterError(f"covariance {j} is not symmetric")
                try:
                    np.linalg.cholesky(scales[j])
                except np.linalg.LinAlgError:
                    raise InvalidParameterError(f"covariance {j} is not positive definite") from None
        if weights.shape != (k,):
            raise InvalidParameterError(f"weights must have shape ({k},), got {weights.shape}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > ROW_SUM_TOL * max(k, 1) * 10:
            raise InvalidParameterError(f"weights must lie on the simplex, got {weights}")
        if not np.all(np.isfinite(means)):
            raise InvalidParameterError("means must be finite")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "scales", _frozen(scales))
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def p(self) -> int:
        return self.means.shape[1]

    def covariances(self) -> np.ndarray:
        """Scales as a (k, p, p) stack regardless of dimension."""
        if self.p == 1:
            return self.scales.reshape(self.k, 1, 1)
        return self.scales

    def permuted(self, perm: Sequence[int]) -> "MixtureParams":
        """Parameters relabeled so that new component j is old component perm[j]."""
        perm = np.asarray(perm)
        return MixtureParams(self.means[perm], self.scales[perm], self.weights[perm])


@dataclass(frozen=True)
class PriorSpec:
    """Conjugate-family prior for the mixture.

    Two families are supported.  ``normal_gamma`` (p == 1): theta_j ~ Normal(mu,
    1/kappa), 1/sigma_j^2 ~ Gamma(shape, rate) with either a fixed rate or
    rate ~ Gamma(g, h).  ``normal_wishart``: theta_j ~ Normal(mu, Sigma_j/kappa),
    Sigma_j^{-1} ~ Wishart(dof, scale_matrix).  Every Gamma is shape-rate.
    """

    family: str
    mean: np.ndarray
    kappa: float
    dirichlet: float = 1.0
    shape: float | None = None
    rate: float | None = None
    rate_hyper: tuple[float, float] | None = None
    dof: float | None = None
    scale_matrix: np.ndarray | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", _frozen(mean))
        if self.dirichlet <= 0:
            raise InvalidParameterError("Dirichlet concentration must be positive")
        if self.kappa <= 0:
            raise InvalidParameterError("kappa must be positive")
        if self.family == "normal_gamma":
            if mean.shape != (1,):
                raise InvalidParameterError("normal_gamma prior is univariate")
            if self.shape is None or self.shape <= 0:
                raise InvalidParameterError("Gamma shape a0 must be positive")
            if (self.rate is None) == (self.rate_hyper is None):
                raise InvalidParameterError("give exactly one of a fixed rate or a rate hyperprior")
            if self.rate is not None and self.rate <= 0:
                raise InvalidParameterError("Gamma rate b0 must be positive")
            if self.rate_hyper is not None:
                g, h = self.rate_hyper
                if g <= 0 or h <= 0:
                    raise InvalidParameterError("rate hyperprior (g, h) must be positive")
                object.__setattr__(self, "rate_hyper", (float(g), float(h)))
        elif self.family == "normal_wishart":
            p = mean.shape[0]
            if self.dof is None or self.dof <= p - 1:
                raise InvalidParameterError(f"Wishart degrees of freedom must exceed p - 1 = {p - 1}")
            W = np.atleast_2d(np.asarray(self.scale_matrix, dtype=float))
            if W.shape != (p, p):
                raise InvalidParameterError(f"Wishart scale must be {p} x {p}")
            try:
                np.linalg.cholesky(W)
            except np.linalg.LinAlgError:
                raise InvalidParameterError("Wishart scale must be positive definite") from None
            if not np.allclose(W, W.T):
                raise InvalidParameterError("Wishart scale must be symmetric")
            object.__setattr__(self, "scale_matrix", _frozen(W))
        else:
            raise InvalidParameterError(f"unknown prior family {self.family!r}")

    @classmethod
    def normal_gamma(cls, mean, kappa, shape, rate=None, rate_hyper=None, dirichlet=1.0):
        return cls("normal_gamma", np.atleast_1d(mean), kappa, dirichlet, shape=shape, rate=rate,
                   rate_hyper=rate_hyper)

    @classmethod
    def normal_wishart(cls, mean, kappa, dof, scale_matrix, dirichlet=1.0):
        return cls("normal_wishart", np.atleast_1d(mean), kappa, dirichlet, dof=dof,
                   scale_matrix=scale_matrix)

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    @property
    def rate_point(self) -> float:
        """b0 used where a point value is needed: the fixed rate or the hyperprior mean."""
        if self.rate is not None:
            return float(self.rate)
        g, h = self.rate_hyper
        return g / h

    def check_dimension(self, p: int) -> None:
        if self.p != p:
            raise ValidationError(f"prior is {self.p}-dimensional but data has p = {p}")


@dataclass(frozen=True)
class AnchorSet:
    """k disjoint sets of row indices; ``sets[j]`` are rows anchored to component j."""

    sets: tuple

    def __post_init__(self):
        sets = tuple(tuple(sorted(int(i) for i in s)) for s in self.sets)
        seen: dict[int, int] = {}
        for j, s in enumerate(sets):
            if len(set(s)) != len(s):
                raise ValidationError(f"anchor set {j} contains duplicate rows")
            for i in s:
                if i < 0:
                    raise ValidationError(f"negative row index {i}")
                if i in seen:
                    raise ValidationError(f"row {i} anchored to both component {seen[i]} and {j}")
                seen[i] = j
        object.__setattr__(self, "sets", sets)

    @classmethod
    def empty(cls, k: int) -> "AnchorSet":
        return cls(tuple(() for _ in range(k)))

    @classmethod
    def from_labels(cls, labels: Sequence[int], k: int) -> "AnchorSet":
        """Build from a length-n vector holding a component or -1 for free rows."""
        labels = np.asarray(labels)
        return cls(tuple(tuple(np.flatnonzero(labels == j)) for j in range(k)))

    @property
    def k(self) -> int:
        return len(self.sets)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.sets)

    @property
    def m(self) -> int:
        return sum(self.sizes)

    @property
    def k0(self) -> int:
        return sum(1 for s in self.sets if s)

    @property
    def rows(self) -> list[int]:
        return sorted(i for s in self.sets for i in s)

    def validate_for(self, n: int) -> None:
        for s in self.sets:
            for i in s:
                if i >= n:
                    raise ValidationError(f"anchor row {i} out of range for n = {n}")

    def labels(self, n: int) -> np.ndarray:
        """Length-n vector with the anchored component per row and -1 elsewhere."""
        self.validate_for(n)
        out = np.full(n, -1, dtype=int)
        for j, s in enumerate(self.sets):
            out[list(s)] = j
        return out

    def is_canonical(self) -> bool:
        mins = [s[0] if s else None for s in self.sets]
        k0 = self.k0
        if any(v is None for v in mins[:k0]) or any(v is not None for v in mins[k0:]):
            return False
        return all(mins[j] < mins[j + 1] for j in range(k0 - 1))

    def canonical_order(self) -> list[int]:
        """Component order that realizes the canonical labeling.

        Non-empty sets ordered by their smallest row come first, empty ones keep
        their relative order.  New component j is old component order[j].
        """
        nonempty = sorted((s[0], j) for j, s in enumerate(self.sets) if s)
        empty = [j for j, s in enumerate(self.sets) if not s]
        return [j for _, j in nonempty] + empty

    def canonical(self) -> "AnchorSet":
        return AnchorSet(tuple(self.sets[j] for j in self.canonical_order()))

    def permuted(self, order: Sequence[int]) -> "AnchorSet":
        return AnchorSet(tuple(self.sets[j] for j in order))

    def values(self, data) -> list[np.ndarray]:
        y = as_points(data)
        return [y[list(s)] for s in self.sets]


def as_points(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.points
    y = np.asarray(data, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def is_compatible(alloc: Sequence[int], anchors: AnchorSet) -> bool:
    """True when the allocation vector lies in the anchored support."""
    alloc = np.asarray(alloc)
    return all(np.all(alloc[list(s)] == j) for j, s in enumerate(anchors.sets))


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def component_logpdf(params: MixtureParams, points) -> np.ndarray:
    """log phi_p(y_i; theta_j, Sigma_j) as an (n, k) matrix."""
    y = as_points(points)
    if y.shape[1] != params.p:
        raise ValidationError(f"points have p = {y.shape[1]}, parameters p = {params.p}")
    if params.p == 1:
        var = params.scales
        d = y[:, 0:1] - params.means[:, 0][None, :]
        return -0.5 * (LOG_2PI + np.log(var)[None, :] + d**2 / var[None, :])
    out = np.empty((y.shape[0], params.k))
    for j in range(params.k):
        try:
            L = np.linalg.cholesky(params.scales[j])
        except np.linalg.LinAlgError:
            raise InvalidParameterError(f"covariance {j} is not positive definite") from None
        z = np.linalg.solve(L, (y - params.means[j]).T)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, j] = -0.5 * (params.p * LOG_2PI + logdet + (z**2).sum(axis=0))
    return out


def _log_weights(params: MixtureParams) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(params.weights)


def mixture_logpdf(params: MixtureParams, point) -> float:
    """log sum_j eta_j phi_p(point; gamma_j) for a single point."""
    y = np.atleast_1d(np.asarray(point, dtype=float)).reshape(1, -1)
    return float(logsumexp(_log_weights(params) + component_logpdf(params, y)[0]))


def mixture_logpdf_rows(params: MixtureParams, points) -> np.ndarray:
    return logsumexp(_log_weights(params)[None, :] + component_logpdf(params, points), axis=1)


def anchored_loglik(data, anchors: AnchorSet, params: MixtureParams) -> float:
    """Log-likelihood under an anchor model: anchored rows carry no weight factor."""
    y = as_points(data)
    labels = anchors.labels(y.shape[0])
    logphi = component_logpdf(params, y)
    free = labels < 0
    total = logsumexp(_log_weights(params)[None, :] + logphi[free], axis=1).sum() if free.any() else 0.0
    anchored = ~free
    if anchored.any():
        total += logphi[np.flatnonzero(anchored), labels[anchored]].sum()
    return float(total)


def log_responsibilities(data, params: MixtureParams) -> np.ndarray:
    """Unconstrained log r_ij, normalized in log space."""
    a = _log_weights(params)[None, :] + component_logpdf(params, data)
    norm = logsumexp(a, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        i = int(np.flatnonzero(~np.isfinite(norm[:, 0]))[0])
        raise NumericalDegeneracyError(f"all component densities vanish for row {i}")
    return a - norm


def responsibilities(data, params: MixtureParams, anchors: AnchorSet | None = None) -> np.ndarray:
    """Allocation probabilities; anchored rows are one-hot at their component."""
    r = np.exp(log_responsibilities(data, params))
    r /= r.sum(axis=1, keepdims=True)
    if anchors is not None:
        labels = anchors.labels(r.shape[0])
        rows = np.flatnonzero(labels >= 0)
        r[rows] = 0.0
        r[rows, labels[rows]] = 1.0
    return r


# ---------------------------------------------------------------------------
# Prior densities (used by the EM lower bound)
# ---------------------------------------------------------------------------


def log_dirichlet(weights: np.ndarray, alpha: float) -> float:
    k = len(weights)
    with np.errstate(divide="ignore"):
        lw = np.log(weights)
    if alpha == 1.0:
        body = 0.0
    else:
        body = float(((alpha - 1.0) * lw).sum())
    return float(gammaln(k * alpha) - k * gammaln(alpha) + body)


def log_prior_density(params: MixtureParams, prior: PriorSpec, rate: float | None = None) -> float:
    """log pi(gamma) + log pi(eta), with the scale density taken over sigma^2 / Sigma.

    For the normal_gamma family the rate b0 is held at ``rate`` (default: the
    prior's point value).
    """
    prior.check_dimension(params.p)
    total = log_dirichlet(params.weights, prior.dirichlet)
    if prior.family == "normal_gamma":
        a0 = prior.shape
        b0 = prior.rate_point if rate is None else rate
        theta = params.means[:, 0]
        var = params.scales
        total += float(np.sum(-0.5 * (LOG_2PI - np.log(prior.kappa)) - 0.5 * prior.kappa * (theta - prior.mean[0]) ** 2))
        # sigma^2 ~ InvGamma(a0, b0)
        total += float(np.sum(a0 * np.log(b0) - gammaln(a0) - (a0 + 1.0) * np.log(var) - b0 / var))
        return total
    p = params.p
    nu = prior.dof
    psi = np.linalg.inv(prior.scale_matrix)
    _, logdet_psi = np.linalg.slogdet(psi)
    covs = params.covariances()
    for j in range(params.k):
        S = covs[j]
        _, logdet_s = np.linalg.slogdet(S)
        Sinv = np.linalg.inv(S)
        d = params.means[j] - prior.mean
        total += -0.5 * (p * LOG_2PI + logdet_s - p * np.log(prior.kappa) + prior.kappa * d @ Sinv @ d)
        # Sigma ~ InvWishart(nu, W^{-1})
        total += (0.5 * nu * logdet_psi - 0.5 * nu * p * np.log(2.0) - multigammaln(0.5 * nu, p)
                  - 0.5 * (nu + p + 1.0) * logdet_s - 0.5 * np.trace(psi @ Sinv))
    return float(total)


# ---------------------------------------------------------------------------
# Known-variance location model: exact enumeration oracles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocationPrior:
    """Normal(mu_j, tau2_j) prior on each component mean; scalars broadcast over k."""

    mu: float | np.ndarray = 0.0
    tau2: float | np.ndarray = 1.0

    def arrays(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (k,)).copy()
        tau2 = np.broadcast_to(np.asarray(self.tau2, dtype=float), (k,)).copy()
        if np.any(tau2 <= 0):
            raise InvalidParameterError("tau2 must be positive")
        return mu, tau2


def _univariate(data) -> np.ndarray:
    y = as_points(data)
    if y.shape[1] != 1:
        raise ValidationError("the known-variance location model is univariate")
    return y[:, 0]


def _group_stats(y: np.ndarray, allocs: np.ndarray, k: int):
    """Per-allocation counts, sums and sums of squares, each (N, k)."""
    onehot = allocs[:, :, None] == np.arange(k)[None, None, :]
    counts = onehot.sum(axis=1).astype(float)
    sums = np.einsum("aik,i->ak", onehot, y)
    sumsq = np.einsum("aik,i->ak", onehot, y * y)
    return counts, sums, sumsq


def _log_marginal_from_stats(counts, sums, sumsq, mu, tau2, sigma2):
    """Full Normal-Normal log m(y|s) summed over components, vectorized."""
    with np.errstate(invalid="ignore", divide="ignore"):
        wgss = np.where(counts > 0, sumsq - sums**2 / np.where(counts > 0, counts, 1.0), 0.0)
        wgss = np.maximum(wgss, 0.0)
        denom = counts * tau2 + sigma2
        dev = (sums - counts * mu) ** 2
        between = np.where(counts > 0, dev / np.where(counts > 0, counts, 1.0) / denom, 0.0)
    per = (-0.5 * counts * (LOG_2PI + np.log(sigma2)) - 0.5 * np.log(denom / sigma2)
           - 0.5 * (wgss / sigma2 + between))
    return per.sum(axis=-1)


def cond_marginal_loglik(data, alloc: Sequence[int], prior: LocationPrior, sigma2: float,
                         k: int | None = None) -> float:
    """log m(y | s) with the component means integrated against Normal(mu, tau2).

    The full normalizing constant is kept, so values are comparable across
    anchor models with different numbers of anchors.  Empty components
    contribute zero.
    """
    y = _univariate(data)
    alloc = np.asarray(alloc, dtype=int)
    if alloc.shape != y.shape:
        raise ValidationError("allocation length must equal n")
    k = int(alloc.max()) + 1 if k is None else k
    if alloc.min() < 0 or alloc.max() >= k:
        raise ValidationError("allocation labels out of range")
    if sigma2 <= 0:
        raise InvalidParameterError("sigma2 must be positive")
    mu, tau2 = prior.arrays(k)
    counts, sums, sumsq = _group_stats(y, alloc[None, :], k)
    return float(_log_marginal_from_stats(counts, sums, sumsq, mu, tau2, sigma2)[0])


def anchored_allocations(n: int, k: int, anchors: AnchorSet, cap: int = DEFAULT_ENUM_CAP,
                         chunk: int = 1 << 15) -> Iterator[np.ndarray]:
    """Yield blocks of every allocation in the anchored support, in lexicographic order of free rows."""
    labels = anchors.labels(n)
    free = np.flatnonzero(labels < 0)
    f = len(free)
    total = k**f
    if total > cap:
        raise EnumerationTooLargeError(f"{k}^{f} = {total} allocations exceeds the cap of {cap}")
    powers = k ** np.arange(f - 1, -1, -1)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total))
        block = np.repeat(labels[None, :], len(codes), axis=0)
        if f:
            block[:, free] = (codes[:, None] // powers[None, :]) % k
        yield block


def anchored_marginal_loglik_enumerate(data, anchors: AnchorSet, prior: LocationPrior, sigma2: float,
                                       cap: int = DEFAULT_ENUM_CAP) -> float:
    """log m_A(y) by exhaustive summation over the anchored support with eta_j = 1/k."""
    y = _univariate(data)
    k = anchors.k
    mu, tau2 = prior.arrays(k)
    parts = []
    for block in anchored_allocations(len(y), k, anchors, cap):
        counts, sums, sumsq = _group_stats(y, block, k)
        parts.append(logsumexp(_log_marginal_from_stats(counts, sums, sumsq, mu, tau2, sigma2)))
    return float(logsumexp(parts) - (len(y) - anchors.m) * np.log(k))


@dataclass(frozen=True)
class EnumeratedPosterior:
    """Exact posterior of the component means as a weighted mixture of conjugate Normals."""

    weights: np.ndarray        # (N,), sums to one
    means: np.ndarray          # (N, k) conditional posterior means
    variances: np.ndarray      # (N, k) conditional posterior variances
    allocations: np.ndarray = field(repr=False)   # (N, n)
    log_evidence: float = 0.0

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def var(self) -> np.ndarray:
        second = self.weights @ (self.variances + self.means**2)
        return second - self.mean() ** 2


def enumerate_posterior(data, anchors: AnchorSet, prior: LocationPrior, sigma2: float,
                        cap: int = DEFAULT_ENUM_CAP) -> EnumeratedPosterior:
    y = _univariate(data)
    k = anchors.k
    mu, tau2 = prior.arrays(k)
    logw, means, variances, allocs = [], [], [], []
    for block in anchored_allocations(len(y), k, anchors, cap):
        counts, sums, sumsq = _group_stats(y, block, k)
        logw.append(_log_marginal_from_stats(counts, sums, sumsq, mu, tau2, sigma2))
        prec = 1.0 / tau2 + counts / sigma2
        variances.append(1.0 / prec)
        means.append((mu / tau2 + sums / sigma2) / prec)
        allocs.append(block)
    logw = np.concatenate(logw)
    norm = logsumexp(logw)
    w = np.exp(logw - norm)
    return EnumeratedPosterior(w / w.sum(), np.vstack(means), np.vstack(variances), np.vstack(allocs),
                               float(norm - (len(y) - anchors.m) * np.log(k)))
