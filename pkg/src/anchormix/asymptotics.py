"""Asymptotic relabeling distribution, quasi-consistency and entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import islice, permutations
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import MixtureParams, component_logpdf
from .errors import FactorialCapError, ValidationError

DEFAULT_PERM_CAP = math.factorial(10)
_CHUNK = 1 << 16


@dataclass(frozen=True)
class RelabelingDistribution:
    """Limiting probabilities p_q of the k! relabelings, permutations in lexicographic order.

    Row q of ``permutations`` maps component j to ``permutations[q, j]``, i.e.
    the j-th element of the relabeled parameter vector is gamma0[perm[j]].
    """

    probs: np.ndarray
    log_probs: np.ndarray
    permutations: np.ndarray


def all_permutations(k: int, cap: int = DEFAULT_PERM_CAP) -> np.ndarray:
    total = math.factorial(k)
    if total > cap:
        raise FactorialCapError(f"{k}! = {total} permutations exceeds the cap of {cap}")
    out = np.empty((total, k), dtype=np.int8 if k < 128 else np.int32)
    it = permutations(range(k))
    row = 0
    while row < total:
        block = list(islice(it, _CHUNK))
        out[row:row + len(block)] = block
        row += len(block)
    return out


def anchor_loglik_matrix(anchor_values: Sequence[np.ndarray], gamma0: MixtureParams) -> np.ndarray:
    """L[j, l] = sum over anchors x in x_j of log phi(x; gamma0_l)."""
    k = gamma0.k
    if len(anchor_values) != k:
        raise ValidationError(f"expected {k} anchor value sets, got {len(anchor_values)}")
    L = np.zeros((k, k))
    for j, x in enumerate(anchor_values):
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            continue
        x = x.reshape(-1, gamma0.p)
        L[j] = component_logpdf(gamma0, x).sum(axis=0)
    return L


def _relabel_logits(L: np.ndarray, perms: np.ndarray) -> np.ndarray:
    k = L.shape[0]
    return L[np.arange(k)[None, :], perms].sum(axis=1)


def _normalize(a: np.ndarray) -> np.ndarray:
    """log-softmax that keeps the dominant entry accurate when it is close to one."""
    q = int(np.argmax(a))
    others = np.delete(a, q) - a[q]
    log_s = logsumexp(others) if others.size else -np.inf
    lmax = -np.log1p(np.exp(log_s))
    out = a - a[q] + lmax
    out[q] = lmax
    return out


def relabeling_probs(anchor_values: Sequence[np.ndarray], gamma0: MixtureParams,
                     cap: int = DEFAULT_PERM_CAP) -> RelabelingDistribution:
    perms = all_permutations(gamma0.k, cap)
    L = anchor_loglik_matrix(anchor_values, gamma0)
    logp = _normalize(_relabel_logits(L, perms))
    return RelabelingDistribution(np.exp(logp), logp, perms)


def quasi_consistency_alpha(dist: RelabelingDistribution) -> float:
    return float(np.max(dist.probs))


def relabeling_entropy(dist: RelabelingDistribution) -> float:
    lp = dist.log_probs
    finite = np.isfinite(lp)
    return float(max(0.0, -np.sum(np.exp(lp[finite]) * lp[finite])))


def log_entropy_from_logits(a: np.ndarray) -> float:
    """log of the relabeling entropy, accurate even when the entropy underflows."""
    q = int(np.argmax(a))
    others = np.delete(a, q) - a[q]
    if others.size == 0:
        return -np.inf
    log_s = logsumexp(others)
    neg_lmax = np.log1p(np.exp(log_s))
    # -p_max log p_max = p_max * log1p(s); log of it:
    log_term_max = -neg_lmax + (np.log(neg_lmax) if log_s > -30 else log_s)
    l_others = others - neg_lmax
    terms = [log_term_max]
    neg = -l_others
    ok = neg > 0
    terms.extend(l_others[ok] + np.log(neg[ok]))
    return float(logsumexp(terms))


def diagnostics(dist: RelabelingDistribution, gamma0_source: str, top: int = 5) -> dict:
    """JSON-ready diagnostic block."""
    order = np.argsort(-dist.probs, kind="stable")[:top]
    return {
        "alpha_hat": quasi_consistency_alpha(dist),
        "entropy": relabeling_entropy(dist),
        "top_permutations": [
            {"permutation": [int(v) + 1 for v in dist.permutations[q]], "probability": float(dist.probs[q])}
            for q in order
        ],
        "gamma0_source": gamma0_source,
    }
