"""Acceptance checks.  Each prints one PASS/FAIL line and then asserts.

Run with ``pytest tests/test_acceptance.py`` or directly as a script.
"""

import copy
import itertools
import json
import math
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import norm

from anchormix.anchors import (
    EMConfig,
    anchored_em,
    assignment_objective,
    e_step_assign,
    kl_per_row,
    min_entropy_select,
)
from anchormix.cli import fit, load_config, select_anchors
from anchormix.core import AnchorSet, LocationPrior, MixtureParams, PriorSpec, anchored_marginal_loglik_enumerate
from anchormix.core import log_responsibilities, responsibilities
from anchormix.ingest import TriaxialSeries, load_dataset, load_galaxies, smv_features, write_dataset
from anchormix.predictive import SimConfig, _best_by_direct_search, best_anchor_models, run_simulation
from anchormix.synthetic import fall_feature_data, scale_mixture_data
from conftest import record_acceptance
from oracles import geweke_check

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
EM_TRACES: list = []


def _collect(res, label):
    for t in res.traces:
        EM_TRACES.append((label, t.start, t.values))


# ---------------------------------------------------------------------------


def test_galaxies_reproduction():
    cfg = load_config(CONFIGS / "galaxies.json")
    t0 = time.perf_counter()
    report, draws, summary = fit(cfg)
    elapsed = time.perf_counter() - t0
    me = select_anchors(load_config(CONFIGS / "galaxies_min_entropy.json"))
    a_em = report["diagnostics"]["alpha_hat"]
    a_me = me["diagnostics"]["alpha_hat"]
    theta = [m[0] for m in summary["theta"]["mean"]]
    labels = AnchorSet(tuple(tuple(i - 1 for i in s) for s in report["anchors"])).labels(82)
    rows = np.flatnonzero(labels >= 0)
    in_support = bool(np.all(draws.alloc[:, rows] == labels[rows]))
    checks = {
        "em_alpha": 0.99 <= a_em <= 1.0,
        "min_entropy_alpha": 0.99 <= a_me <= 1.0,
        "theta1": abs(theta[0] - 9.716) <= 0.3,
        "theta5": abs(theta[4] - 32.905) <= 0.7,
        "theta4": abs(theta[3] - 22.971) <= 0.7,
        "runtime": elapsed < 15 * 60,
    }
    ok = all(checks.values()) and in_support
    record_acceptance("galaxies reproduction", ok,
                      f"alpha_em={a_em:.6f} alpha_min_entropy={a_me:.6f} in [0.99, 1]; "
                      f"theta1={theta[0]:.3f} (9.716+-0.3) theta4={theta[3]:.3f} (22.971+-0.7) "
                      f"theta5={theta[4]:.3f} (32.905+-0.7); fit {elapsed:.0f}s < 900s; "
                      f"anchored draws in support={in_support}; failed={[k for k, v in checks.items() if not v]}")
    assert ok, checks


def _component_one(report, y):
    """Component whose anchors hold the observation farthest from the sample mean."""
    dev = np.abs(y - y.mean())
    far = int(np.argmax(dev)) + 1
    return next(j for j, s in enumerate(report["anchors"]) if far in s)


def test_scale_mixture_study():
    base = load_config(CONFIGS / "scale_mixture.json")
    alphas, ordered, details = [], [], []
    for rep in range(5):
        cfg = copy.deepcopy(base)
        cfg["data"]["replicate"] = rep
        report, draws, summary = fit(cfg)
        y = scale_mixture_data(cfg.get("seed", 0), rep)[0].points[:, 0]
        j1 = _component_one(report, y)
        s2 = summary["sigma2"]["mean"]
        alphas.append(report["diagnostics"]["alpha_hat"])
        ordered.append(s2[j1] > s2[1 - j1])
        details.append(f"rep{rep + 1}: alpha={alphas[-1]:.6f} s2_1={s2[j1]:.3f} s2_2={s2[1 - j1]:.3f}")
    ok = all(a > 0.999 for a in alphas) and all(ordered)
    record_acceptance("scale-mixture study", ok,
                      "alpha > 0.999 and E[sigma1^2] > E[sigma2^2] in 5/5 reps; " + "; ".join(details))
    assert ok


def test_best_m_monotone_and_averaging_identity():
    rng = np.random.default_rng(501)
    prior = LocationPrior(0.0, 25.0)
    violations, identity_err, table_err = 0, 0.0, 0.0
    for d in range(50):
        n = int(rng.integers(3, 9))
        y = np.where(rng.random(n) < 0.5, rng.normal(size=n), rng.normal(size=n) + rng.uniform(0, 4))
        best = [_best_by_direct_search(y, m, prior, 1.0)[0] for m in range(2, n + 1)]
        violations += int(np.sum(np.diff(best) < -1e-12))
        fast = best_anchor_models(y, prior)
        table_err = max(table_err, max(abs(fast[m][0] - best[m - 2]) for m in range(2, n + 1)))
        # averaging over the label of one more free point reproduces the smaller model
        for _ in range(3):
            perm = rng.permutation(n)
            c = int(rng.integers(1, n))
            labels = rng.integers(0, 2, size=c)
            rows, extra = perm[:c], int(perm[c])
            sets = [tuple(sorted(int(r) for r in rows[labels == j])) for j in range(2)]
            base = anchored_marginal_loglik_enumerate(y, AnchorSet(tuple(sets)), prior, 1.0)
            grown = []
            for j in range(2):
                s = [list(x) for x in sets]
                s[j] = sorted(s[j] + [extra])
                grown.append(anchored_marginal_loglik_enumerate(y, AnchorSet(tuple(map(tuple, s))), prior, 1.0))
            identity_err = max(identity_err, abs(base - (np.logaddexp(*grown) - math.log(2))))
    ok = violations == 0 and identity_err <= 1e-10
    record_acceptance("best-m monotonicity and averaging identity", ok,
                      f"{violations} decreases over 50 datasets (n<=8); averaging identity max err "
                      f"{identity_err:.2e} <= 1e-10; table vs exhaustive max diff {table_err:.2e}")
    assert ok


def _entropy_oracle(D, A1, A2):
    """Binary relabeling entropy from per-point log-density differences D_i = log f1 - log f2."""
    logit = D[list(A1)].sum() - D[list(A2)].sum()
    p = expit(logit)
    return float(-sum(v * math.log(v) for v in (p, 1 - p) if v > 0))


def _brute_force(D, m):
    n = D.size
    best, arg = np.inf, []
    for A1 in itertools.combinations(range(n), m):
        rest = [i for i in range(n) if i not in A1]
        for A2 in itertools.combinations(rest, m):
            h = _entropy_oracle(D, A1, A2)
            if h < best - 1e-13:
                best, arg = h, [(A1, A2)]
            elif abs(h - best) <= 1e-13:
                arg.append((A1, A2))
    return best, {frozenset((frozenset(a), frozenset(b))) for a, b in arg}


def test_min_entropy_extremes():
    rng = np.random.default_rng(404)
    cases = {
        "location": MixtureParams(np.array([[-0.3], [0.3]]), np.array([1.0, 1.0]), np.array([0.5, 0.5])),
        "scale": MixtureParams(np.array([[0.0], [0.0]]), np.array([0.7, 1.4]), np.array([0.5, 0.5])),
    }
    exact, close, total = 0, 0, 0
    misses = []
    for d in range(30):
        n = int(rng.integers(5, 13))
        m = 1 + d % 2
        y = rng.normal(size=n) * 1.2
        for name, g in cases.items():
            D = (norm.logpdf(y, g.means[0, 0], math.sqrt(g.scales[0]))
                 - norm.logpdf(y, g.means[1, 0], math.sqrt(g.scales[1])))
            h_best, argmins = _brute_force(D, m)
            key = y if name == "location" else y**2
            o = np.argsort(key)
            expected = frozenset((frozenset(o[:m].tolist()), frozenset(o[-m:].tolist())))
            exact += argmins == {expected}
            res = min_entropy_select(y, g, (m, m), seed=d)
            h = _entropy_oracle(D, *res.anchors.sets)
            total += 1
            if h <= h_best + 1e-6:
                close += 1
            else:
                misses.append(f"{name} d={d} dh={h - h_best:.1e}")
    frac = close / total
    ok = exact == total and frac >= 0.9
    record_acceptance("min-entropy extremes", ok,
                      f"brute force picks the extreme sets in {exact}/{total} cases; continuous+snap within 1e-6 "
                      f"of the brute-force optimum in {close}/{total} = {frac:.0%} (>= 90%) {misses[:3]}")
    assert ok


def _joint_kl(q, log_r):
    n, k = q.shape
    total = 0.0
    for s in itertools.product(range(k), repeat=n):
        qs = np.prod(q[np.arange(n), s])
        if qs > 0:
            total += qs * (math.log(qs) - log_r[np.arange(n), s].sum())
    return total


def test_kl_factorization():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 4))
        params = MixtureParams(rng.normal(size=(k, 1)) * 2, rng.uniform(0.3, 2, size=k), rng.dirichlet(np.ones(k)))
        y = rng.normal(size=n) * 2
        labels = np.where(rng.random(n) < 0.5, rng.integers(0, k, size=n), -1)
        anchors = AnchorSet(tuple(tuple(np.flatnonzero(labels == j).tolist()) for j in range(k)))
        q = responsibilities(y, params, anchors)
        log_r = log_responsibilities(y, params)
        worst = max(worst, abs(kl_per_row(q, log_r) - _joint_kl(q, log_r)))
    ok = worst <= 1e-10
    record_acceptance("KL factorization", ok, f"max |per-row - joint| = {worst:.2e} <= 1e-10 over 100 draws")
    assert ok


def test_e_step_optimality():
    rng = np.random.default_rng(12)
    mismatches, trials = 0, 0
    while trials < 200:
        n, k = int(rng.integers(2, 13)), int(rng.integers(1, 4))
        budgets = tuple(int(b) for b in rng.integers(0, 4, size=k))
        if sum(budgets) > n or sum(budgets) == 0:
            continue
        count, left = 1, n
        for b in budgets:
            count *= math.comb(left, b)
            left -= b
        if count > 30_000:
            continue
        r = rng.dirichlet(np.ones(k), size=n)
        best = -np.inf
        for combo in _assignments(n, budgets):
            best = max(best, sum(r[rows, j].sum() for j, rows in enumerate(combo)))
        got = assignment_objective(r, e_step_assign(r, budgets))
        mismatches += abs(got - best) > 1e-12
        trials += 1
    ok = mismatches == 0
    record_acceptance("E-step optimality", ok, f"{mismatches} mismatches vs exhaustive in {trials} trials (n<=12, k<=3)")
    assert ok


def _assignments(n, budgets, used=frozenset()):
    if not budgets:
        yield ()
        return
    free = [i for i in range(n) if i not in used]
    for rows in itertools.combinations(free, budgets[0]):
        for tail in _assignments(n, budgets[1:], used | set(rows)):
            yield (list(rows),) + tail


def test_sampler_correctness():
    ok_moments, zs = geweke_check(iterations=40_000, seed=11)
    # geweke_chain asserts the anchored labels every iteration; PosteriorDraws re-checks stored draws
    worst = max(abs(z) for z in zs.values())
    record_acceptance("sampler correctness", ok_moments,
                      f"max |z| = {worst:.2f} <= 4 over {len(zs)} moments (k=2, n=6); "
                      "anchored labels asserted on every sweep")
    assert ok_moments, zs


def test_predictive_trends():
    cfg = SimConfig()
    t0 = time.perf_counter()
    res = run_simulation(cfg)
    elapsed = time.perf_counter() - t0
    lo2, lo9 = np.median(res.cell_values(0.25, 0.1, 2)), np.median(res.cell_values(0.25, 0.1, 9))
    hi2, hi9 = np.median(res.cell_values(2.75, 1.0, 2)), np.median(res.cell_values(2.75, 1.0, 9))
    rel = abs(hi9 - hi2) / abs(hi2)
    ok = lo9 < lo2 and rel < 0.05 and elapsed < 600
    record_acceptance("predictive trends", ok,
                      f"delta=0.25 sigma=0.1: median m9 {lo9:.3f} < m2 {lo2:.3f}; delta=2.75 sigma=1: "
                      f"|m9 - m2|/|m2| = {rel:.4f} < 0.05; J=100 run {elapsed:.0f}s < 600s")
    assert ok


def test_fall_pipeline():
    hand = smv_features(TriaxialSeries(np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 4.0]])))
    hand_ok = hand.tolist() == [math.log(4.0), 0.0, math.log(2.0)]
    data, _ = fall_feature_data(seed=0)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "features.csv"
        write_dataset(data, path, ["f1", "f2", "f3"])
        loaded = load_dataset(path)
        cfg = load_config(CONFIGS / "falls_synthetic.json")
        cfg["data"] = {"path": str(path)}
        report, draws, summary = fit(cfg)
    groups = summary["allocation_table"]["groups"]
    table = np.array(summary["allocation_table"]["probabilities"])
    j = int(np.argmax(np.array(summary["theta"]["mean"])[:, 1]))
    d07 = float(table[groups.index("D07"), j])
    rows_ok = bool(np.allclose(table.sum(axis=1), 1.0, atol=1e-12))
    ok = hand_ok and loaded.n == 150 and loaded.p == 3 and table.shape == (30, 5) and rows_ok and d07 >= 0.95
    record_acceptance("fall-feature pipeline", ok,
                      f"hand example exact={hand_ok}; 150x3 CSV loaded; 5-component table rows sum to 1={rows_ok}; "
                      f"D07 on the largest log(min SMV) component = {d07:.3f} >= 0.95 (synthetic features)")
    assert ok


def test_em_ascent():
    rng = np.random.default_rng(2024)
    greedy_drops = 0
    y_gal = load_galaxies().points
    prior_gal = PriorSpec.normal_gamma(21.7255, 1 / 52**2, 2.0, rate_hyper=(0.2, 0.016))
    _collect(anchored_em(y_gal, prior_gal, EMConfig(k=5, budgets=1, n_starts=25, seed=0)), "galaxies")
    for rep in range(5):
        y = scale_mixture_data(0, rep)[0].points
        prior = PriorSpec.normal_gamma(float(y.mean()), 1 / 15, 5.0, rate=10.0)
        _collect(anchored_em(y, prior, EMConfig(k=2, budgets=2, n_starts=10, seed=rep)), f"scale{rep}")
    falls = fall_feature_data(0)[0].points
    pw = PriorSpec.normal_wishart(falls.mean(axis=0), 0.5, 10.0, np.eye(3))
    _collect(anchored_em(falls, pw, EMConfig(k=5, budgets=2, n_starts=5, seed=0)), "falls")
    for d in range(20):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(4 * k, 40))
        y = rng.normal(size=n) * 2 + rng.integers(0, k, size=n) * 3
        prior = PriorSpec.normal_gamma(float(y.mean()), 0.01, 2.0, rate=1.0)
        budgets = tuple(int(b) for b in rng.integers(0, 3, size=k))
        if sum(1 for b in budgets if b > 0) < k - 1:
            budgets = (1,) * k
        _collect(anchored_em(y, prior, EMConfig(k=k, budgets=budgets, n_starts=5, seed=d)), f"random{d}")
        g = anchored_em(y, prior, EMConfig(k=k, budgets=budgets, n_starts=5, seed=d, solver="greedy"))
        greedy_drops += sum(int(np.sum(np.diff(t.values) < -1e-9)) for t in g.traces)
    drops = [(lab, s, float(np.min(np.diff(v)))) for lab, s, v in EM_TRACES if v.size > 1 and np.min(np.diff(v)) < -1e-9]
    ok = not drops
    record_acceptance("EM ascent", ok,
                      f"{len(drops)} F-decreases beyond 1e-9 over {len(EM_TRACES)} exact-solver starts "
                      f"(galaxies, scale mixtures, falls, 20 random); greedy solver: {greedy_drops} decreases "
                      f"(informational) {drops[:3]}")
    assert ok


if __name__ == "__main__":
    import sys
    failed = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
