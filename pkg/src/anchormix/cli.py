"""Command-line interface.

    anchormix select-anchors --config run.json --out results/
    anchormix fit --config run.json --out results/
    anchormix diagnose --config run.json --out results/
    anchormix simulate --config sim.json --out results/
    anchormix extract-features trial1.txt trial2.txt --out results/

Configs are JSON documents validated against ``CONFIG_SCHEMA`` before any
computation; unknown keys are rejected.  Row indices in configs and outputs
are 1-based.  Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .anchors import EMConfig, anchored_em, min_entropy_select
from .asymptotics import diagnostics, relabeling_probs
from .core import AnchorSet, Dataset, MixtureParams, PriorSpec
from .errors import NumericalError, ValidationError
from .gibbs import SamplerConfig, allocation_table, gibbs_fit, summarize, table_block, write_draws_csv
from .ingest import extract_features, load_dataset, load_galaxies, write_feature_csv
from .predictive import SimConfig, run_simulation
from .synthetic import fall_feature_data, scale_mixture_data

log = logging.getLogger("anchormix")

ANCHORS_SCHEMA = "anchormix.anchors/v1"
DIAGNOSTICS_SCHEMA = "anchormix.diagnostics/v1"

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_vector = {"type": "array", "items": _num, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "builtin": {"enum": ["galaxies", "scale_mixture", "falls_synthetic"]},
                "replicate": {"type": "integer", "minimum": 0},
                "value_columns": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "id_column": {"type": "string"},
                "group_column": {"type": "string"},
            },
            "oneOf": [{"required": ["path"]}, {"required": ["builtin"]}],
        },
        "k": {"type": "integer", "minimum": 1},
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family", "kappa"],
            "properties": {
                "family": {"enum": ["normal_gamma", "normal_wishart"]},
                "mean": {"oneOf": [_num, _vector, {"const": "sample_mean"}]},
                "kappa": _pos,
                "dirichlet": _pos,
                "shape": _pos,
                "rate": _pos,
                "rate_hyper": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "dof": _pos,
                "scale_matrix": {"type": "array", "items": _vector, "minItems": 1},
            },
        },
        "anchors": {
            "type": "object",
            "additionalProperties": False,
            "required": ["method"],
            "properties": {
                "method": {"enum": ["em", "min-entropy", "explicit", "file"]},
                "per_component": {"oneOf": [{"type": "integer", "minimum": 0},
                                            {"type": "array", "items": {"type": "integer", "minimum": 0}}]},
                "sets": {"type": "array", "items": {"type": "array", "items": _posint}},
                "file": {"type": "string"},
                "em": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"n_starts": _posint, "tol": _pos, "max_iter": _posint,
                                   "solver": {"enum": ["exact", "greedy"]}},
                },
                "min_entropy": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"n_starts": {"type": "integer", "minimum": 0}, "opt_tol": _pos},
                },
            },
        },
        "gamma0": {
            "type": "object",
            "additionalProperties": False,
            "required": ["means", "scales", "weights"],
            "properties": {"means": {"type": "array"}, "scales": {"type": "array"}, "weights": _vector},
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"chains": _posint, "iterations": _posint,
                           "burn_in": {"type": "integer", "minimum": 0}, "target_draws": _posint},
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "deltas": _vector, "sigmas": {"type": "array", "items": _pos, "minItems": 1},
                "datasets": _posint, "n": {"type": "integer", "minimum": 2}, "replicates": _posint,
                "draws": _posint, "m_values": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "prior_mean": _num, "prior_var": _pos,
            },
        },
        "features": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"paths": {"type": "array", "items": {"type": "string"}},
                           "scale": _pos,
                           "columns": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                       "minItems": 3, "maxItems": 3}},
        },
        "output": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    validate_config(cfg)
    cfg["_base"] = str(path.parent)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"config error at {where}: {exc.message}") from None


def _resolve(cfg: dict, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(cfg.get("_base", ".")) / q


def _require(cfg: dict, *keys):
    for k in keys:
        if k not in cfg:
            raise ValidationError(f"config needs a {k!r} block for this command")


def build_dataset(cfg: dict) -> Dataset:
    _require(cfg, "data")
    d = cfg["data"]
    if "builtin" in d:
        seed = cfg.get("seed", 0)
        if d["builtin"] == "galaxies":
            return load_galaxies()
        if d["builtin"] == "scale_mixture":
            return scale_mixture_data(seed, d.get("replicate", 0))[0]
        return fall_feature_data(seed)[0]
    return load_dataset(_resolve(cfg, d["path"]), d.get("value_columns"), d.get("id_column", "id"),
                        d.get("group_column"))


def build_prior(cfg: dict, data: Dataset) -> PriorSpec:
    _require(cfg, "prior")
    pc = cfg["prior"]
    mean = pc.get("mean", "sample_mean")
    mean = data.points.mean(axis=0) if mean == "sample_mean" else np.atleast_1d(np.asarray(mean, dtype=float))
    if pc["family"] == "normal_gamma":
        if "shape" not in pc:
            raise ValidationError("normal_gamma prior needs 'shape'")
        return PriorSpec.normal_gamma(mean, pc["kappa"], pc["shape"], pc.get("rate"),
                                      tuple(pc["rate_hyper"]) if "rate_hyper" in pc else None,
                                      pc.get("dirichlet", 1.0))
    if "dof" not in pc:
        raise ValidationError("normal_wishart prior needs 'dof'")
    W = np.asarray(pc.get("scale_matrix", np.eye(data.p)), dtype=float)
    return PriorSpec.normal_wishart(mean, pc["kappa"], pc["dof"], W, pc.get("dirichlet", 1.0))


def _budgets(cfg: dict) -> tuple:
    k = cfg["k"]
    per = cfg["anchors"].get("per_component", 1)
    budgets = (per,) * k if isinstance(per, int) else tuple(per)
    if len(budgets) != k:
        raise ValidationError(f"per_component lists {len(budgets)} budgets for k = {k}")
    return budgets


def _em_config(cfg: dict) -> EMConfig:
    e = cfg["anchors"].get("em", {})
    return EMConfig(k=cfg["k"], budgets=_budgets(cfg), tol=e.get("tol", 1e-8), max_iter=e.get("max_iter", 1000),
                    n_starts=e.get("n_starts", 25), solver=e.get("solver", "exact"), seed=cfg.get("seed", 0))


def _params_to_json(params: MixtureParams) -> dict:
    return {"means": params.means.tolist(), "scales": params.scales.tolist(), "weights": params.weights.tolist()}


def _params_from_json(block: dict) -> MixtureParams:
    return MixtureParams(np.asarray(block["means"], dtype=float), np.asarray(block["scales"], dtype=float),
                         np.asarray(block["weights"], dtype=float))


def _explicit_anchors(sets, k: int, n: int) -> AnchorSet:
    if len(sets) != k:
        raise ValidationError(f"explicit anchors list {len(sets)} sets for k = {k}")
    anchors = AnchorSet(tuple(tuple(i - 1 for i in s) for s in sets))
    anchors.validate_for(n)
    return anchors


def _anchor_report_sets(anchors: AnchorSet):
    return [[i + 1 for i in s] for s in anchors.sets]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def select_anchors(cfg: dict, workers: int = 1) -> dict:
    """Run the configured anchor selector and return the anchor report."""
    _require(cfg, "k", "anchors")
    data = build_dataset(cfg)
    prior = build_prior(cfg, data)
    method = cfg["anchors"]["method"]
    k = cfg["k"]
    report = {"schema": ANCHORS_SCHEMA, "method": method, "k": k, "n": data.n, "seed": cfg.get("seed", 0)}
    if method == "file":
        if "file" not in cfg["anchors"]:
            raise ValidationError("anchors.method 'file' needs anchors.file")
        prev = json.loads(_resolve(cfg, cfg["anchors"]["file"]).read_text())
        anchors = _explicit_anchors(prev["anchors"], k, data.n)
        gamma = _params_from_json(prev["gamma_hat"]) if prev.get("gamma_hat") else None
        source = prev.get("diagnostics", {}).get("gamma0_source", "anchors file")
    elif method == "explicit":
        if "sets" not in cfg["anchors"]:
            raise ValidationError("anchors.method 'explicit' needs anchors.sets")
        anchors = _explicit_anchors(cfg["anchors"]["sets"], k, data.n)
        gamma = _params_from_json(cfg["gamma0"]) if "gamma0" in cfg else None
        source = "config gamma0"
    else:
        em = anchored_em(data.points, prior, _em_config(cfg), workers)
        anchors, gamma, source = em.best.anchors, em.best.params, "anchored EM MAP"
        report["em"] = {
            "best_start": em.best_start + 1,
            "lower_bound": em.best.lower_bound,
            "traces": [{"start": t.start + 1, "converged": t.converged, "error": t.error,
                        "lower_bound": t.values.tolist(),
                        "final_anchors": _anchor_report_sets(t.iterations[-1][2]) if t.iterations else None}
                       for t in em.traces],
        }
        if method == "min-entropy":
            me_cfg = cfg["anchors"].get("min_entropy", {})
            me = min_entropy_select(data.points, gamma, _budgets(cfg), opt_tol=me_cfg.get("opt_tol", 1e-10),
                                    n_starts=me_cfg.get("n_starts", 10), seed=cfg.get("seed", 0),
                                    initial=[anchors])
            report["min_entropy"] = {"entropy": me.entropy, "converged": me.converged, "warning": me.warning,
                                     "x_star": me.x_star.tolist(), "em_anchors": _anchor_report_sets(anchors)}
            anchors = me.anchors
    report["anchors"] = _anchor_report_sets(anchors)
    report["anchor_ids"] = [[data.ids[i] for i in s] for s in anchors.sets]
    report["anchor_values"] = [data.points[list(s)].tolist() for s in anchors.sets]
    report["gamma_hat"] = _params_to_json(gamma) if gamma is not None else None
    if gamma is not None:
        report["diagnostics"] = diagnostics(relabeling_probs(anchors.values(data.points), gamma), source)
    else:
        report["diagnostics"] = None
    return report


def fit(cfg: dict, workers: int = 1):
    """Anchor selection followed by the Gibbs fit; returns (report, draws, summary)."""
    report = select_anchors(cfg, workers)
    data = build_dataset(cfg)
    prior = build_prior(cfg, data)
    anchors = _explicit_anchors(report["anchors"], cfg["k"], data.n)
    init = _params_from_json(report["gamma_hat"]) if report["gamma_hat"] else None
    s = cfg.get("sampler", {})
    sc = SamplerConfig(chains=s.get("chains", 50), iterations=s.get("iterations", 10000),
                       burn_in=s.get("burn_in", 1000), target_draws=s.get("target_draws", 5000),
                       seed=cfg.get("seed", 0))
    draws = gibbs_fit(data.points, anchors, prior, sc, init=init, workers=workers)
    summary = summarize(draws)
    summary["table"] = table_block(summary)
    summary["anchors"] = report["anchors"]
    if data.groups is not None:
        names, table = allocation_table(draws, data.groups)
        summary["allocation_table"] = {"groups": names, "probabilities": table.tolist()}
    return report, draws, summary


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.get("output") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_select_anchors(args, cfg):
    report = select_anchors(cfg, args.workers)
    out = _out_dir(args, cfg)
    _dump(report, out / "anchors.json")
    _dump({"schema": DIAGNOSTICS_SCHEMA, **(report["diagnostics"] or {})}, out / "diagnostics.json")
    d = report["diagnostics"]
    print(f"anchors: {report['anchors']}" + (f"  alpha_hat = {d['alpha_hat']:.6f}" if d else ""))


def cmd_fit(args, cfg):
    report, draws, summary = fit(cfg, args.workers)
    out = _out_dir(args, cfg)
    _dump(report, out / "anchors.json")
    _dump({"schema": DIAGNOSTICS_SCHEMA, **(report["diagnostics"] or {})}, out / "diagnostics.json")
    write_draws_csv(draws, out / "draws.csv")
    _dump(summary, out / "summary.json")
    for d, row in enumerate(summary["table"]["theta"]):
        print(f"theta[{d + 1}]: " + "  ".join(row))
    if "sigma" in summary["table"]:
        print("sigma:    " + "  ".join(summary["table"]["sigma"]))


def cmd_diagnose(args, cfg):
    report = select_anchors(cfg, args.workers)
    if report["diagnostics"] is None:
        raise ValidationError("diagnose needs gamma0: give a gamma0 block, an anchors file with gamma_hat, "
                              "or a selection method")
    out = _out_dir(args, cfg)
    _dump({"schema": DIAGNOSTICS_SCHEMA, "anchors": report["anchors"], **report["diagnostics"]},
          out / "diagnostics.json")
    print(f"alpha_hat = {report['diagnostics']['alpha_hat']:.6f}  entropy = {report['diagnostics']['entropy']:.6g}")


def cmd_simulate(args, cfg):
    s = cfg.get("simulation", {})
    defaults = SimConfig()
    config = SimConfig(
        deltas=tuple(s.get("deltas", defaults.deltas)), sigmas=tuple(s.get("sigmas", defaults.sigmas)),
        datasets=s.get("datasets", defaults.datasets), n=s.get("n", defaults.n),
        replicates=s.get("replicates", defaults.replicates), draws=s.get("draws", defaults.draws),
        m_values=tuple(s.get("m_values", range(2, s.get("n", defaults.n) + 1))),
        prior_mean=s.get("prior_mean", 0.0), prior_var=s.get("prior_var", 25.0), seed=cfg.get("seed", 0))
    result = run_simulation(config, args.workers)
    out = _out_dir(args, cfg)
    (out / "sim_results.csv").write_text(result.to_csv())
    _dump(result.summary(), out / "summary.json")
    print(f"{len(result.rows)} ELPPD values written to {out / 'sim_results.csv'}")


def cmd_extract_features(args, cfg):
    f = cfg.get("features", {})
    paths = [Path(p) for p in args.paths] or [_resolve(cfg, p) for p in f.get("paths", [])]
    if not paths:
        raise ValidationError("no trial files given")
    scale = args.scale if args.scale is not None else f.get("scale", 1.0)
    rows = extract_features(paths, scale, f.get("columns", (0, 1, 2)), args.workers)
    out = _out_dir(args, cfg)
    write_feature_csv(rows, out / "features.csv")
    for trial, _, feats in rows:
        print(trial, " ".join(f"{v:.6f}" for v in feats))


COMMANDS = {
    "select-anchors": cmd_select_anchors,
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "extract-features": cmd_extract_features,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchormix", description="Anchored finite mixture models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "extract-features":
            p.add_argument("paths", nargs="*", help="trial text files")
            p.add_argument("--scale", type=float, help="multiplier from raw counts to output units")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.workers < 1:
            raise ValidationError("--workers must be at least 1")
        if args.config:
            cfg = load_config(args.config)
        elif args.command == "extract-features":
            cfg = {}
        else:
            raise ValidationError(f"{args.command} needs --config")
        if args.seed is not None:
            if args.seed < 0:
                raise ValidationError("--seed must be non-negative")
            cfg["seed"] = args.seed
        COMMANDS[args.command](args, cfg)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
