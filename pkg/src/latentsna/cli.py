"""Command-line front end: ``latentsna <command> ...``.

Exit codes: 0 success, 1 validation error (bad arguments, inputs or
configs), 2 runtime error (sampler failure and anything unexpected).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .detect import covariance_intervals
from .diagnostics import convergence_summary
from .io import (DatasetFormatError, ChainFormatError, RunManifest, load_chain, read_dataset,
                 save_chain, save_dataset, write_csv, atomic_write)
from .model import edge_indices, edge_moments, standardize_connectivity
from .netmetrics import centrality_profile, latent_network, WeightedGraph, kurtosis_test, skewness_test
from .predict import predict_attributes, predict_connectivity, averaging_baseline
from .sampler import SamplerConfig, SamplerError, run_chain
from .simulate import METHODS, SimulationConfig, generate_cohort, run_comparison

log = logging.getLogger("latentsna")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- config helpers ----------------------------------------------------------

def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return d


def _known(cls, d: dict, extra=()) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names - set(extra))
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    return {k: v for k, v in d.items() if k in names}


def _sampler_config(d: dict, seed) -> SamplerConfig:
    cfg = SamplerConfig(**_known(SamplerConfig, d, extra=("standardize",)))
    return replace(cfg, seed=seed) if seed is not None else cfg


def _manifest_for_file(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# --- commands ----------------------------------------------------------------

def cmd_simulate(args) -> None:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SimulationConfig.from_dict(_known(SimulationConfig, d))
    man = RunManifest("simulate", cfg.to_dict(), cfg.seed)
    if args.config:
        man.add_input("config", args.config)
    cohort = generate_cohort(cfg)
    out = Path(args.out)
    save_dataset(cohort.dataset, out)
    truth = {
        "signal_regions": [int(u) + 1 for u in sorted(cohort.signal_regions)],
        "connectivity_noise_var": cohort.noise_var,
        "Sigma": cohort.truth.Sigma.tolist(),
        "snr_definition": "variance of z_u*z_v over all edges and subjects / noise variance",
    }
    atomic_write(out / "truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n")
    for p in sorted(out.iterdir()):
        if p.name != "manifest.json":
            man.add_output(p, out)
    man.write(out)


def _load_training(path, standardize: bool):
    data, ids = read_dataset(path)
    moments = None
    if standardize:
        moments = edge_moments(data)
        data = standardize_connectivity(data, moments)
    return data, ids, moments


def cmd_fit(args) -> None:
    d = _read_json(args.config)
    cfg = _sampler_config(d, args.seed)
    standardize = bool(d.get("standardize", True))
    data, _, _ = _load_training(args.data, standardize)
    man = RunManifest("fit", {**cfg.to_dict(), "standardize": standardize}, cfg.seed)
    man.add_input("data", args.data)
    if args.config:
        man.add_input("config", args.config)
    chain = run_chain(data, cfg)
    out = Path(args.out)
    save_chain(chain, out)
    if args.trace_svg:
        convergence_summary(chain, svg_path=out / "trace.svg")
    rows = convergence_summary(chain)
    write_csv(out / "convergence.csv", ["parameter", "n", "mean", "mcse", "lag1", "ess"],
              ([r[k] for k in ("parameter", "n", "mean", "mcse", "lag1", "ess")] for r in rows))
    for p in sorted(out.iterdir()):
        if p.name != "manifest.json":
            man.add_output(p, out)
    man.write(out)


def cmd_detect(args) -> None:
    if not 0 < args.level < 1:
        raise ValueError("--level must lie strictly between 0 and 1")
    chain = load_chain(args.chain)
    rep = covariance_intervals(chain, args.level)
    out = Path(args.out)
    write_csv(out, ["region", "label", "mean", "lower", "upper", "significant"], rep.rows())
    man = RunManifest("detect", {"level": args.level, "reflected": rep.reflected}, chain.config.seed)
    man.add_input("chain", args.chain)
    man.add_output(out)
    man.write(_manifest_for_file(out))


def _training_source(args):
    """Training data path and sampler config dict, from --train or --chain."""
    if args.chain:
        meta = json.loads((Path(args.chain) / "meta.json").read_text())
        man = RunManifest.read(args.chain)
        if "data" not in man.inputs:
            raise ValueError(f"{args.chain}: manifest does not record the training data")
        d = dict(meta["config"])
        d["standardize"] = man.config.get("standardize", True)
        d.update(_read_json(args.config))
        return man.inputs["data"]["path"], d
    if not args.train:
        raise ValueError("predict needs --train DIR or --chain DIR")
    return args.train, _read_json(args.config)


def cmd_predict(args) -> None:
    train_path, d = _training_source(args)
    cfg = _sampler_config(d, args.seed)
    standardize = bool(d.get("standardize", True))
    train, _, moments = _load_training(train_path, standardize)
    mode = args.mode
    test, ids = read_dataset(args.test, require_connectivity=mode in ("theta", "z"))
    if test.n_nodes != train.n_nodes:
        raise ValueError(f"test data has V={test.n_nodes}, training data V={train.n_nodes}")
    out = Path(args.out)
    man = RunManifest("predict", {**cfg.to_dict(), "mode": mode, "standardize": standardize},
                      cfg.seed)
    man.add_input("train", train_path)
    man.add_input("test", args.test)
    if mode in ("theta", "z"):
        if moments is not None:
            test = standardize_connectivity(test, moments)
        observed = test.attributes if test.attr_observed.all() else None
        res = predict_attributes(train, test.connectivity, test.conn_covariates,
                                 test.attr_covariates, cfg, observed)[mode.upper()]
        write_csv(out, ["subject_id", *train.attribute_labels],
                  ([ids[i], *res.predicted[i]] for i in range(len(ids))))
    else:
        observed = test.connectivity if test.conn_observed.all() else None
        if observed is not None and moments is not None:
            observed = standardize_connectivity(test, moments).connectivity
        if mode == "connectivity":
            if not test.attr_observed.all():
                raise ValueError("connectivity prediction needs attributes for every test subject")
            res = predict_connectivity(train, test.attributes, test.conn_covariates, cfg,
                                       observed, new_attr_covariates=test.attr_covariates)
        else:
            res = averaging_baseline(train, test.n_subjects, observed)
        pred = res.predicted
        iu, iv = edge_indices(train.n_nodes)
        E = pred[:, iu, iv]
        if moments is not None:         # back to the input scale
            E = E * moments[1] + moments[0]
        write_csv(out, ["subject_id", "node_u", "node_v", "weight"],
                  ([ids[i], int(iu[k]) + 1, int(iv[k]) + 1, E[i, k]]
                   for i in range(len(ids)) for k in range(len(iu))))
    outputs = [out]
    if res.correlations:
        cpath = out.with_name(out.stem + "_correlations.csv")
        write_csv(cpath, ["target", "correlation"], sorted(res.correlations.items()))
        outputs.append(cpath)
    for p in outputs:
        man.add_output(p)
    man.write(_manifest_for_file(out))


def _expand_grid(spec: dict) -> list:
    if "cells" in spec:
        return [SimulationConfig.from_dict(_known(SimulationConfig, c)) for c in spec["cells"]]
    g = spec.get("grid", {})
    base = _known(SimulationConfig, spec.get("base", {}))
    keys = sorted(g)
    vals = [g[k] if isinstance(g[k], list) else [g[k]] for k in keys]
    _known(SimulationConfig, dict.fromkeys(keys))
    return [SimulationConfig.from_dict({**base, **dict(zip(keys, combo))})
            for combo in itertools.product(*vals)]


def _default_jobs() -> int:
    v = os.environ.get("LATENTSNA_THREADS")
    return int(v) if v and v.isdigit() and int(v) > 0 else 1


def cmd_compare(args) -> None:
    spec = _read_json(args.grid)
    extra = sorted(set(spec) - {"cells", "grid", "base", "replicates", "methods", "sampler",
                                "test_fraction", "seed"})
    if extra:
        raise ValueError(f"unknown grid key(s): {', '.join(extra)}")
    grid = _expand_grid(spec)
    if not grid:
        raise ValueError("grid is empty")
    seed = args.seed if args.seed is not None else int(spec.get("seed", 0))
    reps = args.replicates or int(spec.get("replicates", 100))
    methods = tuple(args.methods.split(",")) if args.methods else tuple(spec.get("methods", METHODS))
    scfg = _sampler_config(spec.get("sampler", {}), None)
    tf = float(spec.get("test_fraction", 0.2))
    table = run_comparison(grid, methods, reps, seed, scfg, tf, n_jobs=args.jobs or _default_jobs())
    out = Path(args.out)
    cols = table.COLUMNS
    write_csv(out, cols, ([r[c] for c in cols] for r in table.rows))
    rpath = out.with_name(out.stem + "_replicates.csv")
    write_csv(rpath, ["cell", "replicate", "method", "power", "specificity",
                      "prediction_correlation", "flagged_regions", "error"],
              ([r["cell"], r["replicate"], r["method"], r["power"], r["specificity"],
                r["prediction_correlation"], " ".join(str(u + 1) for u in r.get("flags", [])),
                r["error"] or ""] for r in table.records))
    man = RunManifest("compare", {"cells": [g.to_dict() for g in grid], "replicates": reps,
                                  "methods": list(methods), "sampler": scfg.to_dict(),
                                  "test_fraction": tf}, seed)
    man.add_input("grid", args.grid)
    man.add_output(out)
    man.add_output(rpath)
    man.write(_manifest_for_file(out))
    if table.failures():
        log.warning("%d replicate(s) failed; see %s", len(table.failures()), rpath.name)


def cmd_netstats(args) -> None:
    chain = load_chain(args.chain)
    graphs = {"latent": latent_network(chain)}
    man = RunManifest("netstats", {"distance_convention": "shifted weights are edge lengths",
                                   "closeness_disconnected": "within component, scaled by "
                                   "(reachable - 1) / (V - 1)"}, chain.config.seed)
    man.add_input("chain", args.chain)
    if args.data:
        data, _ = read_dataset(args.data)
        man.add_input("data", args.data)
        graphs["observed"] = WeightedGraph(data.connectivity[data.conn_observed].mean(axis=0),
                                           data.node_labels)
    rows, shape = [], []
    for name, g in graphs.items():
        prof = centrality_profile(g)
        for u, lab in enumerate(g.labels):
            rows.append([name, u + 1, lab, prof.strength[u], prof.closeness[u], prof.betweenness[u]])
        for test, fn, nmin in (("skewness", skewness_test, 8), ("kurtosis", kurtosis_test, 20)):
            if g.n_nodes >= nmin:
                r = fn(prof.strength)
                shape.append([name, "strength", test, r.statistic, r.pvalue, r.estimate])
            else:
                shape.append([name, "strength", test, np.nan, np.nan, np.nan])
    out = Path(args.out)
    write_csv(out, ["network", "node", "label", "strength", "closeness", "betweenness"], rows)
    spath = out.with_name(out.stem + "_shape.csv")
    write_csv(spath, ["network", "metric", "test", "statistic", "pvalue", "estimate"], shape)
    man.add_output(out)
    man.add_output(spath)
    man.write(_manifest_for_file(out))


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentsna", description="Joint latent modelling of networks and attributes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic cohort")
    s.add_argument("--config", help="simulation config JSON")
    s.add_argument("--out", required=True, help="output dataset directory")

    s = sub.add_parser("fit", help="run the Gibbs sampler")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="sampler config JSON")
    s.add_argument("--out", required=True, help="output chain directory")
    s.add_argument("--trace-svg", action="store_true", help="also write trace.svg")

    s = sub.add_parser("detect", help="credible-interval region calls")
    s.add_argument("--chain", required=True)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--out", required=True, help="report CSV")

    s = sub.add_parser("predict", help="held-out prediction")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--train", help="training dataset directory")
    src.add_argument("--chain", help="fit output directory (reuses its data and config)")
    s.add_argument("--test", required=True, help="held-out dataset directory")
    s.add_argument("--mode", required=True, choices=("theta", "z", "connectivity", "averaging"))
    s.add_argument("--config", help="sampler config JSON")
    s.add_argument("--out", required=True, help="prediction CSV")

    s = sub.add_parser("compare", help="replicated method comparison")
    s.add_argument("--grid", required=True, help="grid JSON")
    s.add_argument("--out", required=True, help="table CSV")
    s.add_argument("--replicates", type=int, help="override the grid's replicate count")
    s.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    s.add_argument("--jobs", type=int, help="parallel workers (default LATENTSNA_THREADS or 1)")

    s = sub.add_parser("netstats", help="latent-network centralities")
    s.add_argument("--chain", required=True)
    s.add_argument("--data", help="dataset directory; adds the observed mean network")
    s.add_argument("--out", required=True, help="metrics CSV")

    for name, sp in sub.choices.items():
        sp.add_argument("--seed", type=int, help="override the seed from any config")
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "detect": cmd_detect,
            "predict": cmd_predict, "compare": cmd_compare, "netstats": cmd_netstats}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except SamplerError as exc:
        print(f"error: sampler failed: {exc}", file=sys.stderr)
        return 2
    except (ValueError, DatasetFormatError, ChainFormatError, FileNotFoundError,
            KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
