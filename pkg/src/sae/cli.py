"""Command line interface: ``sae <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 sampling failure. ``SAE_SEED``
overrides any seed given in a config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import metrics
from .exceptions import SaeError, SamplingError, ValidationError

logger = logging.getLogger("sae")

EXIT_OK, EXIT_INVALID, EXIT_SAMPLING = 0, 2, 3


def _load_config(path) -> dict:
    if path is None:
        cfg = {}
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a JSON object")
    env = os.environ.get("SAE_SEED")
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError as exc:
            raise ValidationError(f"SAE_SEED must be an integer, got {env!r}") from exc
    return cfg


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_default)


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------------------
# commands


def cmd_graph_check(args) -> int:
    from .graph import graph_report, load_edge_list

    text = Path(args.edges).read_text(encoding="utf-8")
    report = graph_report(text)
    report["ok"] = bool(report["n_regions"] and (report["connected"] or args.allow_components))
    if report["ok"]:
        g = load_edge_list(text, allow_components=args.allow_components)
        report["sha256"] = g.content_hash
        report["bandwidth"] = g.bandwidth
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK if report["ok"] else EXIT_INVALID


def cmd_train_prior(args) -> int:
    from .graph import read_edge_list
    from .study import train_prior
    from .vae import TrainConfig, save_decoder

    cfg = _load_config(args.config)
    graph = read_edge_list(args.graph)
    vae_cfg = cfg.get("vae", {})
    known = {f.name for f in fields(TrainConfig)}
    bad = set(vae_cfg) - known
    if bad:
        raise ValidationError(f"unknown vae settings: {sorted(bad)}")
    if args.epochs is not None:
        vae_cfg["epochs"] = args.epochs
    layout = args.layout or cfg.get("layout", "univariate")
    K = args.K or cfg.get("K", 1 if layout.startswith("uni") else 2)
    n = args.n_samples or cfg.get("n_samples", 10000)
    seed = cfg.get("seed", 0)
    art = train_prior(graph, layout, K, n, seed, TrainConfig(**vae_cfg))
    save_decoder(art, args.out)
    print(json.dumps({"artifact": str(args.out), **art.metadata}, default=_default))
    return EXIT_OK


def cmd_fit(args) -> int:
    from .dataprep import read_direct_csv
    from .graph import read_edge_list
    from .hmc import HmcConfig, config_dict, save_draws
    from .models import ModelSpec, Priors, fit, summarize_theta
    from .vae import load_decoder

    cfg = _load_config(args.config)
    graph = read_edge_list(args.graph)
    data = read_direct_csv(args.data, log_scale=cfg.get("log_scale", False),
                           moe_level=cfg.get("moe_level", 0.90)).aligned_to(graph)
    spec = ModelSpec(args.model, data.K, priors=Priors(**cfg.get("priors", {})),
                     gmcar_order=cfg.get("gmcar_order", 1),
                     vsms_scale=cfg.get("vsms_scale", "cholesky"),
                     theta_param=cfg.get("theta_param", "noncentered"))
    decoder = load_decoder(args.decoder) if args.decoder else None
    if spec.variational and decoder is None:
        raise ValidationError(f"--decoder is required for model {args.model}")
    hmc = HmcConfig(**{**cfg.get("hmc", {}), "seed": cfg.get("seed", 0)})
    draws, diag = fit(spec, data, graph, decoder, hmc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summ = summarize_theta(draws, spec, data)
    summ.to_frame().to_csv(out / "theta_summary.csv", index=False, float_format="%.10g")
    save_draws(draws, out / "draws.bin")
    report = {"model": spec.kind, "hmc": config_dict(hmc),
              "divergences": int(draws.divergences.sum()),
              "mean_accept": float(draws.accept_prob.mean()),
              "step_size": draws.step_size}
    if diag is not None:
        report.update(diag.to_dict())
    _write_json(report, out / "diagnostics.json")
    print(f"wrote {out / 'theta_summary.csv'}")
    return EXIT_OK


def cmd_simulate_study(args) -> int:
    from .study import SimulationConfig, run_study

    cfg = _load_config(args.config)
    config = SimulationConfig.from_dict(cfg)
    report = run_study(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    report.frame().to_csv(out / "replicates.csv", index=False, float_format="%.10g")
    print(report.summary().to_string(index=False))
    return EXIT_OK


def _truth_table(path):
    df = pd.read_csv(path, dtype={"region_id": str}).set_index("region_id")
    cols = [c for c in df.columns if c.startswith("truth_")]
    if not cols:
        raise ValidationError("truth CSV needs truth_<name> columns")
    return df[cols].rename(columns=lambda c: c[6:])


def cmd_metrics(args) -> int:
    from .dataprep import read_wide_csv

    truth = _truth_table(args.truth)
    est = read_wide_csv(args.estimates)
    suffix = "" if args.scale == "log" else "_orig"
    if "mean" not in est:
        raise ValidationError("estimates CSV must be a theta summary "
                              "(region_id, response, mean, q025, q975, ...)")
    point = est["mean" + suffix]
    try:
        point = point.loc[truth.index, truth.columns]
    except KeyError as exc:
        raise ValidationError(f"estimates and truth do not align: {exc}") from exc
    t = truth.to_numpy(float)
    if args.scale == "orig" and args.truth_scale == "log":
        t = np.exp(t)
    result = {"scale": args.scale, "responses": list(truth.columns),
              "rmse": metrics.rmse(point.to_numpy(float), t)}
    if "q025" + suffix in est:
        lo = est["q025" + suffix].loc[truth.index, truth.columns].to_numpy(float)
        hi = est["q975" + suffix].loc[truth.index, truth.columns].to_numpy(float)
        result["interval_score"] = metrics.interval_score(lo, hi, t)
        result["coverage"] = metrics.coverage(lo, hi, t)
    print(json.dumps(result, default=_default, indent=1))
    if args.out:
        _write_json(result, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("graph", help="adjacency utilities")
    gsub = g.add_subparsers(dest="graph_command", required=True)
    gc = gsub.add_parser("check", help="validate an edge list and report its structure")
    gc.add_argument("edges")
    gc.add_argument("--allow-components", action="store_true",
                    help="accept a disconnected graph (its largest component is used)")
    gc.set_defaults(func=cmd_graph_check)

    t = sub.add_parser("train-prior", help="train a VAE decoder on CAR prior draws")
    t.add_argument("--graph", required=True)
    t.add_argument("--layout", choices=["univariate", "vectorized"])
    t.add_argument("--K", type=int)
    t.add_argument("--n-samples", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_prior)

    f = sub.add_parser("fit", help="fit one model to a direct-estimate table")
    f.add_argument("--model", required=True, choices=["fh", "sms", "gms", "vsms", "vgms"])
    f.add_argument("--data", required=True)
    f.add_argument("--graph", required=True)
    f.add_argument("--decoder")
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate-study", help="run the replicated simulation study")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate_study)

    m = sub.add_parser("metrics", help="score a theta summary against known truth")
    m.add_argument("--estimates", required=True)
    m.add_argument("--truth", required=True)
    m.add_argument("--scale", choices=["orig", "log"], default="orig")
    m.add_argument("--truth-scale", choices=["orig", "log"], default="log",
                   help="scale of the truth_<name> columns")
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SamplingError as exc:
        print(f"sampling failed: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    except (SaeError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
