"""Command-line interface: ``hedkit <subcommand> ...``.

Every subcommand accepts ``--seed``, ``--out`` and ``--format {csv,text}``.
Outputs are staged and moved into place only after everything succeeded.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .dataio import (atomic_write, check_codes_against_design, frame_to_csv, load_config, read_dataset,
                     read_wr, shipped_config)
from .design import DesignSpec, cell_table, enumerate_embedded_ais
from .errors import ConfigError, HedError
from .estimands import (ai_contrast, conditional_from_marginal, figure4_surface, render_table,
                        EstimandReport)
from .estimator import ModelFit, coefficient_table, fit_preset, fit_weighted_glm, preset_model
from .power import PowerRequest, monte_carlo_power
from .restructure import weight_and_replicate_distal, weight_and_replicate_proximal
from .simulate import DGPSpec, simulate_trial

log = logging.getLogger("hedkit")


def _config(path):
    p = Path(path)
    if not p.exists() and shipped_config(path).exists():
        p = shipped_config(path)
    return load_config(p)


def _design(args) -> DesignSpec:
    if not args.config:
        raise ConfigError("--config is required")
    return _config(args.config).design


def _render(frame: pd.DataFrame, fmt: str, header: str = "") -> str:
    if fmt == "csv":
        return frame_to_csv(frame)
    with pd.option_context("display.width", 200, "display.max_columns", 50, "display.max_rows", 10000):
        body = frame.to_string(index=False)
    return (header + "\n" if header else "") + body + "\n"


def _emit(args, text: str, extra: dict | None = None) -> None:
    outputs = dict(extra or {})
    if args.out:
        outputs[args.out] = text
    if outputs:
        atomic_write(outputs)
    if not args.out:
        sys.stdout.write(text)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


# ---------------------------------------------------------------------------


def cmd_cells(args) -> int:
    spec = _design(args)
    cells = pd.DataFrame(cell_table(spec))
    text = _render(cells, args.format, f"{len(cells)} cells")
    if spec.is_restricted:
        ais = pd.DataFrame([{"ai": a.number, "z": " ".join(f"{v:+d}" for v in a.z), "cells": " ".join(a.cells)}
                            for a in enumerate_embedded_ais(spec)])
        sep = "" if args.format == "csv" else "\n"
        text += sep + _render(ais, args.format, f"{len(ais)} embedded adaptive interventions")
    _emit(args, text)
    return 0


def _prefix_paths(out: str) -> tuple[str, str]:
    base = out[:-4] if out.endswith(".csv") else out
    return base + "_wide.csv", base + "_long.csv"


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    dgp = cfg.dgp or DGPSpec()
    data = simulate_trial(cfg.design, dgp, args.n, args.seed)
    if not args.out:
        raise ConfigError("simulate needs --out PREFIX (writes PREFIX_wide.csv and PREFIX_long.csv)")
    wide_path, long_path = _prefix_paths(args.out)
    outputs = {wide_path: frame_to_csv(data.wide)}
    if cfg.design.micro_factor is not None:
        outputs[long_path] = frame_to_csv(data.long)
    atomic_write(outputs)
    summary = pd.DataFrame([{"file": k, "rows": len(data.wide) if k == wide_path else len(data.long)}
                            for k in outputs])
    if args.format == "text":
        sys.stdout.write(_render(summary, "text"))
    return 0


def cmd_restructure(args) -> int:
    spec = _design(args)
    data = read_dataset(args.wide, args.long)
    check_codes_against_design(data, spec)
    if args.scope == "distal":
        wr = weight_and_replicate_distal(data, spec)
    else:
        wr = weight_and_replicate_proximal(data, spec)
    text = _render(wr.rows, args.format) if args.format == "text" else frame_to_csv(wr.rows)
    _emit(args, text)
    return 0


def _is_wr(path) -> bool:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    return {"weight", "cluster_id", "replicate_index"} <= set(header)


def cmd_fit(args) -> int:
    cfg = _config(args.config) if args.config else None
    preset = args.preset or (cfg.model.get("preset") if cfg else None)
    if not preset:
        raise ConfigError("--preset is required (or model.preset in the config)")
    link = args.link or (cfg.model.get("link") if cfg else None)
    micro_center = args.micro_center if args.micro_center is not None else \
        (cfg.model.get("micro_center") if cfg else None)
    # an explicit empty --covariates "" means no covariates
    covs = [c for c in args.covariates.split(",") if c.strip()] if args.covariates is not None else \
        (cfg.model.get("covariates") if cfg else None)
    if _is_wr(args.wide):
        wr = read_wr(args.wide)
        model = preset_model(preset, wr.covariates if covs is None else covs, link, micro_center)
        fit = fit_weighted_glm(model, wr)
    else:
        if cfg is None:
            raise ConfigError("fitting unrestructured data needs --config for the design")
        data = read_dataset(args.wide, args.long)
        check_codes_against_design(data, cfg.design)
        fit = fit_preset(preset, data, cfg.design, link, covs, micro_center)
    table = coefficient_table(fit)
    header = (f"preset {fit.preset}  link {fit.link}  rows {fit.n_rows}  clusters {fit.n_clusters}  "
              f"iterations {fit.iterations}")
    if fit.r_hat is not None:
        header += f"  r_hat {fit.r_hat:.6g}"
    for note in fit.notes:
        header += f"\nnote: {note}"
    extra = {args.save_fit: fit.to_json() + "\n"} if args.save_fit else None
    _emit(args, _render(table, args.format, header), extra)
    return 0


def _load_fit(path) -> ModelFit:
    try:
        return ModelFit.from_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: cannot read fit ({exc})") from None


def cmd_estimand(args) -> int:
    fit = _load_fit(args.fit)
    report = render_table(fit, None, args.a_bar, args.a_bar_prime, args.r_hat)
    entries = report.entries if args.question == "all" else [report[args.question]]
    if args.conditional:
        r = report.r_hat
        if r is None:
            raise ConfigError("no response rate available; pass --r-hat")
        entries = [conditional_from_marginal(e, r) if e.scale_note.startswith("marginal") else e
                   for e in entries]
    frame = EstimandReport(list(entries), report.r_hat).to_frame()
    _emit(args, _render(frame, args.format))
    return 0


def cmd_contrast(args) -> int:
    fit = _load_fit(args.fit)
    z = [int(v) for v in _floats(",".join(args.z))]
    zp = [int(v) for v in _floats(",".join(args.z_prime))]
    e = ai_contrast(fit, z, zp)
    _emit(args, _render(pd.DataFrame([e.as_row()]), args.format))
    return 0


def cmd_power(args) -> int:
    cfg = _config(args.config)
    p = dict(cfg.power)
    for key in ("n", "reps", "estimand", "alpha", "workers"):
        v = getattr(args, key)
        if v is not None:
            p[key] = v
    if args.seed is not None:
        p["master_seed"] = args.seed
    missing = [k for k in ("n", "estimand") if k not in p]
    if missing:
        raise ConfigError(f"power request lacks {', '.join(missing)}")
    req = PowerRequest(cfg.design, cfg.dgp or DGPSpec(), int(p["n"]), str(p["estimand"]),
                       float(p.get("alpha", 0.05)), int(p.get("reps", 1000)), int(p.get("master_seed", 0)),
                       p.get("preset"), int(p.get("workers", 1)))
    res = monte_carlo_power(req)
    summary = pd.DataFrame([res.summary()])
    extra = {args.replicates: frame_to_csv(res.replicate_frame())} if args.replicates else None
    _emit(args, _render(summary, args.format), extra)
    return 0


def cmd_figure4(args) -> int:
    fit = _load_fit(args.fit)
    if args.grid:
        grid = _floats(args.grid)
    else:
        lo, hi, k = args.grid_range.split(":")
        grid = list(np.linspace(float(lo), float(hi), int(k)))
    _emit(args, _render(figure4_surface(fit, grid), args.format))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hedkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hedkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None, help="random seed (used where randomness applies)")
        p.add_argument("--out", default=None, help="output path (default: stdout)")
        p.add_argument("--format", choices=("csv", "text"), default="text")
        p.set_defaults(func=func)
        return p

    p = add("cells", cmd_cells, "enumerate cells and embedded adaptive interventions")
    p.add_argument("--config", required=True)

    p = add("simulate", cmd_simulate, "simulate a trial to wide/long CSVs")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, required=True)

    p = add("restructure", cmd_restructure, "Weight-and-Replicate a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--wide", required=True)
    p.add_argument("--long", default=None)
    p.add_argument("--scope", choices=("distal", "proximal"), default="distal")

    p = add("fit", cmd_fit, "fit a preset model and report coefficients")
    p.add_argument("--preset", default=None)
    p.add_argument("--wide", required=True, help="wide CSV, or a restructured (W&R) CSV")
    p.add_argument("--long", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--link", choices=("identity", "log"), default=None)
    p.add_argument("--covariates", default=None, help="comma-separated covariate columns")
    p.add_argument("--micro-center", type=float, default=None)
    p.add_argument("--save-fit", default=None, help="write the fit as JSON for later subcommands")

    p = add("estimand", cmd_estimand, "report a table question from a saved fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--question", default="all", help="e.g. Table2-C, or 'all'")
    p.add_argument("--conditional", action="store_true", help="rescale stage-2 effects to non-responders")
    p.add_argument("--r-hat", type=float, default=None)
    p.add_argument("--a-bar", type=float, default=0.4)
    p.add_argument("--a-bar-prime", type=float, default=0.1)

    p = add("contrast", cmd_contrast, "contrast two embedded adaptive interventions")
    p.add_argument("--fit", required=True)
    p.add_argument("--z", nargs="+", required=True, help="level vector, e.g. 1 1 1 (or --z=1,1,1)")
    p.add_argument("--z-prime", nargs="+", required=True, help="e.g. -1 1 1 (or --z-prime=-1,1,1)")

    p = add("power", cmd_power, "Monte Carlo power for one estimand")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--estimand", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--replicates", default=None, help="CSV path for per-replicate estimates")

    p = add("figure4", cmd_figure4, "predicted distal outcome over a grid of message rates")
    p.add_argument("--fit", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", help="comma-separated a_bar values")
    g.add_argument("--grid-range", help="start:stop:count")
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"error: {prob}", file=sys.stderr)
        return 2
    except HedError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
