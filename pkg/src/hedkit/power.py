"""Monte Carlo power: simulate, restructure, fit, test, repeat.

Replicate ``i`` draws from ``SeedSequence(master_seed, spawn_key=(i,))`` so
results do not depend on how replicates are split across workers.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import pandas as pd

from .design import DesignSpec, check_design
from .errors import EstimandError, EstimationError, PowerAbortError, SimulationError
from .estimands import _TABLES, entry_from_contrast, render_table
from .estimator import fit_preset
from .simulate import DGPSpec, randomization_balance, simulate_trial

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.05
_TABLE_PRESET = {"Table2": "model1", "Table3": "model2", "Table4": "model3",
                 "Table6": "model4", "Table7": "model5"}


@dataclass(frozen=True)
class PowerRequest:
    design: DesignSpec
    dgp: DGPSpec
    n: int
    estimand: str
    alpha: float = 0.05
    reps: int = 1000
    master_seed: int = 0
    preset: str | None = None
    workers: int = 1

    def validate(self) -> list[str]:
        out = []
        if not (0.0 < self.alpha <= 1.0):
            out.append(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.reps < 1:
            out.append("reps must be >= 1")
        if self.n < 2:
            out.append("n must be >= 2")
        if self.workers < 1:
            out.append("workers must be >= 1")
        return out


@dataclass
class PowerResult:
    estimand: str
    power: float
    mc_se: float
    rejections: int
    reps: int
    failed: int
    mean_estimate: float
    estimates: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    rejected: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0, dtype=bool))
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"estimand": self.estimand, "power": self.power, "mc_se": self.mc_se,
                "rejections": self.rejections, "reps": self.reps, "failed": self.failed,
                "mean_estimate": self.mean_estimate, **self.diagnostics}

    def replicate_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"replicate": np.arange(len(self.estimates)), "estimate": self.estimates,
                             "rejected": self.rejected.astype(int)})


def resolve_estimand(estimand: str, preset: str | None = None) -> tuple[str, str]:
    """Map ``"Table6-B"`` or ``"preset/term"`` to (preset, question or term)."""
    if "/" in estimand:
        p, term = estimand.split("/", 1)
        return p, term
    table = estimand.split("-")[0]
    if preset is None:
        if table not in _TABLE_PRESET:
            raise EstimandError(f"unknown estimand {estimand!r}")
        preset = _TABLE_PRESET[table]
    if preset not in _TABLES or _TABLES[preset][0] != table:
        raise EstimandError(f"estimand {estimand!r} is not reported by preset {preset!r}")
    letters = [q for q, _, _ in _TABLES[preset][1]]
    if estimand.split("-", 1)[-1] not in letters:
        raise EstimandError(f"unknown estimand {estimand!r}")
    return preset, estimand


def _estimate(fit, target: str):
    if target.startswith("Table"):
        return render_table(fit)[target]
    c = np.zeros(len(fit.labels))
    c[fit.index(target)] = 2.0
    return entry_from_contrast(fit, c, target, f"2 x {target}")


def replicate_seed(master_seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(i,))


def _run_chunk(args):
    design, dgp, n, targets, master_seed, indices = args
    by_preset: dict[str, list[str]] = {}
    for p, t in targets:
        by_preset.setdefault(p, []).append(t)
    out = []
    for i in indices:
        try:
            data = simulate_trial(design, dgp, n, replicate_seed(master_seed, i), warn_balance=False)
            res = {"balance_flag": bool(randomization_balance(data, design)["flag"].any())}
            for p, ts in by_preset.items():
                fit = fit_preset(p, data, design)
                for t in ts:
                    e = _estimate(fit, t)
                    res[(p, t)] = (e.estimate, e.p, fit.n_clusters)
            out.append((i, res, None))
        except (EstimationError, SimulationError) as exc:
            out.append((i, None, f"{type(exc).__name__}: {exc}"))
    return out


def _run(design, dgp, n, targets, reps, master_seed, workers):
    chunks = [list(range(k, reps, workers)) for k in range(workers)] if workers > 1 else [list(range(reps))]
    jobs = [(design, dgp, n, targets, master_seed, c) for c in chunks if c]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    merged = sorted((r for part in parts for r in part), key=lambda r: r[0])
    failures = [(i, msg) for i, res, msg in merged if res is None]
    if len(failures) > MAX_FAILURE_RATE * reps:
        raise PowerAbortError(f"{len(failures)} of {reps} replicates failed; first: {failures[0][1]}")
    for i, msg in failures:
        log.warning("replicate %d excluded: %s", i, msg)
    return [res for _, res, _ in merged if res is not None], len(failures)


def _result(name, results, key, alpha, failed) -> PowerResult:
    est = np.array([r[key][0] for r in results], dtype=float)
    pv = np.array([r[key][1] for r in results], dtype=float)
    rej = pv <= alpha
    k = len(est)
    if k == 0:
        raise PowerAbortError("no replicate succeeded")
    power = int(rej.sum()) / k
    diag = {"min_clusters": int(min(r[key][2] for r in results)),
            "balance_flagged_reps": int(sum(r["balance_flag"] for r in results))}
    if diag["min_clusters"] < 50:
        diag["small_sample_flag"] = True
    return PowerResult(name, power, math.sqrt(power * (1 - power) / k), int(rej.sum()), k, failed,
                       float(est.mean()), est, rej, diag)


def monte_carlo_power(req: PowerRequest) -> PowerResult:
    problems = req.validate()
    if problems:
        raise ValueError("; ".join(problems))
    check_design(req.design)
    if req.reps < 100:
        log.warning("reps=%d < 100: power estimate is too coarse to report", req.reps)
    target = resolve_estimand(req.estimand, req.preset)
    results, failed = _run(req.design, req.dgp, req.n, [target], req.reps, req.master_seed, req.workers)
    return _result(req.estimand, results, target, req.alpha, failed)


def relative_power_profile(design: DesignSpec, dgp: DGPSpec, n: int, estimands: Sequence[str],
                           alpha: float = 0.05, reps: int = 1000, master_seed: int = 0,
                           workers: int = 1) -> pd.DataFrame:
    """Power for several estimands from the same simulated replicates."""
    if len(estimands) < 2:
        raise ValueError("relative_power_profile needs at least two estimands")
    targets = [resolve_estimand(e) for e in estimands]
    results, failed = _run(design, dgp, n, targets, reps, master_seed, workers)
    res = [_result(e, results, t, alpha, failed) for e, t in zip(estimands, targets)]
    frame = pd.DataFrame([r.summary() for r in res])
    frame.attrs["results"] = res
    return frame


def paired_difference(a: PowerResult, b: PowerResult) -> tuple[float, float]:
    """Power difference a - b and its Monte Carlo SE under paired seeds."""
    if len(a.rejected) != len(b.rejected):
        raise ValueError("results are not paired (different replicate counts)")
    d = a.rejected.astype(float) - b.rejected.astype(float)
    k = len(d)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(k)) if k > 1 else 0.0


def inflate_for_missingness(n: int, m: float) -> int:
    """ceil(n / (1 - m)), computed without binary rounding drift."""
    if not (0 <= m < 1):
        raise ValueError(f"missing proportion must lie in [0, 1), got {m}")
    q = Fraction(int(n)) / (1 - Fraction(str(m)))
    return int(math.ceil(q))
