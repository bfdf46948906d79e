"""Synthetic trial data for hybrid designs with planted coefficients.

Linear predictors are sums of ``coef * term`` using the term vocabulary of
:mod:`hedkit.terms`.  For response-restricted designs the planted
coefficients are, by default, the *marginal* (Weight-and-Replicate)
estimands: the non-responder mean is constructed as
``(marginal - r * responder) / (1 - r)`` so that averaging over response
status reproduces the planted model exactly.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from . import terms as T
from .design import DesignSpec, check_design, illustrative_design
from .errors import SimulationError

log = logging.getLogger(__name__)

WIDE_FIXED = ("id",)
LONG_COLUMNS = ("id", "t", "c_t", "a_t", "y_prox")

DEFAULT_COVARIATES = (("bmi", "normal(0, 1)"), ("sex", "pm1(0.5)"))

_STREAMS = ("covariates", "stage1", "response", "stage2", "micro", "distal", "proximal", "subject")


@dataclass(frozen=True)
class DGPSpec:
    theta_true: Mapping[str, float] = field(default_factory=dict)
    gamma_beta_true: Mapping[str, float] = field(default_factory=dict)
    # constant, or linear-probability terms over stage-1 codes, e.g. {"1": 0.5, "z1": 0.1}
    response_prob: float | Mapping[str, float] = 0.5
    # per-assessment non-response hazards (sequential tailoring); None -> from response_prob
    nonresponse_hazards: tuple[float, ...] | None = None
    response_shift: float = 0.0
    proximal_response_shift: float = 0.0
    distal_noise_sd: float = 1.0
    proximal_noise_sd: float = 1.0
    proximal_subject_sd: float = 0.0
    proximal_link: str = "identity"
    baseline_covariate_spec: tuple[tuple[str, str], ...] = DEFAULT_COVARIATES
    effects_scale: str = "marginal"
    # Abar enters the distal predictor as (Abar - abar_center); "auto" -> 2 p_on - 1
    abar_center: float | str = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta_true", dict(self.theta_true))
        object.__setattr__(self, "gamma_beta_true", dict(self.gamma_beta_true))
        object.__setattr__(self, "baseline_covariate_spec",
                           tuple(tuple(c) for c in self.baseline_covariate_spec))
        if self.nonresponse_hazards is not None:
            object.__setattr__(self, "nonresponse_hazards", tuple(self.nonresponse_hazards))

    def validate(self) -> list[str]:
        problems = []
        if not self.distal_noise_sd > 0:
            problems.append("distal_noise_sd must be > 0")
        if not self.proximal_noise_sd > 0:
            problems.append("proximal_noise_sd must be > 0")
        if self.proximal_subject_sd < 0:
            problems.append("proximal_subject_sd must be >= 0")
        if self.proximal_link not in ("identity", "log"):
            problems.append(f"unknown proximal_link {self.proximal_link!r}")
        if self.proximal_link == "log" and self.proximal_subject_sd > 0:
            problems.append("proximal_subject_sd requires the identity link")
        if self.effects_scale not in ("marginal", "conditional"):
            problems.append(f"unknown effects_scale {self.effects_scale!r}")
        if isinstance(self.response_prob, (int, float)) and not 0 < self.response_prob < 1:
            # 0 is allowed only as "no responders"
            if self.response_prob != 0:
                problems.append("response_prob must lie in (0, 1)")
        if self.nonresponse_hazards is not None:
            if any(not 0 <= h <= 1 for h in self.nonresponse_hazards):
                problems.append("nonresponse_hazards must lie in [0, 1]")
        for name, dist in self.baseline_covariate_spec:
            try:
                _parse_dist(dist)
            except SimulationError as e:
                problems.append(f"covariate {name!r}: {e}")
        if isinstance(self.abar_center, str) and self.abar_center != "auto":
            problems.append("abar_center must be a number or 'auto'")
        return problems


@dataclass(frozen=True)
class TrialDataset:
    """One wide row per participant plus a long person-period table."""

    wide: pd.DataFrame
    long: pd.DataFrame
    covariates: tuple[str, ...] = ()
    z_columns: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.wide)

    def equals(self, other: "TrialDataset") -> bool:
        return (
            self.covariates == other.covariates
            and self.z_columns == other.z_columns
            and _frames_equal(self.wide, other.wide)
            and _frames_equal(self.long, other.long)
        )


def _frames_equal(a: pd.DataFrame, b: pd.DataFrame) -> bool:
    if list(a.columns) != list(b.columns) or len(a) != len(b):
        return False
    try:
        pd.testing.assert_frame_equal(a.reset_index(drop=True), b.reset_index(drop=True),
                                      check_exact=True, check_dtype=False)
    except AssertionError:
        return False
    return True


_DIST = re.compile(r"^\s*(\w+)\s*\(([^)]*)\)\s*$")


def _parse_dist(text: str) -> tuple[str, tuple[float, ...]]:
    m = _DIST.match(text)
    if not m:
        raise SimulationError(f"cannot parse distribution {text!r}")
    kind = m.group(1).lower()
    try:
        args = tuple(float(x) for x in m.group(2).split(",") if x.strip())
    except ValueError:
        raise SimulationError(f"bad numeric argument in {text!r}") from None
    arity = {"normal": 2, "pm1": 1, "bernoulli": 1, "uniform": 2}
    if kind not in arity:
        raise SimulationError(f"unknown distribution {kind!r}")
    if len(args) != arity[kind]:
        raise SimulationError(f"{kind} takes {arity[kind]} arguments")
    return kind, args


def _draw_covariate(text: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Draw values and return them with the population mean."""
    kind, args = _parse_dist(text)
    if kind == "normal":
        return rng.normal(args[0], args[1], n), args[0]
    if kind == "uniform":
        return rng.uniform(args[0], args[1], n), 0.5 * (args[0] + args[1])
    if kind == "pm1":
        return np.where(rng.random(n) < args[0], 1.0, -1.0), 2 * args[0] - 1
    return (rng.random(n) < args[0]).astype(float), args[0]


def _streams(seed) -> dict[str, np.random.Generator]:
    if isinstance(seed, np.random.SeedSequence):
        entropy, key = seed.entropy, tuple(seed.spawn_key)
    else:
        entropy, key = int(seed), ()
    return {
        name: np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=key + (i,)))
        for i, name in enumerate(_STREAMS)
    }


def _codes(rng: np.random.Generator, p: float, shape) -> np.ndarray:
    return np.where(rng.random(shape) < p, 1, -1).astype(np.int64)


def _response_prob(dgp: DGPSpec, cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    rp = dgp.response_prob
    if isinstance(rp, (int, float)):
        return np.full(n, float(rp))
    return T.linear_predictor(dict(rp), cols, n)


def _involves(term: str, col: str | None) -> bool:
    return col is not None and col in T.parts(term)


def simulate_trial(spec: DesignSpec, dgp: DGPSpec, n: int, seed, a_override=None,
                   warn_balance: bool = True) -> TrialDataset:
    """Simulate ``n`` participants.  Deterministic in ``(spec, dgp, n, seed)``.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`.
    ``a_override`` (n x T array of +/-1) replaces the micro-randomized draws;
    it exists to audit that proximal outcomes never look ahead.
    ``warn_balance=False`` skips the |z| > 3 balance warning (Monte Carlo loops
    count flags themselves).
    """
    check_design(spec)
    problems = dgp.validate()
    if problems:
        raise SimulationError("; ".join(problems))
    if n < 2:
        raise SimulationError("n must be >= 2")
    rng = _streams(seed)
    width = len(str(n))
    ids = np.array([f"p{i + 1:0{width}d}" for i in range(n)], dtype=object)

    # baseline covariates, centred at their population means inside the predictors
    cov_names = tuple(name for name, _ in dgp.baseline_covariate_spec)
    cov_raw, cov_c = {}, {}
    for name, dist in dgp.baseline_covariate_spec:
        x, mu = _draw_covariate(dist, n, rng["covariates"])
        cov_raw[name] = x
        cov_c[name] = x - mu

    zcols = spec.z_columns
    z = {}
    for f in spec.stage1_factors:
        z[spec.z_column(f)] = _codes(rng["stage1"], f.prob_on, n)

    restricted = spec.restricted_factor
    rcol = spec.restricted_column
    resp = None
    stage2_day = None
    r_prob = np.zeros(n)
    if restricted is not None:
        s1 = {k: v.astype(float) for k, v in z.items()}
        days = spec.response_assessment
        if dgp.nonresponse_hazards is not None or len(days) > 1:
            if dgp.nonresponse_hazards is not None:
                hz = np.asarray(dgp.nonresponse_hazards, dtype=float)
                if len(hz) != len(days):
                    raise SimulationError("nonresponse_hazards must have one entry per assessment day")
                hz = np.broadcast_to(hz, (n, len(days)))
            else:
                # constant hazard calibrated so that P(responder) = response_prob
                r0 = _response_prob(dgp, s1, n)
                h = 1.0 - np.power(np.clip(r0, 0.0, 1.0), 1.0 / len(days))
                hz = np.repeat(h[:, None], len(days), axis=1)
            r_prob = np.prod(1.0 - hz, axis=1)
            fail = rng["response"].random((n, len(days))) < hz
            first = np.where(fail.any(axis=1), fail.argmax(axis=1), -1)
            resp = (first < 0).astype(np.int64)
            stage2_day = np.where(first >= 0, np.asarray(days)[np.maximum(first, 0)], -1)
        else:
            r_prob = _response_prob(dgp, s1, n)
            if np.any((r_prob < 0) | (r_prob >= 1)):
                raise SimulationError("response_prob evaluates outside [0, 1)")
            resp = (rng["response"].random(n) < r_prob).astype(np.int64)
            stage2_day = np.full(n, spec.stage2_day_K)
        z2 = _codes(rng["stage2"], restricted.prob_on, n)
        z[rcol] = np.where(resp == 0, z2, 0)
    if np.any(r_prob >= 1):
        raise SimulationError("response probability must be < 1")

    micro = spec.micro_factor
    Tn = spec.micro_horizon_T
    long = _empty_long()
    abar = np.full(n, np.nan)
    a_mat = None
    if micro is not None:
        a_mat = _codes(rng["micro"], micro.prob_on, (n, Tn))
        if a_override is not None:
            a_mat = np.asarray(a_override, dtype=np.int64).reshape(n, Tn)
        t_grid = np.arange(1, Tn + 1)
        if restricted is not None:
            k_i = np.where(stage2_day > 0, stage2_day, spec.stage2_day_K)
            c_mat = (t_grid[None, :] > k_i[:, None]).astype(np.int64)
        else:
            k_i = np.zeros(n, dtype=np.int64)
            c_mat = np.zeros((n, Tn), dtype=np.int64)
        if micro.is_restricted:
            keep = resp == 0
            assigned = c_mat.astype(bool) & keep[:, None]
        else:
            keep = np.ones(n, dtype=bool)
            assigned = np.ones((n, Tn), dtype=bool)
        a_eff = np.where(assigned, a_mat, 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cnt = assigned.sum(axis=1)
            abar = np.where(cnt > 0, a_eff.sum(axis=1) / np.maximum(cnt, 1), np.nan)

        eps = rng["proximal"].standard_normal((n, Tn))
        u = rng["proximal"].random((n, Tn))
        b = rng["subject"].standard_normal(n) * dgp.proximal_subject_sd
        y_prox = _proximal_outcome(spec, dgp, z, resp, r_prob, cov_c, a_eff, c_mat, k_i, t_grid, eps, u, b)

        rows = np.nonzero(keep)[0]
        nr = len(rows)
        long = pd.DataFrame({
            "id": np.repeat(ids[rows], Tn),
            "t": np.tile(t_grid, nr).astype(np.int64),
            "c_t": c_mat[rows].ravel(),
            "a_t": pd.array(np.where(assigned[rows], a_mat[rows], 0).ravel(), dtype="Int64"),
            "y_prox": y_prox[rows].ravel(),
        })
        long.loc[~assigned[rows].ravel(), "a_t"] = pd.NA

    # distal outcome
    center = dgp.abar_center
    if center == "auto":
        center = 2 * micro.prob_on - 1 if micro is not None else 0.0
    cols = {k: v.astype(float) for k, v in z.items()}
    cols.update(cov_c)
    cols["abar"] = np.where(np.isnan(abar), 0.0, abar - float(center))
    y_star = _split_predictor(dgp.theta_true, cols, n, rcol, resp, r_prob, dgp.response_shift,
                              dgp.effects_scale)
    y_star = y_star + rng["distal"].standard_normal(n) * dgp.distal_noise_sd

    wide = {"id": ids}
    for name in cov_names:
        wide[name] = cov_raw[name]
    for col in zcols:
        vals = pd.array(z[col], dtype="Int64")
        if col == rcol:
            vals[resp == 1] = pd.NA
        wide[col] = vals
    wide["r"] = pd.array(resp if resp is not None else [pd.NA] * n, dtype="Int64")
    if restricted is not None:
        sd = pd.array(stage2_day, dtype="Int64")
        sd[stage2_day < 0] = pd.NA
        wide["stage2_day"] = sd
    wide["y_star"] = y_star
    data = TrialDataset(pd.DataFrame(wide), long, cov_names, zcols)
    if warn_balance:
        balance = randomization_balance(data, spec)
        for _, row in balance[balance["flag"]].iterrows():
            log.warning("randomization balance: factor %s z=%.2f", row["factor"], row["z"])
    return data


def _split_predictor(coefs, cols, n, rcol, resp, r_prob, shift, scale):
    """Distal/identity predictor with the marginal construction for restricted designs."""
    if rcol is None or resp is None:
        return T.linear_predictor(coefs, cols, n)
    stage2 = [t for t in coefs if _involves(t, rcol)]
    base = [t for t in coefs if not _involves(t, rcol)]
    B = T.linear_predictor(coefs, cols, n, base)
    S = T.linear_predictor(coefs, cols, n, stage2)
    if scale == "conditional":
        nr = B + S
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            nr = B + (S - r_prob * shift) / (1.0 - r_prob)
    return np.where(resp == 1, B + shift, nr)


def _proximal_outcome(spec, dgp, z, resp, r_prob, cov_c, a_eff, c_mat, k_i, t_grid, eps, u, b):
    n, Tn = a_eff.shape
    m = n * Tn
    rcol = spec.restricted_column
    cols = {}
    for col, v in z.items():
        vv = np.repeat(v.astype(float)[:, None], Tn, axis=1)
        if col == rcol:
            # stage-2 code is 0 until assigned: no look-ahead
            vv = vv * c_mat
        cols[col] = vv.ravel()
    for name, v in cov_c.items():
        cols[name] = np.repeat(v, Tn)
    cols["a_t"] = a_eff.ravel().astype(float)
    cols["c_t"] = c_mat.ravel().astype(float)
    tt = np.tile(t_grid, n).astype(float)
    cols["t"] = tt
    cols["tstar"] = c_mat.ravel() * (tt - np.repeat(k_i, Tn))
    coefs = dgp.gamma_beta_true
    resp_r = None if resp is None else np.repeat(resp, Tn)
    r_r = np.repeat(r_prob, Tn)
    if dgp.proximal_link == "identity":
        mu = _split_predictor(coefs, cols, m, rcol, resp_r, r_r, dgp.proximal_response_shift,
                              dgp.effects_scale)
        y = mu + np.repeat(b, Tn) + eps.ravel() * dgp.proximal_noise_sd
        return y.reshape(n, Tn)

    if rcol is None or resp_r is None:
        p = np.exp(T.linear_predictor(coefs, cols, m))
    else:
        base = [t for t in coefs if not _involves(t, rcol)]
        B = T.linear_predictor(coefs, cols, m, base)
        full = T.linear_predictor(coefs, cols, m)
        if dgp.effects_scale == "conditional":
            nr = np.exp(full)
        else:
            nr = (np.exp(full) - r_r * np.exp(B)) / (1.0 - r_r)
        p = np.where(resp_r == 1, np.exp(B), nr)
    # only rows that appear in the long table need valid probabilities
    if spec.micro_factor.is_restricted:
        live = np.repeat(resp == 0, Tn)
    else:
        live = np.ones(m, dtype=bool)
    bad = live & ~((p > 0) & (p < 1))
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise SimulationError(
            f"log-link linear predictor implies probability {p[i]:.4g} outside (0, 1) "
            f"(participant {i // Tn + 1}, t={i % Tn + 1}); {int(bad.sum())} rows affected"
        )
    return (u.ravel() < p).astype(float).reshape(n, Tn)


def _empty_long() -> pd.DataFrame:
    return pd.DataFrame({
        "id": pd.Series([], dtype=object),
        "t": pd.Series([], dtype=np.int64),
        "c_t": pd.Series([], dtype=np.int64),
        "a_t": pd.array([], dtype="Int64"),
        "y_prox": pd.Series([], dtype=float),
    })


def randomization_balance(data: TrialDataset, spec: DesignSpec) -> pd.DataFrame:
    """Observed +1 frequency per factor against its design probability.

    ``flag`` marks |z| > 3; the documented tolerance is 4 binomial SDs.
    """
    rows = []
    for f, col in zip(spec.coded_factors, spec.z_columns):
        x = data.wide[col].dropna().to_numpy(dtype=float)
        rows.append(_balance_row(f.name, x, f.prob_on))
    if spec.micro_factor is not None and len(data.long):
        x = data.long["a_t"].dropna().to_numpy(dtype=float)
        rows.append(_balance_row(spec.micro_factor.name, x, spec.micro_factor.prob_on))
    out = pd.DataFrame(rows, columns=["factor", "n", "observed", "expected", "z", "flag"])
    return out


def _balance_row(name, x, p):
    k = len(x)
    if k == 0:
        return (name, 0, float("nan"), p, 0.0, False)
    obs = float(np.mean(x == 1))
    z = (obs - p) / math.sqrt(p * (1 - p) / k)
    return (name, k, obs, p, z, abs(z) > 3)


def illustrative_dgp(**overrides) -> DGPSpec:
    """Defaults shaped after the weight-loss study.

    Non-response hazards reproduce 96 / 45 / 28 of 366 classified at weeks
    2, 4, 8.  Distal coefficients are the published non-responder estimates;
    proximal coefficients are small log-risk effects around a 50% base rate.
    """
    params = dict(
        theta_true={
            "1": 3.76, "sex": 0.88, "bmi": -0.23,
            "z1": 1.88, "z2": 0.25, "z1:z2": 0.12,
            "abar": 7.12, "z1:abar": 6.03, "z2:abar": -11.57, "z1:z2:abar": -14.85,
        },
        gamma_beta_true={
            "1": math.log(0.5), "z1": 0.04, "c:z2": 0.0,
            "c:a": 0.01, "c:z1:a": -0.01, "c:z2:a": 0.01, "c:z1:z2:a": 0.01,
        },
        nonresponse_hazards=(96 / 366, 45 / 270, 28 / 225),
        distal_noise_sd=4.0,
        proximal_link="log",
        baseline_covariate_spec=(("bmi", "normal(34, 5)"), ("sex", "pm1(0.762)")),
        effects_scale="conditional",
        abar_center="auto",
    )
    params.update(overrides)
    return DGPSpec(**params)


def simulate_illustrative(dgp: DGPSpec, n: int, seed) -> TrialDataset:
    return simulate_trial(illustrative_design(), dgp, n, seed)
