"""Weighted GLMs with working-independence estimating equations and
cluster-robust sandwich covariance.

Identity link: closed-form weighted least squares.  Log link: Newton
iteration on ``sum_i X_i' W_i (Y_i - exp(X_i theta)) = 0``.  In both cases
the covariance is ``B^-1 M B^-1`` with bread ``B = X' W D X`` and meat
summed over clusters, so replicated rows that share a participant are
counted as one independent unit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from . import terms as T
from .design import DesignSpec
from .errors import (ConvergenceError, EstimationError, ModelSpecError, RankDeficientError,
                     SeparationError)
from .restructure import WRDataset, weight_and_replicate_distal, weight_and_replicate_proximal
from .simulate import TrialDataset

Z975 = float(stats.norm.ppf(0.975))
MAX_ITER = 100
SCORE_TOL = 1e-8
STEP_TOL = 1e-10
RANK_TOL = 1e-10
SEPARATION_RATIO = 1e-8
SMALL_CLUSTERS = 50

IDENTITY = "identity"
LOG = "log"

_PRESETS = {
    "model1": dict(scope="distal", outcome="y_star", wr=True,
                   terms=("1", "z1", "z2", "z1:z2", "z3", "z1:z3", "z2:z3", "z1:z2:z3")),
    "model2": dict(scope="distal", outcome="y_star", wr=False,
                   terms=("1", "z1", "z2", "z1:z2", "abar", "z1:abar", "z2:abar", "z1:z2:abar")),
    "model3": dict(scope="proximal", outcome="y_prox", wr=False,
                   terms=("1", "z1", "z2", "z1:z2", "a", "z1:a", "z2:a", "z1:z2:a")),
    "model4": dict(scope="distal", outcome="y_star", wr=True,
                   terms=("1", "z1", "z2", "z1:z2")),
    "model5": dict(scope="proximal", outcome="y_prox", wr=True,
                   terms=("1", "z1", "c:z2", "c:z1:z2", "a", "z1:a", "c:z2:a", "c:z1:z2:a")),
    "model5-timevarying": dict(scope="proximal", outcome="y_prox", wr=True,
                               terms=("1", "z1:t", "z2:tstar", "z1:z2:tstar",
                                      "a:t", "z1:a:t", "z2:a:tstar", "z1:z2:a:tstar")),
    "illustrative-proximal": dict(scope="proximal", outcome="y_prox", wr=True, link=LOG,
                                  controls=("week_classified",), time_controls=("tstar",),
                                  terms=("1", "z1", "c:z2", "c:z1:z2",
                                         "c:a", "c:z1:a", "c:z2:a", "c:z1:z2:a")),
    "illustrative-distal-nonresp": dict(scope="distal", outcome="y_star", wr=False,
                                        subset="nonresponders", center_abar=True,
                                        terms=("1", "z1", "z2", "z1:z2", "abar", "z1:abar",
                                               "z2:abar", "z1:z2:abar")),
}

PRESETS = tuple(_PRESETS)
# the restricted stage-2 code in each proximal preset; its terms must be gated
_GATED = {"model5": "z2", "model5-timevarying": "z2", "illustrative-proximal": "z2"}
_GATES = ("c", "c_t", "tstar")


@dataclass(frozen=True)
class ModelSpec:
    outcome: str
    terms: tuple[str, ...]
    link: str = IDENTITY
    weight_column: str = "weight"
    cluster_column: str = "cluster_id"
    preset: str | None = None
    scope: str = "distal"
    # person-level columns centred to sample mean zero before entry
    covariates: tuple[str, ...] = ()
    center_abar: bool = False
    # subtract this from a_t, e.g. 2 p_on - 1; None leaves codes as +/-1
    micro_center: float | None = None
    subset: str | None = None
    gated_code: str | None = None

    def validate(self) -> None:
        if self.link not in (IDENTITY, LOG):
            raise ModelSpecError(f"unknown link {self.link!r}")
        if len(set(self.terms)) != len(self.terms):
            raise ModelSpecError("duplicate terms")
        if self.scope == "proximal" and self.gated_code:
            for term in self.terms:
                ps = T.parts(term)
                if self.gated_code in ps and not any(g in ps for g in _GATES):
                    raise ModelSpecError(f"term {term!r} uses the stage-2 code without the C_t gate")


def preset_model(name: str, covariates: Sequence[str] = (), link: str | None = None,
                 micro_center: float | None = None) -> ModelSpec:
    if name not in _PRESETS:
        raise ModelSpecError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    p = _PRESETS[name]
    covs = tuple(covariates) + tuple(p.get("controls", ()))
    base = list(p["terms"])
    # intercept, controls, then effects (covariate block follows the intercept)
    terms = tuple(base[:1] + list(covs) + list(p.get("time_controls", ())) + base[1:])
    spec = ModelSpec(
        outcome=p["outcome"], terms=terms, link=link or p.get("link", IDENTITY), preset=name,
        scope=p["scope"], covariates=covs, center_abar=p.get("center_abar", False),
        micro_center=micro_center, subset=p.get("subset"), gated_code=_GATED.get(name),
    )
    spec.validate()
    return spec


def preset_needs_wr(name: str) -> bool:
    return bool(_PRESETS[name]["wr"])


def preset_scope(name: str) -> str:
    return _PRESETS[name]["scope"]


@dataclass
class ModelFit:
    coefficients: np.ndarray
    robust_cov: np.ndarray
    labels: tuple[str, ...]
    n_clusters: int
    n_rows: int
    converged: bool
    iterations: int
    link: str = IDENTITY
    preset: str | None = None
    outcome: str = ""
    centering: dict = field(default_factory=dict)
    r_hat: float | None = None
    notes: list = field(default_factory=list)

    @property
    def small_sample(self) -> bool:
        return self.n_clusters < SMALL_CLUSTERS

    def index(self, label: str) -> int:
        for i, lab in enumerate(self.labels):
            if lab == label:
                return i
        for i, lab in enumerate(self.labels):
            if T.same_term(lab, label):
                return i
        raise KeyError(label)

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.index(label)])

    def se(self, label: str) -> float:
        i = self.index(label)
        return math.sqrt(max(self.robust_cov[i, i], 0.0))

    def to_dict(self) -> dict:
        return {
            "coefficients": [float(x) for x in self.coefficients],
            "robust_cov": [[float(x) for x in row] for row in self.robust_cov],
            "labels": list(self.labels),
            "n_clusters": self.n_clusters,
            "n_rows": self.n_rows,
            "converged": self.converged,
            "iterations": self.iterations,
            "link": self.link,
            "preset": self.preset,
            "outcome": self.outcome,
            "centering": {k: float(v) for k, v in self.centering.items()},
            "r_hat": self.r_hat,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelFit":
        return cls(
            coefficients=np.asarray(d["coefficients"], dtype=float),
            robust_cov=np.asarray(d["robust_cov"], dtype=float),
            labels=tuple(d["labels"]), n_clusters=int(d["n_clusters"]), n_rows=int(d["n_rows"]),
            converged=bool(d["converged"]), iterations=int(d["iterations"]), link=d["link"],
            preset=d.get("preset"), outcome=d.get("outcome", ""), centering=dict(d.get("centering", {})),
            r_hat=d.get("r_hat"), notes=list(d.get("notes", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelFit":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class WaldResult:
    estimate: float
    se: float
    z: float
    p: float
    ci95: tuple[float, float]
    degenerate: bool = False


# ---------------------------------------------------------------------------
# analysis frames and design matrices


def _abar_by_id(long: pd.DataFrame) -> pd.Series:
    a = long[["id", "a_t"]].dropna()
    return a.groupby("id", sort=False)["a_t"].mean().astype(float).rename("abar")


def model_frame(model: ModelSpec, data) -> tuple[pd.DataFrame, dict]:
    """Rows entering the fit, with derived columns and centring applied.

    Returns the frame and the centring constants used.
    """
    long = None
    if isinstance(data, WRDataset):
        frame = data.rows.copy()
    elif isinstance(data, TrialDataset):
        long = data.long
        if model.scope == "distal":
            frame = data.wide.copy()
        else:
            if long is None or not len(long):
                raise ModelSpecError(f"preset {model.preset!r} needs a long person-period table")
            frame = long.merge(data.wide.drop(columns=["y_star"], errors="ignore"), on="id",
                               how="left", validate="many_to_one", sort=False)
    elif isinstance(data, pd.DataFrame):
        frame = data.copy()
    else:
        raise ModelSpecError(f"cannot build a model frame from {type(data).__name__}")

    if model.subset == "nonresponders":
        if "r" not in frame:
            raise ModelSpecError("non-responder subset needs the r column")
        frame = frame[frame["r"] == 0].reset_index(drop=True)

    needed = {p for term in model.terms for p in T.parts(term)}
    if "abar" in needed and "abar" not in frame:
        if long is None:
            raise ModelSpecError("abar is required: pass a TrialDataset with a long table "
                                 "or precompute an 'abar' column")
        frame = frame.merge(_abar_by_id(long), left_on="id", right_index=True, how="left")
        if frame["abar"].isna().any():
            raise ModelSpecError("abar undefined for participants without micro-randomizations")
    if "tstar" in needed and "tstar" not in frame:
        if "c_t" not in frame or "t" not in frame:
            raise ModelSpecError("tstar needs t and c_t columns")
        k = frame["stage2_day"].astype("Float64").fillna(0).to_numpy(dtype=float) \
            if "stage2_day" in frame else np.zeros(len(frame))
        frame["tstar"] = frame["c_t"].to_numpy(dtype=float) * (frame["t"].to_numpy(dtype=float) - k)
    if "week_classified" in needed and "week_classified" not in frame:
        k = frame["stage2_day"].astype("Float64").fillna(0).to_numpy(dtype=float)
        nr = frame["r"].to_numpy(dtype=float) == 0
        frame["week_classified"] = np.where(nr, k / 7.0, 0.0)

    if model.weight_column not in frame:
        frame[model.weight_column] = 1.0
    if model.cluster_column not in frame:
        frame[model.cluster_column] = frame["id"].to_numpy()

    centering = {}
    person = frame.drop_duplicates(model.cluster_column) if model.cluster_column in frame else frame
    for cov in model.covariates:
        if cov not in frame:
            raise ModelSpecError(f"unknown column {cov!r}")
        mu = float(person[cov].astype(float).mean())
        frame[cov] = frame[cov].astype(float) - mu
        centering[cov] = mu
    if model.center_abar and "abar" in frame:
        mu = float(person["abar"].astype(float).mean()) if "abar" in person else float(frame["abar"].mean())
        frame["abar"] = frame["abar"].astype(float) - mu
        centering["abar"] = mu
    if model.micro_center is not None and "a_t" in frame:
        frame["a_t"] = frame["a_t"].astype("Float64") - model.micro_center
        centering["a_t"] = float(model.micro_center)
    return frame, centering


def build_design_matrix(model: ModelSpec, data) -> tuple[np.ndarray, list[str]]:
    """Columns in term order; products computed elementwise.

    Unassigned codes (empty cells) enter as 0 and are only allowed on rows
    where another factor of the same term is exactly 0, i.e. the term is gated
    off there.
    """
    model.validate()
    frame = data if isinstance(data, pd.DataFrame) else model_frame(model, data)[0]
    n = len(frame)
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    X = np.empty((n, len(model.terms)))
    for j, term in enumerate(model.terms):
        val = np.ones(n)
        miss = np.zeros(n, dtype=bool)
        gated = np.zeros(n, dtype=bool)
        for p in T.parts(term):
            key = p if p in frame.columns else T.ALIASES.get(p, p)
            if key not in frame.columns:
                raise ModelSpecError(f"unknown column {p!r} in term {term!r}")
            if key not in cache:
                arr = pd.to_numeric(frame[key], errors="coerce").astype("Float64")
                cache[key] = (arr.fillna(0.0).to_numpy(dtype=float), arr.isna().to_numpy())
            v, m = cache[key]
            val = val * v
            miss |= m
            gated |= ~m & (v == 0)
        bad = miss & ~gated
        if bad.any():
            raise ModelSpecError(f"term {term!r} uses unassigned codes on {int(bad.sum())} rows without a gate")
        X[:, j] = val
    return X, list(model.terms)


# ---------------------------------------------------------------------------
# fitting


def _rank_check(A: np.ndarray, labels: Sequence[str]) -> None:
    if A.shape[0] < A.shape[1]:
        raise RankDeficientError(labels)
    _, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if not len(d):
        return
    tol = RANK_TOL * d[0]
    bad = [labels[piv[k]] for k in range(len(d)) if d[k] <= tol]
    if bad:
        raise RankDeficientError(bad)


def _bread_factor(X: np.ndarray, wd: np.ndarray) -> np.ndarray:
    """Upper-triangular R with R'R = X' diag(wd) X."""
    R = np.linalg.qr(X * np.sqrt(wd)[:, None], mode="r")
    if np.any(np.abs(np.diag(R)) <= RANK_TOL * np.max(np.abs(np.diag(R)))):
        raise EstimationError("singular bread matrix")
    return R


def _bread_inverse(R: np.ndarray) -> np.ndarray:
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]), lower=False)
    return Rinv @ Rinv.T


def cluster_scores(X: np.ndarray, w: np.ndarray, resid: np.ndarray, clusters) -> np.ndarray:
    codes, _ = pd.factorize(np.asarray(clusters), sort=False)
    g = int(codes.max()) + 1 if len(codes) else 0
    u = X * (w * resid)[:, None]
    return np.column_stack([np.bincount(codes, weights=u[:, j], minlength=g) for j in range(X.shape[1])])


def sandwich_covariance(X: np.ndarray, w: np.ndarray, resid: np.ndarray, d: np.ndarray,
                        clusters) -> np.ndarray:
    """``B^-1 M B^-1`` with ``B = X' diag(w d) X`` and cluster-summed meat."""
    R = _bread_factor(X, w * d)
    Binv = _bread_inverse(R)
    U = cluster_scores(X, w, resid, clusters)
    meat = U.T @ U
    cov = Binv @ meat @ Binv
    return 0.5 * (cov + cov.T)


def _fit_arrays(X, y, w, clusters, link, labels, intercept_index):
    if np.any(~np.isfinite(X)) or np.any(~np.isfinite(y)):
        raise EstimationError("non-finite values in design matrix or outcome")
    if np.any(~(w > 0)):
        raise EstimationError("weights must be > 0")
    sw = np.sqrt(w)
    _rank_check(X * sw[:, None], labels)
    notes = []
    if link == IDENTITY:
        theta, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        mu = X @ theta
        d = np.ones_like(y)
        converged, iterations = True, 1
    else:
        if np.any(y < 0):
            raise EstimationError("log link needs a non-negative outcome")
        theta = np.zeros(X.shape[1])
        ybar = float(np.sum(w * y) / np.sum(w))
        if ybar <= 0:
            raise SeparationError("outcome is identically zero; log-link fit is separated")
        if intercept_index is not None:
            theta[intercept_index] = math.log(ybar)
        converged, iterations = False, 0
        for it in range(1, MAX_ITER + 1):
            eta = X @ theta
            if not np.all(np.isfinite(eta)) or np.max(np.abs(eta)) > 50:
                raise SeparationError("linear predictor diverged; complete separation is likely")
            mu = np.exp(eta)
            score = X.T @ (w * (y - mu))
            if np.max(np.abs(score)) < SCORE_TOL:
                converged, iterations = True, it - 1
                break
            R = np.linalg.qr(X * np.sqrt(w * mu)[:, None], mode="r")
            step = linalg.solve_triangular(R, linalg.solve_triangular(R, score, trans="T"))
            theta = theta + step
            iterations = it
            if np.max(np.abs(step)) < STEP_TOL:
                converged = True
                break
        if not converged:
            raise ConvergenceError(f"log-link Newton iteration did not converge in {MAX_ITER} iterations")
        mu = np.exp(X @ theta)
        # the score vanishes as fitted means of all-zero groups go to 0, so a
        # separated fit can look converged; catch collapsed means instead
        if np.any(mu < SEPARATION_RATIO * ybar):
            raise SeparationError("fitted means collapse to zero; complete separation is likely")
        d = mu
        if np.all((y == 0) | (y == 1)) and np.any(mu >= 1):
            notes.append(f"{int(np.sum(mu >= 1))} fitted probabilities >= 1")
    cov = sandwich_covariance(X, w, y - mu, d, clusters)
    return theta, cov, converged, iterations, notes


def fit_weighted_glm(model: ModelSpec, data) -> ModelFit:
    model.validate()
    frame, centering = model_frame(model, data)
    X, labels = build_design_matrix(model, frame)
    if model.outcome not in frame:
        raise ModelSpecError(f"unknown outcome column {model.outcome!r}")
    y = pd.to_numeric(frame[model.outcome]).to_numpy(dtype=float)
    w = pd.to_numeric(frame[model.weight_column]).to_numpy(dtype=float)
    clusters = frame[model.cluster_column].to_numpy()
    icpt = labels.index(T.INTERCEPT) if T.INTERCEPT in labels else None
    theta, cov, converged, iterations, notes = _fit_arrays(X, y, w, clusters, model.link, labels, icpt)
    n_clusters = int(pd.Series(clusters).nunique())
    if n_clusters < SMALL_CLUSTERS:
        notes.append(f"only {n_clusters} clusters; sandwich SEs may be anti-conservative")
    r_hat = None
    if "r" in frame and frame["r"].notna().all() and model.subset is None:
        person = frame.drop_duplicates(model.cluster_column)
        r_hat = float(person["r"].astype(float).mean())
    return ModelFit(theta, cov, tuple(labels), n_clusters, len(frame), converged, iterations,
                    model.link, model.preset, model.outcome, centering, r_hat, notes)


def fit_preset(preset: str, data: TrialDataset, spec: DesignSpec, link: str | None = None,
               covariates: Sequence[str] | None = None, micro_center: float | None = None) -> ModelFit:
    """Restructure as the preset requires, then fit."""
    covs = data.covariates if covariates is None else tuple(covariates)
    model = preset_model(preset, covs, link, micro_center)
    needs_wr = preset_needs_wr(preset)
    if needs_wr and not spec.is_restricted:
        raise ModelSpecError(f"preset {preset!r} needs a response-restricted design")
    if preset in ("model2", "model3") and spec.kind != "factorial-mrt":
        raise ModelSpecError(f"preset {preset!r} is defined for factorial-MRT data")
    if preset in ("model4", "model5", "model5-timevarying") and spec.kind != "smart-mrt":
        raise ModelSpecError(f"preset {preset!r} is defined for SMART-MRT data")
    if preset == "model1" and spec.kind != "factorial-smart":
        raise ModelSpecError("preset 'model1' is defined for factorial-SMART data")
    if model.scope == "distal":
        source = weight_and_replicate_distal(data, spec) if needs_wr else data
        if needs_wr and "abar" in {p for t in model.terms for p in T.parts(t)}:
            raise ModelSpecError("abar terms are not supported on replicated distal data")
    else:
        source = weight_and_replicate_proximal(data, spec)
    fit = fit_weighted_glm(model, source)
    if spec.is_restricted:
        # the analysed rows may exclude responders, so take the rate from the wide table
        fit.r_hat = float(data.wide["r"].astype(float).mean())
    return fit


def wald(fit: ModelFit, contrast) -> WaldResult:
    c = np.asarray(contrast, dtype=float)
    if c.shape != fit.coefficients.shape:
        raise EstimationError(f"contrast has length {c.size}, fit has {fit.coefficients.size} coefficients")
    est = float(c @ fit.coefficients)
    var = float(c @ fit.robust_cov @ c)
    se = math.sqrt(max(var, 0.0))
    if se == 0.0:
        return WaldResult(est, 0.0, float("nan"), float("nan"), (est, est), degenerate=True)
    z = est / se
    p = float(2.0 * stats.norm.sf(abs(z)))
    return WaldResult(est, se, z, p, (est - Z975 * se, est + Z975 * se))


def coefficient_table(fit: ModelFit) -> pd.DataFrame:
    rows = []
    for i, lab in enumerate(fit.labels):
        e = np.zeros(len(fit.labels))
        e[i] = 1.0
        r = wald(fit, e)
        rows.append({"term": lab, "estimate": r.estimate, "se": r.se, "z": r.z, "p": r.p,
                     "ci_low": r.ci95[0], "ci_high": r.ci95[1]})
    out = pd.DataFrame(rows)
    if fit.link == LOG:
        out["exp_estimate"] = np.exp(out["estimate"])
    return out


__all__ = [
    "ModelSpec", "ModelFit", "WaldResult", "PRESETS", "preset_model", "model_frame",
    "build_design_matrix", "fit_weighted_glm", "fit_preset", "sandwich_covariance", "wald",
    "coefficient_table",
]
