"""Named effects computed from fitted coefficients.

Every entry is a Wald test of a stored contrast vector, so anything in a
report can be recomputed from the fit alone.  Effect-coded main effects and
interactions are reported as twice the coefficient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd

from . import terms as T
from .errors import EstimandError
from .estimator import LOG, ModelFit, wald

MARGINAL_NOTE = "marginal over response status"
CONDITIONAL_NOTE = "conditional on non-response"
RISK_RATIO = "risk-ratio"


@dataclass(frozen=True)
class ReportEntry:
    question_id: str
    effect_name: str
    estimate: float
    se: float
    z: float
    p: float
    ci95: tuple[float, float]
    scale_note: str = ""
    contrast: tuple[float, ...] = ()
    exp_estimate: float | None = None
    exp_ci95: tuple[float, float] | None = None

    def as_row(self) -> dict:
        row = {
            "question_id": self.question_id, "effect": self.effect_name, "estimate": self.estimate,
            "se": self.se, "z": self.z, "p": self.p, "ci_low": self.ci95[0], "ci_high": self.ci95[1],
            "scale_note": self.scale_note,
        }
        if self.exp_estimate is not None:
            row["exp_estimate"] = self.exp_estimate
            row["exp_ci_low"], row["exp_ci_high"] = self.exp_ci95
        return row


@dataclass
class EstimandReport:
    entries: list = field(default_factory=list)
    r_hat: float | None = None

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, qid: str) -> ReportEntry:
        for e in self.entries:
            if e.question_id == qid:
                return e
        raise KeyError(qid)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.as_row() for e in self.entries])


def _resolve(fit: ModelFit, term: str) -> int:
    for cand in (term, "c:" + term):
        try:
            return fit.index(cand)
        except KeyError:
            continue
    raise EstimandError(f"term {term!r} is not in the fit (terms: {', '.join(fit.labels)})")


def entry_from_contrast(fit: ModelFit, contrast, question_id: str, effect_name: str,
                        scale_note: str = "") -> ReportEntry:
    c = np.asarray(contrast, dtype=float)
    w = wald(fit, c)
    exp_est = exp_ci = None
    if fit.link == LOG:
        exp_est = math.exp(w.estimate)
        exp_ci = (math.exp(w.ci95[0]), math.exp(w.ci95[1]))
        scale_note = (scale_note + "; " if scale_note else "") + RISK_RATIO
    return ReportEntry(question_id, effect_name, w.estimate, w.se, w.z, w.p, w.ci95, scale_note,
                       tuple(float(x) for x in c), exp_est, exp_ci)


def _unit(fit: ModelFit, term: str, scale: float) -> np.ndarray:
    c = np.zeros(len(fit.labels))
    c[_resolve(fit, term)] = scale
    return c


def main_effect(fit: ModelFit, factor: str, question_id: str = "", scale_note: str = "") -> ReportEntry:
    if len(T.parts(factor)) != 1:
        raise EstimandError(f"{factor!r} is a product term; use interaction_effect")
    return entry_from_contrast(fit, _unit(fit, factor, 2.0), question_id or f"main:{factor}",
                               f"main effect of {factor}", scale_note)


def interaction_effect(fit: ModelFit, factors, question_id: str = "", scale_note: str = "") -> ReportEntry:
    term = factors if isinstance(factors, str) else ":".join(factors)
    if len(T.parts(term)) < 2:
        raise EstimandError("an interaction needs at least two factors")
    return entry_from_contrast(fit, _unit(fit, term, 2.0), question_id or f"interaction:{term}",
                               f"interaction {term.replace(':', ' x ')}", scale_note)


def conditional_from_marginal(entry: ReportEntry, r_hat: float) -> ReportEntry:
    """Rescale a stage-2 effect averaged over response status to the
    non-responder scale.  z and p are untouched."""
    if not (0.0 <= r_hat < 1.0) or not math.isfinite(r_hat):
        raise EstimandError(f"r_hat must lie in [0, 1), got {r_hat}")
    q = 1.0 - r_hat
    exp_est = exp_ci = None
    if entry.exp_estimate is not None:
        exp_est = math.exp(entry.estimate / q)
        exp_ci = (math.exp(entry.ci95[0] / q), math.exp(entry.ci95[1] / q))
    return replace(
        entry, question_id=entry.question_id + "-conditional", estimate=entry.estimate / q,
        se=entry.se / q, ci95=(entry.ci95[0] / q, entry.ci95[1] / q),
        scale_note=CONDITIONAL_NOTE + (f" (r={r_hat:.4g})"),
        contrast=tuple(x / q for x in entry.contrast), exp_estimate=exp_est, exp_ci95=exp_ci,
    )


def _z_names(fit: ModelFit) -> list[str]:
    names = sorted({p for lab in fit.labels for p in T.parts(lab)
                    if p.startswith("z") and p[1:].isdigit()}, key=lambda s: int(s[1:]))
    return names


def ai_contrast(fit: ModelFit, z, z_prime, question_id: str = "AI-contrast") -> ReportEntry:
    """Difference in mean distal outcome between two embedded AIs."""
    if fit.preset not in (None, "model1", "model4"):
        raise EstimandError(f"AI contrasts are defined for model1/model4 fits, not {fit.preset!r}")
    names = _z_names(fit)
    z, z_prime = tuple(int(v) for v in z), tuple(int(v) for v in z_prime)
    for vec in (z, z_prime):
        if len(vec) != len(names) or any(v not in (1, -1) for v in vec):
            raise EstimandError(f"level vector {vec} must have {len(names)} entries in {{+1, -1}}")
    a, b = dict(zip(names, z)), dict(zip(names, z_prime))
    c = np.zeros(len(fit.labels))
    for j, lab in enumerate(fit.labels):
        ps = T.parts(lab)
        if ps and all(p in a for p in ps):
            c[j] = math.prod(a[p] for p in ps) - math.prod(b[p] for p in ps)
    name = f"AI {z} vs {z_prime}"
    return entry_from_contrast(fit, c, question_id, name, "averaged over the time-varying factor"
                               if fit.preset == "model4" else "")


def _interaction_with_abar(fit: ModelFit, factor: str) -> str:
    term = "abar" if factor in ("", "1") else f"{factor}:abar"
    try:
        fit.index(term)
    except KeyError:
        raise EstimandError(f"fit has no {term!r} term; rate moderation needs an abar model") from None
    return term


def moderated_effect_at_rate(fit: ModelFit, factor: str, a_bar: float, a_bar_prime: float,
                             question_id: str = "") -> ReportEntry:
    """theta_{factor:abar} * (a_bar - a_bar'), i.e. the halved difference of
    the two conditional effects."""
    term = _interaction_with_abar(fit, factor)
    c = _unit(fit, term, float(a_bar) - float(a_bar_prime))
    return entry_from_contrast(fit, c, question_id or f"moderation:{factor}",
                               f"{factor} x rate ({a_bar:g} vs {a_bar_prime:g})")


def conditional_effect_at_rate(fit: ModelFit, factor: str, a_bar: float, question_id: str = "") -> ReportEntry:
    """2 (theta_factor + (a_bar - centre) theta_{factor:abar})."""
    term = _interaction_with_abar(fit, factor)
    centre = float(fit.centering.get("abar", 0.0))
    c = _unit(fit, factor, 2.0)
    c[fit.index(term)] = 2.0 * (float(a_bar) - centre)
    return entry_from_contrast(fit, c, question_id or f"conditional:{factor}@{a_bar:g}",
                               f"effect of {factor} at rate {a_bar:g}")


# question letter -> (term, kind); kind "x2" doubles, "rate" uses a_bar - a_bar'
_TABLES = {
    "model1": ("Table2", [("A", "z1", "x2"), ("B", "z2", "x2"), ("C", "z3", "stage2"),
                          ("D", "z1:z2", "x2"), ("E", "z1:z3", "stage2"), ("F", "z2:z3", "stage2"),
                          ("G", "z1:z2:z3", "stage2")]),
    "model2": ("Table3", [("A", "z1", "x2"), ("B", "z2", "x2"), ("C", "z1:z2", "x2"),
                          ("D", "z1:abar", "rate"), ("E", "z2:abar", "rate"), ("F", "z1:z2:abar", "rate")]),
    "model3": ("Table4", [("A", "a", "x2"), ("B", "z1:a", "x2"), ("C", "z2:a", "x2"), ("D", "z1:z2:a", "x2")]),
    "model4": ("Table6", [("A", "z1", "x2"), ("B", "z2", "stage2"), ("C", "z1:z2", "stage2")]),
    "model5": ("Table7", [("A", "a", "x2"), ("B", "z1:a", "x2"), ("C", "c:z2:a", "stage2"),
                          ("D", "c:z1:z2:a", "stage2")]),
    "model5-timevarying": ("Table7", [("A", "a:t", "x2"), ("B", "z1:a:t", "x2"),
                                      ("C", "z2:a:tstar", "stage2"), ("D", "z1:z2:a:tstar", "stage2")]),
    # rows only exist for non-responders here, so nothing is averaged over response
    "illustrative-proximal": ("Table7", [("A", "c:a", "x2"), ("B", "c:z1:a", "x2"),
                                         ("C", "c:z2:a", "x2"), ("D", "c:z1:z2:a", "x2")]),
}

QUESTION_IDS = tuple(f"{_TABLES[m][0]}-{q}" for m in ("model1", "model2", "model3", "model4", "model5")
                     for q, _, _ in _TABLES[m][1])


def render_table(fit: ModelFit, preset: str | None = None, a_bar: float = 0.4,
                 a_bar_prime: float = 0.1, r_hat: float | None = None) -> EstimandReport:
    preset = preset or fit.preset
    if preset not in _TABLES:
        raise EstimandError(f"preset {preset!r} has no table mapping")
    table, rows = _TABLES[preset]
    slope = "per unit time" if preset == "model5-timevarying" else ""
    entries = []
    for q, term, kind in rows:
        if kind == "rate":
            c = _unit(fit, term, a_bar - a_bar_prime)
            name = f"{term.replace(':abar', '')} x rate ({a_bar:g} vs {a_bar_prime:g})"
            note = ""
        else:
            c = _unit(fit, term, 2.0)
            name = f"2 x {term}"
            note = MARGINAL_NOTE if kind == "stage2" else ""
        if slope:
            note = f"{note}; {slope}" if note else slope
        entries.append(entry_from_contrast(fit, c, f"{table}-{q}", name, note))
    r = fit.r_hat if r_hat is None else r_hat
    return EstimandReport(entries, r)


def question(fit: ModelFit, question_id: str, a_bar: float = 0.4, a_bar_prime: float = 0.1,
             r_hat: float | None = None) -> ReportEntry:
    return render_table(fit, None, a_bar, a_bar_prime, r_hat)[question_id]


def figure4_surface(fit: ModelFit, a_bar_grid: Sequence[float]) -> pd.DataFrame:
    """Predicted distal outcome for each (z1, z2, a_bar) with covariates at
    their centring point; a_bar is on the raw (uncentred) scale."""
    if fit.preset not in (None, "illustrative-distal-nonresp"):
        raise EstimandError("figure4_surface needs an illustrative-distal-nonresp fit")
    grid = [float(a) for a in a_bar_grid]
    if not grid:
        raise EstimandError("a_bar grid is empty")
    centre = float(fit.centering.get("abar", 0.0))
    rows = []
    for z1 in (1, -1):
        for z2 in (1, -1):
            for a in grid:
                vals = {"z1": z1, "z2": z2, "abar": a - centre}
                c = np.zeros(len(fit.labels))
                for j, lab in enumerate(fit.labels):
                    ps = T.parts(lab)
                    if all(p in vals for p in ps):
                        c[j] = math.prod(vals[p] for p in ps)
                w = wald(fit, c)
                rows.append({"z1": z1, "z2": z2, "a_bar": a, "predicted": w.estimate, "se": w.se})
    return pd.DataFrame(rows)


def surface_slopes(fit: ModelFit) -> dict[tuple[int, int], float]:
    """Slope of the predicted outcome in a_bar for each (z1, z2) line."""
    out = {}
    for z1 in (1, -1):
        for z2 in (1, -1):
            vals = {"z1": z1, "z2": z2}
            s = 0.0
            for j, lab in enumerate(fit.labels):
                ps = T.parts(lab)
                if "abar" in ps and all(p == "abar" or p in vals for p in ps):
                    s += fit.coefficients[j] * math.prod(vals.get(p, 1) for p in ps if p != "abar")
            out[(z1, z2)] = float(s)
    return out
