"""Product terms over named columns.

A term is written as colon-joined factor names, e.g. ``"z1:z2:a"``; the
literal ``"1"`` is the intercept.  The same vocabulary drives both the
simulator's linear predictors and the analysis design matrices.
"""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

INTERCEPT = "1"

# short names -> column names in analysis frames
ALIASES = {"a": "a_t", "c": "c_t"}


def parts(term: str) -> tuple[str, ...]:
    term = term.strip()
    if term == INTERCEPT:
        return ()
    return tuple(p.strip() for p in term.split(":"))


def same_term(a: str, b: str) -> bool:
    return sorted(parts(a)) == sorted(parts(b))


def evaluate(term: str, columns: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    """Elementwise product of the columns named in ``term``.

    Missing values in ``columns`` must already be resolved by the caller.
    """
    out = np.ones(n, dtype=float)
    for p in parts(term):
        key = p if p in columns else ALIASES.get(p, p)
        if key not in columns:
            raise KeyError(p)
        out = out * np.asarray(columns[key], dtype=float)
    return out


def linear_predictor(coefs: Mapping[str, float], columns: Mapping[str, np.ndarray], n: int,
                     select: Iterable[str] | None = None) -> np.ndarray:
    eta = np.zeros(n, dtype=float)
    keys = coefs.keys() if select is None else select
    for term in keys:
        beta = coefs[term]
        if beta == 0.0:
            continue
        eta += beta * evaluate(term, columns, n)
    return eta
