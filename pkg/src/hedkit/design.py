"""Declarative hybrid experimental designs: validation, cells, embedded AIs.

Factors are effect coded (+1 on, -1 off).  Non-micro factors map onto the
wide-table columns ``z1, z2, ...`` in declaration order; the micro factor is
the long-table column ``a_t``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .errors import DesignError

SINGLE = "single-point"
MICRO = "micro-randomized"
ALL = "all"
NONRESP = "non-responders-only"

KINDS = ("factorial-smart", "factorial-mrt", "smart-mrt")
RESPONDER = "responder"
NONRESPONDER = "non-responder"


@dataclass(frozen=True)
class FactorDef:
    name: str
    timescale: str = SINGLE
    decision_time: int = 0
    prob_on: float = 0.5
    eligibility: str = ALL
    # level that gets the lower option number / earlier letter in cell labels
    first_level: int = 1
    levels: tuple[int, int] = (1, -1)

    @property
    def is_micro(self) -> bool:
        return self.timescale == MICRO

    @property
    def is_restricted(self) -> bool:
        return self.eligibility == NONRESP

    def prob(self, level: int) -> float:
        if level == 1:
            return self.prob_on
        if level == -1:
            return 1.0 - self.prob_on
        raise DesignError(f"factor {self.name!r}: level must be +1 or -1, got {level!r}")

    @property
    def label_order(self) -> tuple[int, int]:
        return (self.first_level, -self.first_level)


@dataclass(frozen=True)
class DesignSpec:
    kind: str
    factors: tuple[FactorDef, ...]
    response_assessment: tuple[int, ...] = ()
    micro_horizon_T: int = 0
    stage2_day_K: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "response_assessment", tuple(self.response_assessment))

    @property
    def coded_factors(self) -> tuple[FactorDef, ...]:
        """Non-micro factors, in ``z1, z2, ...`` order."""
        return tuple(f for f in self.factors if not f.is_micro)

    @property
    def stage1_factors(self) -> tuple[FactorDef, ...]:
        return tuple(f for f in self.coded_factors if not f.is_restricted)

    @property
    def restricted_factor(self) -> FactorDef | None:
        found = [f for f in self.coded_factors if f.is_restricted]
        return found[0] if found else None

    @property
    def micro_factor(self) -> FactorDef | None:
        found = [f for f in self.factors if f.is_micro]
        return found[0] if found else None

    @property
    def is_restricted(self) -> bool:
        return self.restricted_factor is not None

    @property
    def z_columns(self) -> tuple[str, ...]:
        return tuple(f"z{i + 1}" for i in range(len(self.coded_factors)))

    def z_column(self, factor: FactorDef | str) -> str:
        name = factor if isinstance(factor, str) else factor.name
        for col, f in zip(self.z_columns, self.coded_factors):
            if f.name == name:
                return col
        raise DesignError(f"no coded factor named {name!r}")

    @property
    def stage1_columns(self) -> tuple[str, ...]:
        return tuple(self.z_column(f) for f in self.stage1_factors)

    @property
    def restricted_column(self) -> str | None:
        f = self.restricted_factor
        return None if f is None else self.z_column(f)


@dataclass(frozen=True)
class Cell:
    stage1_levels: tuple[int, ...]
    response: str | None
    stage2_level: int | None
    label: str


@dataclass(frozen=True)
class EmbeddedAI:
    number: int
    z: tuple[int, ...]
    cells: tuple[str, ...] = field(default_factory=tuple)


def validate_design(spec: DesignSpec) -> list[str]:
    """Every violated invariant, as text.  An empty list means the spec is ok."""
    problems = []
    if spec.kind not in KINDS:
        problems.append(f"unknown design kind {spec.kind!r}")
    names = [f.name for f in spec.factors]
    if len(set(names)) != len(names):
        problems.append("duplicate factor names")
    for f in spec.factors:
        if f.timescale not in (SINGLE, MICRO):
            problems.append(f"factor {f.name!r}: unknown timescale {f.timescale!r}")
        if f.eligibility not in (ALL, NONRESP):
            problems.append(f"factor {f.name!r}: unknown eligibility {f.eligibility!r}")
        if not (0.0 < f.prob_on < 1.0):
            problems.append(f"factor {f.name!r}: degenerate randomization (prob_on={f.prob_on!r} not in (0, 1))")
        if f.is_restricted and f.decision_time <= 0:
            problems.append(f"factor {f.name!r}: non-responders-only eligibility requires decision_time > 0")
        if f.first_level not in (1, -1):
            problems.append(f"factor {f.name!r}: first_level must be +1 or -1")
    micro = [f for f in spec.factors if f.is_micro]
    if len(micro) > 1:
        problems.append("at most one micro-randomized factor is supported")
    restricted = [f for f in spec.factors if f.is_restricted and not f.is_micro]
    stage1 = [f for f in spec.factors if not f.is_micro and not f.is_restricted]
    stage1_day0 = all(f.decision_time == 0 for f in stage1)

    def mismatch(why):
        problems.append(f"kind template mismatch ({spec.kind}): {why}")

    if spec.kind == "factorial-smart":
        if len(stage1) < 2 or not stage1_day0:
            mismatch("needs >= 2 single-point factors at day 0")
        if len(restricted) != 1:
            mismatch("needs exactly 1 non-responder-restricted factor")
        if micro or spec.micro_horizon_T != 0:
            mismatch("must have no micro factor and T = 0")
    elif spec.kind == "factorial-mrt":
        if len(stage1) < 2 or not stage1_day0:
            mismatch("needs >= 2 single-point factors at day 0")
        if len(micro) != 1 or spec.micro_horizon_T <= 0:
            mismatch("needs one micro factor and T > 0")
        if restricted:
            mismatch("must have no restricted factor")
    elif spec.kind == "smart-mrt":
        if len(stage1) != 1 or not stage1_day0:
            mismatch("needs exactly 1 single-point factor at day 0")
        if len(restricted) != 1:
            mismatch("needs exactly 1 restricted factor")
        if len(micro) != 1 or spec.micro_horizon_T <= 0:
            mismatch("needs one micro factor and T > 0")

    if restricted:
        k = spec.stage2_day_K
        if k is None:
            problems.append("restricted design needs stage2_day_K")
        else:
            if restricted[0].decision_time != k:
                problems.append("restricted factor decision_time must equal stage2_day_K")
            if not spec.response_assessment:
                problems.append("restricted design needs at least one response assessment day")
            elif min(spec.response_assessment) != k:
                problems.append("first response assessment must fall on stage2_day_K")
            if spec.micro_horizon_T and k >= spec.micro_horizon_T:
                problems.append("stage2_day_K must precede the end of the micro horizon")
    if list(spec.response_assessment) != sorted(set(spec.response_assessment)):
        problems.append("response_assessment days must be strictly increasing")
    if spec.micro_horizon_T < 0:
        problems.append("micro_horizon_T must be >= 0")
    return problems


def check_design(spec: DesignSpec) -> DesignSpec:
    problems = validate_design(spec)
    if problems:
        raise DesignError("; ".join(problems))
    return spec


def _stage1_options(spec: DesignSpec) -> list[tuple[int, ...]]:
    return list(itertools.product(*(f.label_order for f in spec.stage1_factors)))


def _letters(spec: DesignSpec) -> dict[int, str]:
    f = spec.restricted_factor
    first, second = f.label_order
    return {first: "B", second: "C"}


def enumerate_cells(spec: DesignSpec) -> list[Cell]:
    """Design-level experimental cells, labelled ``option -> letter``.

    Responders continue (letter A); non-responders get B for the restricted
    factor's first level and C for the other.  Micro factors are not crossed in.
    """
    restricted = [f for f in spec.coded_factors if f.is_restricted]
    if len(restricted) > 1:
        raise DesignError("unsupported design: more than one restricted factor")
    if not spec.stage1_factors:
        raise DesignError("unsupported design: no stage-1 factor")
    cells = []
    for num, levels in enumerate(_stage1_options(spec), start=1):
        if not restricted:
            cells.append(Cell(levels, None, None, str(num)))
            continue
        cells.append(Cell(levels, RESPONDER, None, f"{num}→A"))
        letters = _letters(spec)
        for lvl in restricted[0].label_order:
            cells.append(Cell(levels, NONRESPONDER, lvl, f"{num}→{letters[lvl]}"))
    return cells


def enumerate_embedded_ais(spec: DesignSpec) -> list[EmbeddedAI]:
    if spec.kind == "factorial-mrt" or not spec.is_restricted:
        raise DesignError("embedded adaptive interventions need a response-restricted design")
    by_key = {}
    for cell in enumerate_cells(spec):
        by_key[(cell.stage1_levels, cell.response, cell.stage2_level)] = cell.label
    ais = []
    number = 1
    for levels in _stage1_options(spec):
        for lvl in spec.restricted_factor.label_order:
            cells = (by_key[(levels, RESPONDER, None)], by_key[(levels, NONRESPONDER, lvl)])
            # z follows coded-factor order, which puts the restricted factor where it was declared
            z = []
            it = iter(levels)
            for f in spec.coded_factors:
                z.append(lvl if f.is_restricted else next(it))
            ais.append(EmbeddedAI(number, tuple(z), cells))
            number += 1
    return ais


def stage1_probability(spec: DesignSpec, levels) -> float:
    """Stage-1 assignment probability under the published accounting.

    The joint probability of the crossed stage-1 options is rescaled by
    ``2**(F-1)`` so that balanced designs give 0.5, as if stage 1 were one
    two-arm randomization.  Uniform rescaling of all weights does not change
    weighted least-squares estimates.
    """
    f1 = spec.stage1_factors
    levels = tuple(levels)
    if len(levels) != len(f1):
        raise DesignError(f"expected {len(f1)} stage-1 levels, got {len(levels)}")
    p = 1.0
    for f, lvl in zip(f1, levels):
        p *= f.prob(int(lvl))
    return p * 2 ** (len(f1) - 1)


def path_probability(spec: DesignSpec, cell: Cell) -> float:
    if cell not in enumerate_cells(spec):
        raise DesignError(f"cell {cell.label!r} is not a cell of this design")
    p = stage1_probability(spec, cell.stage1_levels)
    if cell.response == NONRESPONDER:
        p *= spec.restricted_factor.prob(cell.stage2_level)
    return p


def cell_table(spec: DesignSpec) -> list[dict]:
    """Rows for printing: one per cell with its path probability."""
    names = [f.name for f in spec.stage1_factors]
    rows = []
    for c in enumerate_cells(spec):
        row = {"cell": c.label}
        row.update({n: lvl for n, lvl in zip(names, c.stage1_levels)})
        row["response"] = c.response or ""
        if spec.is_restricted:
            row[spec.restricted_factor.name] = "" if c.stage2_level is None else c.stage2_level
        row["path_probability"] = path_probability(spec, c)
        rows.append(row)
    return rows



def figure1_design(p: float = 0.5) -> DesignSpec:
    """Factorial-SMART: App and Coaching at entry, Meal for week-2 non-responders."""
    return DesignSpec(
        kind="factorial-smart",
        factors=(
            FactorDef("App", SINGLE, 0, p),
            FactorDef("Coaching", SINGLE, 0, p),
            FactorDef("Meal", SINGLE, 14, p, NONRESP),
        ),
        response_assessment=(14,),
        micro_horizon_T=0,
        stage2_day_K=14,
    )


def figure2_design(p: float = 0.5, T: int = 84) -> DesignSpec:
    """Factorial-MRT: Add Coaching and Add Meal at entry, daily Prompt."""
    return DesignSpec(
        kind="factorial-mrt",
        factors=(
            FactorDef("AddCoaching", SINGLE, 0, p),
            FactorDef("AddMeal", SINGLE, 0, p),
            FactorDef("Prompt", MICRO, 1, p),
        ),
        micro_horizon_T=T,
    )


def figure3_design(p: float = 0.5, T: int = 84, K: int = 14) -> DesignSpec:
    """SMART-MRT: Add Coaching at entry, Add Meal for non-responders at K, daily Prompt.

    Option 1 is App alone (Add Coaching = -1), hence ``first_level=-1``.
    """
    return DesignSpec(
        kind="smart-mrt",
        factors=(
            FactorDef("AddCoaching", SINGLE, 0, p, first_level=-1),
            FactorDef("AddMeal", SINGLE, K, p, NONRESP),
            FactorDef("Prompt", MICRO, 1, p),
        ),
        response_assessment=(K,),
        micro_horizon_T=T,
        stage2_day_K=K,
    )


def illustrative_design() -> DesignSpec:
    """The weight-loss SMART-MRT: response checked at weeks 2, 4, 8; messages only
    for non-responders after classification, sent with probability 0.66."""
    return DesignSpec(
        kind="smart-mrt",
        factors=(
            FactorDef("Coaching", SINGLE, 0, 0.5, first_level=-1),
            FactorDef("Vigorous", SINGLE, 14, 0.5, NONRESP, first_level=-1),
            FactorDef("Message", MICRO, 14, 0.66, NONRESP),
        ),
        response_assessment=(14, 28, 56),
        micro_horizon_T=84,
        stage2_day_K=14,
    )
