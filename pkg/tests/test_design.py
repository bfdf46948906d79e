import itertools

import pytest

from hedkit.design import (DesignSpec, FactorDef, cell_table, check_design, enumerate_cells,
                           enumerate_embedded_ais, figure1_design, figure2_design, figure3_design,
                           illustrative_design, path_probability, stage1_probability, validate_design)
from hedkit.errors import DesignError

BUILTIN = [figure1_design(), figure2_design(), figure3_design(), illustrative_design()]


@pytest.mark.parametrize("spec", BUILTIN, ids=lambda s: s.kind)
def test_builtin_designs_validate(spec):
    assert validate_design(spec) == []


def test_figure1_cells_and_ais():
    spec = figure1_design()
    cells = enumerate_cells(spec)
    assert len(cells) == 12
    assert [c.label for c in cells[:3]] == ["1→A", "1→B", "1→C"]
    ais = enumerate_embedded_ais(spec)
    assert len(ais) == 8
    # every z vector in {-1, 1}^3 appears exactly once
    assert sorted(a.z for a in ais) == sorted(itertools.product((-1, 1), repeat=3))
    assert ais[0].z == (1, 1, 1) and ais[0].cells == ("1→A", "1→B")
    # each AI pairs the responder cell of its option with one non-responder cell
    for a in ais:
        assert a.cells[0].endswith("A") and a.cells[1][-1] in "BC"


def test_factorial_mrt_has_numbered_cells_and_no_ais():
    spec = figure2_design()
    assert [c.label for c in enumerate_cells(spec)] == ["1", "2", "3", "4"]
    with pytest.raises(DesignError):
        enumerate_embedded_ais(spec)


def test_smart_mrt_cells():
    spec = figure3_design()
    assert len(enumerate_cells(spec)) == 6
    assert len(enumerate_embedded_ais(spec)) == 4


def test_first_level_swaps_numbering():
    base = figure1_design()
    f0 = base.factors[0]
    flipped = DesignSpec(base.kind, (FactorDef(f0.name, first_level=-1),) + base.factors[1:],
                         base.response_assessment, base.micro_horizon_T, base.stage2_day_K)
    assert enumerate_cells(base)[0].stage1_levels[0] == 1
    assert enumerate_cells(flipped)[0].stage1_levels[0] == -1


def test_path_probabilities_balanced():
    spec = figure1_design()
    rows = cell_table(spec)
    probs = {r["cell"]: r["path_probability"] for r in rows}
    assert probs["1→A"] == 0.5
    assert probs["1→B"] == probs["1→C"] == 0.25


def test_stage1_probability_unbalanced():
    spec = DesignSpec("factorial-smart", (FactorDef("A", prob_on=0.7), FactorDef("B", prob_on=0.4),
                                          FactorDef("C", decision_time=2, eligibility="non-responders-only")),
                      response_assessment=(2,), stage2_day_K=2)
    check_design(spec)
    # joint probability times 2**(F-1)
    assert stage1_probability(spec, (1, -1)) == pytest.approx(0.7 * 0.6 * 2)
    assert stage1_probability(spec, (-1, 1)) == pytest.approx(0.3 * 0.4 * 2)
    with pytest.raises(DesignError):
        stage1_probability(spec, (1,))


def test_path_probability_rejects_foreign_cell():
    cell = enumerate_cells(figure1_design())[0]
    with pytest.raises(DesignError):
        path_probability(figure3_design(), cell)


@pytest.mark.parametrize("factor, needle", [
    (FactorDef("A", prob_on=1.0), "degenerate randomization"),
    (FactorDef("A", prob_on=0.0), "degenerate randomization"),
    (FactorDef("A", timescale="weekly"), "unknown timescale"),
    (FactorDef("A", eligibility="responders"), "unknown eligibility"),
    (FactorDef("A", first_level=0), "first_level"),
])
def test_single_factor_problems(factor, needle):
    spec = DesignSpec("factorial-smart", (factor, FactorDef("B"),
                                          FactorDef("C", decision_time=2, eligibility="non-responders-only")),
                      response_assessment=(2,), stage2_day_K=2)
    problems = validate_design(spec)
    assert any(needle in p for p in problems), problems
    with pytest.raises(DesignError):
        check_design(spec)


def test_kind_template_mismatch():
    # a smart-mrt without a micro factor
    spec = DesignSpec("smart-mrt", (FactorDef("A"), FactorDef("C", decision_time=2,
                                                              eligibility="non-responders-only")),
                      response_assessment=(2,), stage2_day_K=2)
    assert any("kind template mismatch" in p for p in validate_design(spec))


def test_restricted_needs_stage2_day():
    spec = DesignSpec("factorial-smart", (FactorDef("A"), FactorDef("B"),
                                          FactorDef("C", decision_time=2, eligibility="non-responders-only")),
                      response_assessment=(2,))
    assert any("stage2_day_K" in p for p in validate_design(spec))


def test_duplicate_names_and_unknown_kind():
    spec = DesignSpec("crossover", (FactorDef("A"), FactorDef("A")))
    problems = validate_design(spec)
    assert any("unknown design kind" in p for p in problems)
    assert any("duplicate factor names" in p for p in problems)


def test_level_must_be_pm1():
    with pytest.raises(DesignError):
        FactorDef("A").prob(0)
