import math
from fractions import Fraction

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from hedkit.design import DesignSpec, FactorDef, path_probability, enumerate_cells
from hedkit.estimands import ai_contrast
from hedkit.estimator import ModelFit, preset_model
from hedkit.power import inflate_for_missingness
from hedkit.restructure import weight_and_replicate_distal
from hedkit.simulate import DGPSpec, simulate_trial

probs = st.floats(min_value=0.1, max_value=0.9).map(lambda x: round(x, 3))


def _smart(p1, p2, p3):
    return DesignSpec("factorial-smart", (FactorDef("A", prob_on=p1), FactorDef("B", prob_on=p2),
                                          FactorDef("C", decision_time=2, prob_on=p3,
                                                    eligibility="non-responders-only")),
                      response_assessment=(2,), stage2_day_K=2)


@settings(max_examples=25, deadline=None)
@given(probs, probs, probs, st.floats(min_value=0.1, max_value=0.8), st.integers(0, 10_000))
def test_wr_weights_invert_path_probabilities(p1, p2, p3, r, seed):
    spec = _smart(p1, p2, p3)
    data = simulate_trial(spec, DGPSpec(response_prob=r), 60, seed, warn_balance=False)
    rows = weight_and_replicate_distal(data, spec).rows
    by_key = {(c.stage1_levels, c.response, c.stage2_level): path_probability(spec, c)
              for c in enumerate_cells(spec)}
    for z1, z2, z3, resp, w in rows[["z1", "z2", "z3", "r", "weight"]].itertuples(index=False):
        if resp == 1:
            expect = 1 / by_key[((z1, z2), "responder", None)]
        else:
            expect = 1 / by_key[((z1, z2), "non-responder", z3)]
        assert math.isclose(w, expect, rel_tol=1e-12)
    # responders appear twice, everyone else once
    counts = rows.groupby("id").size()
    resp_ids = set(data.wide.loc[data.wide["r"] == 1, "id"])
    assert all(counts[i] == (2 if i in resp_ids else 1) for i in counts.index)


@given(st.integers(1, 100_000), st.integers(0, 99))
def test_inflate_is_exact_ceiling(n, pct):
    m = pct / 100
    got = inflate_for_missingness(n, m)
    exact = Fraction(n) / (1 - Fraction(pct, 100))
    assert got == math.ceil(exact)
    assert got * (1 - Fraction(pct, 100)) >= n


vectors = st.tuples(*[st.sampled_from((-1, 1))] * 3)


@given(vectors, vectors, st.integers(0, 1000))
def test_ai_contrast_antisymmetric(z, zp, seed):
    labels = preset_model("model1").terms
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(8, 8))
    fit = ModelFit(rng.normal(size=8), A @ A.T + np.eye(8), labels, 100, 150, True, 1, preset="model1")
    ab, ba = ai_contrast(fit, z, zp), ai_contrast(fit, zp, z)
    assert ab.estimate == -ba.estimate
    assert math.isclose(ab.se, ba.se, rel_tol=1e-12, abs_tol=1e-15)
