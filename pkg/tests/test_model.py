import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from externreg.enumerations import ExternalityMode
from externreg.exceptions import ParseError, PolicyDomainError
from externreg.model import (
    Policy,
    best_effort,
    buyer_outcome,
    evaluate,
    log_max_fine_for_budget,
    loss_of,
    max_fine_for_budget,
    policy_gap,
    post_value,
    response_arrays,
    risk_of,
    thresholds,
    utility_of,
)
from externreg.population import DiscreteDistribution, Population, dominates
from tests.strategies import costs, distributions, efficiencies, fines, finite, policies, populations

SQRT_E = math.sqrt(math.e)


class TestPolicy:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ("y=1,c=0,p=2", Policy(1.0, 0.0, 2.0)),
            ("p=2, y=1, c=0.5", Policy(1.0, 0.5, 2.0)),
            ("y=0,c=0,p=0", Policy(0.0, 0.0, 0.0)),
        ],
    )
    def test_from_string(self, text: str, expected: Policy):
        assert Policy.from_string(text) == expected

    @pytest.mark.parametrize("text", ["y=1,c=0", "y=1,c=0,p=2,y=3", "y=1;c=0;p=2", "y=a,c=0,p=1", "q=1,c=0,p=1"])
    def test_non_parsable_raises_parse_error(self, text: str):
        with pytest.raises(ParseError):
            Policy.from_string(text)

    @pytest.mark.parametrize(
        "fine,cost,price",
        [(-1.0, 0.0, 0.0), (0.0, -0.1, 0.0), (0.0, 0.0, -2.0), (math.inf, 0.0, 0.0), (0.0, math.nan, 0.0)],
    )
    def test_out_of_domain_raises(self, fine, cost, price):
        with pytest.raises(PolicyDomainError):
            Policy(fine, cost, price)

    def test_simple_policies(self):
        assert Policy(1.0, 0.0, 1.0).is_fine_policy
        assert Policy(0.0, 1.0, 1.0).is_cost_policy
        assert not Policy(1.0, 1.0, 2.0).is_simple

    def test_dict_round_trip(self):
        s = Policy(1.5, 0.25, 3.0)
        assert s.to_dict() == {"y": 1.5, "c": 0.25, "p": 3.0}
        assert Policy.from_dict(s.to_dict()) == s


class TestBestResponse:
    @pytest.mark.parametrize(
        "k,y,c,expected",
        [
            (3.0, SQRT_E / 3.0, 0.0, 1.0 / 6.0),
            (2.0, 0.0, 1.0, 0.0),
            (0.0, 5.0, 0.0, 0.0),
            (1.0, 1.0, 0.0, 0.0),
        ],
    )
    def test_best_effort(self, k, y, c, expected):
        assert best_effort(k, y, c) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize(
        "k,y,c,expected",
        [
            (4.0, 0.0, 0.0, 1.0),
            (3.0, SQRT_E / 3.0, 0.0, math.exp(-0.5)),
            (1.0, 1.0, 2.0, math.exp(-2.0)),
            (0.0, 3.0, 0.5, math.exp(-0.5)),
        ],
    )
    def test_risk(self, k, y, c, expected):
        assert risk_of(k, y, c) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize(
        "k,y,c,expected",
        [
            (3.0, SQRT_E / 3.0, 0.0, 0.5),
            (9.0, math.exp(1.0 / 8.0) / 9.0, 0.0, 1.0 / 8.0),
            (2.0, 0.0, 3.0, 0.0),
            (0.0, 2.0, 1.0, 2.0 * math.exp(-1.0)),
        ],
    )
    def test_loss(self, k, y, c, expected):
        assert loss_of(k, y, c) == pytest.approx(expected, abs=1e-12)

    def test_utility_of_non_buyer(self):
        s = Policy(math.e, 0.0, math.e - 2.5)
        assert utility_of((math.e, 0.0), s) == pytest.approx(2.5 - math.e, abs=1e-12)

    def test_free_item_utility_is_value(self):
        assert utility_of((3.5, 2.0), Policy(0.0, 0.0, 0.0)) == 3.5

    def test_indifferent_buyer(self):
        s = Policy(SQRT_E / 3.0, 0.0, 0.5)
        assert utility_of((1.0, 3.0), s) == pytest.approx(0.0, abs=1e-12)
        assert post_value((1.0, 3.0), s) == pytest.approx(0.5, abs=1e-12)
        assert buyer_outcome((1.0, 3.0), s, tie_fraction=0.0).purchase_fraction == 0.0
        assert buyer_outcome((1.0, 3.0), s, tie_fraction=1.0).purchase_fraction == 1.0

    def test_positive_utility_buys_without_security(self):
        outcome = buyer_outcome((1.0, 3.0), Policy(0.0, 0.0, 0.5))
        assert outcome.purchase_fraction == 1.0
        assert outcome.risk == 1.0

    def test_bad_tie_fraction_raises(self):
        with pytest.raises(PolicyDomainError):
            buyer_outcome((1.0, 3.0), Policy(0.0, 0.0, 0.5), tie_fraction=1.5)

    @pytest.mark.parametrize(
        "s,expected",
        [
            (Policy(1.0, 0.0, 1.0), (1.0, 1.0)),
            (Policy(0.0, 2.0, 3.0), (math.inf, math.inf)),
            (Policy(math.e, 1.0, 2.0), (1.0, 1.0)),
            (Policy(4.0, 0.0, 1.0), (0.25, 1.0)),
        ],
    )
    def test_thresholds(self, s, expected):
        assert thresholds(s) == pytest.approx(expected)

    def test_policy_gap_of_identical_policies(self):
        s = Policy(2.0, 0.5, 1.0)
        assert all(policy_gap(k, s, s) == 0.0 for k in (0.0, 0.5, 1.0, 4.0, 40.0))

    def test_policy_gap_without_effort_is_constant(self):
        s, s2 = Policy(0.5, 1.0, 0.0), Policy(0.25, 0.0, 0.0)
        expected = 0.5 * math.exp(-1.0) - 0.25
        for k in (0.0, 0.5, 1.0, 2.0):
            assert policy_gap(k, s, s2) == pytest.approx(expected, abs=1e-12)


class TestMaxFineForBudget:
    @pytest.mark.parametrize("budget,k", [(0.5, 3.0), (0.2, 3.0), (1.0, 0.0), (2.0, 9.0), (0.0, 4.0)])
    def test_inverts_loss(self, budget, k):
        assert loss_of(k, max_fine_for_budget(budget, k), 0.0) == pytest.approx(budget, abs=1e-12)

    def test_negative_budget(self):
        assert max_fine_for_budget(-0.1, 2.0) == -math.inf

    def test_huge_exponent(self):
        assert max_fine_for_budget(1000.0, 10.0) == math.inf

    def test_log_stays_finite_where_the_fine_overflows(self):
        assert log_max_fine_for_budget(1000.0, 10.0) == pytest.approx(10000.0 - 1.0 - math.log(10.0))
        assert log_max_fine_for_budget(0.05, 10.0) == pytest.approx(math.log(0.05))
        assert log_max_fine_for_budget(0.0, 10.0) == -math.inf


class TestLargeFines:
    def test_loss_when_y_times_k_overflows(self):
        expected = (math.log(1e308) + math.log(25.0) + 1.0) / 25.0
        assert loss_of(25.0, 1e308, 0.0) == pytest.approx(expected)
        assert expected == pytest.approx(28.5366, abs=1e-4)

    def test_vectorised_response_matches_scalar(self):
        effort, risk, loss = response_arrays(np.array([0.0, 25.0]), sys.float_info.max, 1.0)
        assert np.all(np.isfinite(loss))
        assert loss[0] == pytest.approx(sys.float_info.max * math.exp(-1.0))
        assert loss[1] == pytest.approx(loss_of(25.0, sys.float_info.max, 1.0))
        assert effort[1] == pytest.approx(best_effort(25.0, sys.float_info.max, 1.0))
        assert 0.0 <= risk[1] < 1e-300
        assert risk_of(25.0, sys.float_info.max, 1.0) < 1e-300


class TestEvaluate:
    def test_free_insecure_item(self, small_population):
        outcome = evaluate(small_population, Policy(0.0, 0.0, 0.0))
        assert outcome.sale_prob == 1.0
        assert outcome.profit == 0.0
        assert outcome.externality == 1.0

    def test_non_monotone_population(self, non_monotone_population):
        s = Policy(math.e, 0.0, math.e - 2.5)
        outcome = evaluate(non_monotone_population, s)
        assert outcome.externality == pytest.approx(1.0 / (2.0 * math.e), abs=1e-12)
        assert outcome.buyers() == [(math.e, 2.0)]

        upgraded = non_monotone_population.with_efficiencies(
            DiscreteDistribution.from_atoms([(1.0, 0.5), (2.0, 0.5)])
        )
        after = evaluate(upgraded, s)
        assert after.externality == pytest.approx(3.0 / (4.0 * math.e), abs=1e-12)

    def test_total_externality(self, non_monotone_population):
        s = Policy(math.e, 0.0, math.e - 2.5)
        outcome = evaluate(non_monotone_population, s, mode=ExternalityMode.TOTAL)
        assert outcome.externality == pytest.approx(1.0 / (4.0 * math.e), abs=1e-12)

    def test_nobody_buys(self, small_population):
        outcome = evaluate(small_population, Policy(0.0, 0.0, 5.0))
        assert outcome.sale_prob == 0.0
        assert outcome.externality == 0.0

    def test_tie_fraction_splits_indifferent_mass(self):
        pop = Population(
            DiscreteDistribution.from_atoms([(1.0, 0.5), (2.0, 0.5)]),
            DiscreteDistribution.point_mass(1.0),
        )
        outcome = evaluate(pop, Policy(0.0, 0.0, 1.0), tie_fraction=0.25)
        assert outcome.sale_prob == pytest.approx(0.625)
        assert outcome.profit == pytest.approx(0.625)

    def test_to_dict(self, small_population):
        data = evaluate(small_population, Policy(0.0, 0.0, 1.0)).to_dict()
        assert set(data) == {"sale_prob", "profit", "externality", "mode", "atoms"}
        assert data["mode"] == "conditional"
        assert len(data["atoms"]) == 4
        assert "atoms" not in evaluate(small_population, Policy(0.0, 0.0, 1.0)).to_dict(include_atoms=False)

    def test_security_cost_derivative_on_effort_branch(self):
        # d/dc (loss + c) = 1 - 1/k while the buyer exerts effort
        k, y, c, step = 2.0, 5.0, 0.3, 1e-6
        slope = ((loss_of(k, y, c + step) + c + step) - (loss_of(k, y, c) + c)) / step
        assert slope == pytest.approx(1.0 - 1.0 / k, abs=1e-6)


class TestProperties:
    @settings(max_examples=2000, deadline=None)
    @given(k=efficiencies, y=fines, c=costs)
    def test_identity_chain(self, k, y, c):
        effort, risk, loss = best_effort(k, y, c), risk_of(k, y, c), loss_of(k, y, c)
        assert effort >= 0
        assert 0 <= risk <= 1
        assert risk == pytest.approx(math.exp(-c - k * effort), rel=1e-12, abs=1e-12)
        assert loss == pytest.approx(y * risk + effort, rel=1e-12, abs=1e-12)
        assert loss >= 0

    @settings(max_examples=2000, deadline=None)
    @given(k=efficiencies, dk=st.floats(0.0, 20.0, **finite), y=fines, c=costs, v=st.floats(0.0, 10.0, **finite))
    def test_monotone_in_efficiency(self, k, dk, y, c, v):
        k2 = k + dk
        assert risk_of(k2, y, c) <= risk_of(k, y, c) + 1e-12
        assert loss_of(k2, y, c) <= loss_of(k, y, c) + 1e-9
        # combined security c + k * effort never drops for a better buyer
        assert c + k2 * best_effort(k2, y, c) >= c + k * best_effort(k, y, c) - 1e-9
        s = Policy(y, c, 1.0)
        assert utility_of((v, k2), s) >= utility_of((v, k), s) - 1e-9

    @settings(max_examples=1000, deadline=None)
    @given(pop=populations(), s=policies())
    def test_outcome_invariants(self, pop, s):
        outcome = evaluate(pop, s)
        weights = [atom.prob * atom.outcome.purchase_fraction for atom in outcome.per_atom]
        assert outcome.sale_prob == pytest.approx(math.fsum(weights), abs=1e-12)
        assert outcome.profit == pytest.approx(s.margin * outcome.sale_prob, abs=1e-12)
        for atom in outcome.per_atom:
            assert atom.outcome.utility == pytest.approx(atom.outcome.post_value - s.price, abs=1e-12)

        buyer_risks = [atom.outcome.risk for atom in outcome.per_atom if atom.outcome.purchase_fraction > 0]
        if buyer_risks:
            assert min(buyer_risks) - 1e-12 <= outcome.externality <= max(buyer_risks) + 1e-12

    @settings(max_examples=1000, deadline=None)
    @given(
        pop=populations(),
        y=fines,
        dy=st.floats(0.0, 10.0, **finite),
        c=costs,
        margin=st.floats(0.0, 5.0, **finite),
    )
    def test_lower_loss_generates_greater_profits(self, pop, y, dy, c, margin):
        # the same security with a smaller fine lowers every buyer's loss
        s, s2 = Policy(y, c, c + margin), Policy(y + dy, c, c + margin)
        for eff in pop.efficiencies.points:
            assert loss_of(eff, s.fine, s.cost) <= loss_of(eff, s2.fine, s2.cost) + 1e-9
        assert evaluate(pop, s).profit >= evaluate(pop, s2).profit - 1e-12

    @settings(max_examples=1000, deadline=None)
    @given(
        values=distributions(0.01, 10.0),
        effs=distributions(0.0, 10.0),
        shifts=st.lists(st.floats(0.0, 5.0, **finite), min_size=3, max_size=3),
        s=policies(),
    )
    def test_better_efficiencies_generate_greater_profits(self, values, effs, shifts, s):
        better = DiscreteDistribution.from_atoms(
            (point + shift, prob) for (point, prob), shift in zip(effs.atoms, shifts)
        )
        assert dominates(better, effs)
        if s.price < s.cost:
            s = Policy(s.fine, s.price, s.cost)
        assert evaluate(Population(values, better), s).profit >= evaluate(Population(values, effs), s).profit - 1e-12

    @settings(max_examples=1000, deadline=None)
    @given(s=policies(), s2=policies())
    def test_comparison_function_monotone(self, s, s2):
        if s.fine * math.exp(-s.cost) > s2.fine * math.exp(-s2.cost):
            s, s2 = s2, s
        gaps = [policy_gap(k, s, s2) for k in [0.0, 0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 50.0, 500.0]]
        for low, high in zip(gaps, gaps[1:]):
            assert high >= low - 1e-9

    @settings(max_examples=1000, deadline=None)
    @given(budget=st.floats(0.0, 20.0, **finite), k=st.floats(0.0, 20.0, **finite))
    def test_max_fine_for_budget_is_loss_inverse(self, budget, k):
        fine = max_fine_for_budget(budget, k)
        assert loss_of(k, fine, 0.0) == pytest.approx(budget, rel=1e-9, abs=1e-12)
