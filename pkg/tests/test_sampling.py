import itertools
from fractions import Fraction

import numpy as np
import pytest

from nccipw import (Cohort, NccDesign, control_inclusion_prob, draw_cases,
                    draw_controls, load_sample_csv, risk_set, sample,
                    write_sample_csv)
from conftest import random_cohort


def enumerate_inclusion_probabilities(cohort, v1, m, match_tol=None):
    """Exact P(V0_j = 1 | V1) by enumerating every control-subset combination.

    Independent of the product formula: walks the cartesian product of all
    per-case subsets (each equally likely) in exact rational arithmetic.
    """
    cases = [int(i) for i in np.flatnonzero(v1)]
    options = []
    for i in cases:
        members = risk_set(cohort, i, match_tol)
        eligible = [int(k) for k in members if k != i]
        k = min(m, len(eligible))
        subsets = list(itertools.combinations(eligible, k)) if k > 0 else [()]
        options.append(subsets)
    total = Fraction(0)
    counts = [Fraction(0)] * cohort.n
    for combo in itertools.product(*options):
        total += 1
        chosen = set(itertools.chain.from_iterable(combo))
        for j in chosen:
            counts[j] += 1
    return [c / total for c in counts]


def formula_inclusion_probabilities_rational(cohort, v1, assignments, match_tol=None):
    """The inclusion-probability product transcribed in exact rationals."""
    out = []
    cases = [int(i) for i in np.flatnonzero(v1)]
    info = {}
    for i in cases:
        members = risk_set(cohort, i, match_tol)
        info[i] = (set(int(k) for k in members), len(members), len(assignments[i]))
    for j in range(cohort.n):
        prod = Fraction(1)
        for i in cases:
            members, n_i, m_i = info[i]
            if j in members and j != i and m_i > 0:
                prod *= 1 - Fraction(m_i, n_i - 1)
        out.append(1 - prod)
    return out


class TestDrawCases:
    def test_pi1_one_selects_every_event(self):
        rng = np.random.default_rng(0)
        coh = random_cohort(rng, 40)
        v1 = draw_cases(coh, NccDesign(1.0, 2), rng)
        assert np.array_equal(v1, coh.deltas)

    def test_half_of_ten_events(self):
        times = np.linspace(0.1, 4.0, 20)
        deltas = np.array([1] * 10 + [0] * 10)
        coh = Cohort(times, deltas, np.zeros((20, 1)))
        v1 = draw_cases(coh, NccDesign(0.5, 1), np.random.default_rng(5))
        assert v1.sum() == 5
        assert np.all(coh.deltas[v1 == 1] == 1)

    def test_marginal_selection_frequency(self):
        times = np.linspace(0.1, 4.0, 15)
        deltas = np.array([1] * 10 + [0] * 5)
        coh = Cohort(times, deltas, np.zeros((15, 1)))
        rng = np.random.default_rng(7)
        reps = 10_000
        hits = np.zeros(15)
        for _ in range(reps):
            hits += draw_cases(coh, NccDesign(0.2, 1), rng)
        freq = hits / reps
        se = np.sqrt(0.2 * 0.8 / reps)
        assert np.all(np.abs(freq[:10] - 0.2) < 3 * se)
        assert np.all(freq[10:] == 0)

    def test_no_events_raises(self):
        coh = Cohort([1.0, 2.0], [0, 0], np.zeros((2, 1)))
        with pytest.raises(ValueError):
            draw_cases(coh, NccDesign(0.5, 1), np.random.default_rng(0))


class TestDrawControls:
    def test_singleton_risk_set_gives_empty_controls(self):
        coh = Cohort([1.0, 2.0, 3.0], [0, 0, 1], np.zeros((3, 1)))
        v1 = np.array([0, 0, 1], dtype=np.int8)
        asg = draw_controls(coh, v1, NccDesign(1.0, 3), np.random.default_rng(1))
        assert asg[2].size == 0

    def test_m_truncated_to_risk_set(self):
        coh = Cohort([1.0, 2.0, 3.0], [1, 0, 0], np.zeros((3, 1)))
        v1 = np.array([1, 0, 0], dtype=np.int8)
        asg = draw_controls(coh, v1, NccDesign(1.0, 3), np.random.default_rng(2))
        assert sorted(asg[0].tolist()) == [1, 2]

    def test_uniform_selection_frequency(self):
        coh = Cohort([1.0, 2.0, 3.0, 4.0, 5.0], [1, 0, 0, 0, 0], np.zeros((5, 1)))
        v1 = np.array([1, 0, 0, 0, 0], dtype=np.int8)
        rng = np.random.default_rng(3)
        reps = 10_000
        hits = np.zeros(5)
        for _ in range(reps):
            asg = draw_controls(coh, v1, NccDesign(1.0, 1), rng)
            hits[asg[0]] += 1
        freq = hits[1:] / reps
        se = np.sqrt(0.25 * 0.75 / reps)
        assert np.all(np.abs(freq - 0.25) < 3 * se)


class TestControlInclusionProb:
    def test_single_case_simple_fraction(self):
        # j in the risk set of one selected case with m=1 and risk-set size 5
        coh = Cohort([1.0, 2.0, 3.0, 4.0, 5.0], [1, 0, 0, 0, 0], np.zeros((5, 1)))
        v1 = np.array([1, 0, 0, 0, 0], dtype=np.int8)
        asg = {0: np.array([2])}
        p0 = control_inclusion_prob(coh, v1, asg)
        assert np.allclose(p0[1:], 0.25)
        assert p0[0] == 0.0  # a case is never its own control

    def test_outside_every_risk_set_is_zero(self):
        coh = Cohort([0.5, 1.0, 2.0], [0, 1, 0], np.zeros((3, 1)))
        v1 = np.array([0, 1, 0], dtype=np.int8)
        asg = {1: np.array([2])}
        p0 = control_inclusion_prob(coh, v1, asg)
        assert p0[0] == 0.0

    def test_two_overlapping_cases(self):
        # risk sets of sizes 10 and 8, both holding subject 9, m=3 each:
        # p0 = 1 - (1 - 3/9)(1 - 3/7) = 13/21
        times = np.concatenate([[1.0, 3.0, 2.0], np.linspace(3.5, 6.0, 7)])
        deltas = np.array([1, 1] + [0] * 8)
        coh = Cohort(times, deltas, np.zeros((10, 1)))
        assert risk_set(coh, 0).size == 10
        assert risk_set(coh, 1).size == 8
        v1 = np.zeros(10, dtype=np.int8)
        v1[[0, 1]] = 1
        asg = {0: np.array([2, 3, 4]), 1: np.array([4, 5, 6])}
        p0 = control_inclusion_prob(coh, v1, asg)
        expected = 1.0 - (1.0 - 3.0 / 9.0) * (1.0 - 3.0 / 7.0)
        assert p0[9] == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(13.0 / 21.0, abs=1e-15)

    def test_matches_exact_enumeration_small_cohorts(self):
        # identical to the acceptance gate but on a fast subset
        rng = np.random.default_rng(17)
        for trial in range(6):
            n = int(rng.integers(5, 9))
            coh = random_cohort(rng, n, with_match=(trial % 2 == 0))
            tol = np.array([0.0, 4.0]) if trial % 2 == 0 else None
            m = 1 + trial % 2
            design = NccDesign(0.7, m, tol)
            try:
                smp = sample(coh, design, rng)
            except ValueError:
                continue
            exact = enumerate_inclusion_probabilities(coh, smp.v1, m, tol)
            rational = formula_inclusion_probabilities_rational(
                coh, smp.v1, {c: a for c, a in smp.control_assignments.items()}, tol)
            assert rational == exact
            assert np.allclose(smp.p0, [float(x) for x in exact], atol=1e-12)


class TestSample:
    def test_pi1_one_everyone_is_case(self):
        rng = np.random.default_rng(21)
        coh = random_cohort(rng, 30)
        smp = sample(coh, NccDesign(1.0, 1), rng)
        assert np.array_equal(smp.v1, coh.deltas)
        assert smp.pi1_realized == 1.0

    def test_seed_determinism(self):
        rng = np.random.default_rng(22)
        coh = random_cohort(rng, 40)
        a = sample(coh, NccDesign(0.5, 2), np.random.default_rng(99))
        b = sample(coh, NccDesign(0.5, 2), np.random.default_rng(99))
        assert np.array_equal(a.v1, b.v1)
        assert np.array_equal(a.v0, b.v0)
        assert np.array_equal(a.p0, b.p0)
        assert a.pi1_realized == b.pi1_realized
        assert set(a.control_assignments) == set(b.control_assignments)
        for c in a.control_assignments:
            assert np.array_equal(a.control_assignments[c], b.control_assignments[c])

    def test_v0_product_identity(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            coh = random_cohort(rng, 25)
            try:
                smp = sample(coh, NccDesign(0.6, 2), rng)
            except ValueError:
                continue
            # direct product identity over (case, control) indicators
            prod = np.ones(coh.n)
            for case, controls in smp.control_assignments.items():
                for j in controls:
                    prod[j] = 0.0
            assert np.array_equal(smp.v0, (1.0 - prod).astype(np.int8))
            assert np.array_equal(smp.selected, ((smp.v1 == 1) | (smp.v0 == 1)).astype(np.int8))

    def test_realized_pi1_exact_when_integral(self):
        times = np.linspace(0.2, 3.0, 12)
        deltas = np.array([1] * 8 + [0] * 4)
        coh = Cohort(times, deltas, np.zeros((12, 1)))
        smp = sample(coh, NccDesign(0.25, 1), np.random.default_rng(4))
        assert smp.pi1_realized == 0.25

    def test_matching_constraints_hold(self):
        rng = np.random.default_rng(25)
        tol = np.array([0.0, 1.0])
        for _ in range(10):
            coh = random_cohort(rng, 40, with_match=True)
            try:
                smp = sample(coh, NccDesign(0.8, 3, tol), rng)
            except ValueError:
                continue
            for case, controls in smp.control_assignments.items():
                for j in controls:
                    assert coh.times[j] >= coh.times[case]
                    assert np.all(np.abs(coh.match_vars[j] - coh.match_vars[case]) <= tol)

    def test_case_with_nonzero_count_and_singleton_risk_set_rejected(self):
        coh = Cohort([1.0, 2.0, 3.0], [0, 0, 1], np.zeros((3, 1)))
        v1 = np.array([0, 0, 1], dtype=np.int8)
        with pytest.raises(ValueError):
            control_inclusion_prob(coh, v1, {2: np.array([1])})


class TestSampleCsv:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(31)
        coh = random_cohort(rng, 35, with_match=True)
        tol = np.array([0.0, 2.0])
        smp = sample(coh, NccDesign(0.5, 2, tol), rng)
        path = tmp_path / "s.csv"
        write_sample_csv(smp, path)
        back = load_sample_csv(path, coh, match_tol=tol)
        assert np.array_equal(back.v1, smp.v1)
        assert np.array_equal(back.v0, smp.v0)
        assert np.array_equal(back.p0, smp.p0)  # bitwise via repr round-trip
        assert back.pi1_realized == smp.pi1_realized
        for c in smp.control_assignments:
            assert np.array_equal(back.control_assignments[c], smp.control_assignments[c])

    def test_wrong_match_tol_detected(self, tmp_path):
        rng = np.random.default_rng(32)
        coh = random_cohort(rng, 35, with_match=True)
        tol = np.array([0.0, 1.0])
        smp = sample(coh, NccDesign(0.5, 2, tol), rng)
        path = tmp_path / "s.csv"
        write_sample_csv(smp, path)
        with pytest.raises(ValueError, match="p0"):
            load_sample_csv(path, coh, match_tol=None)
