import numpy as np
import pytest
from scipy.special import ndtr

from nccipw import (PerturbationResult, ReplicationRecord, SimConfig, aggregate,
                    generate_cohort, run_replication, run_replications,
                    simulate_cell, true_values, write_report_csv)
from nccipw.simulation import true_risk_intercept


def small_config(**overrides):
    base = dict(n_cohort=400, pi1=0.5, m=2, matching=False, t0=1.0, model="cox",
                n_reps=4, n_perturb=0, master_seed=99, oracle_draws=40_000,
                oracle_seed=1)
    base.update(overrides)
    return SimConfig(**base)


class TestGenerator:
    def test_deterministic(self):
        cfg = small_config()
        a = generate_cohort(cfg, np.random.default_rng(5))
        b = generate_cohort(cfg, np.random.default_rng(5))
        assert np.array_equal(a.cohort.times, b.cohort.times)
        assert np.array_equal(a.cohort.markers, b.cohort.markers)
        assert np.array_equal(a.event_times, b.event_times)

    def test_latents_consistent_with_observables(self):
        sim = generate_cohort(small_config(n_cohort=2000), np.random.default_rng(6))
        coh = sim.cohort
        assert np.allclose(coh.times, np.minimum(sim.event_times, sim.censor_times))
        assert np.array_equal(coh.deltas, (sim.event_times <= sim.censor_times).astype(np.int8))

    def test_marginal_structure(self):
        sim = generate_cohort(small_config(n_cohort=30_000), np.random.default_rng(7))
        coh = sim.cohort
        z, b = coh.markers[:, 0], coh.markers[:, 1]
        n = coh.n
        assert abs(z.mean()) < 4 / np.sqrt(n)
        assert abs(b.mean()) < 4 * np.sqrt(2.0 / n)
        assert abs(b.var() - 2.0) < 0.1
        m1, m2 = coh.match_vars[:, 0], coh.match_vars[:, 1]
        assert set(np.unique(m1)) <= {0.0, 1.0}
        assert set(np.unique(m2)) <= set(float(k) for k in range(6))
        # P(M1 = 1) = 1/2 by symmetry of the latent normal score
        assert abs(m1.mean() - 0.5) < 3 * np.sqrt(0.25 / n)

    def test_censoring_support(self):
        sim = generate_cohort(small_config(n_cohort=5000), np.random.default_rng(8))
        assert sim.censor_times.max() <= 2.0 + 1e-12
        assert sim.censor_times.min() >= 0.1


class TestTruths:
    def test_cox_truths_exact(self):
        cfg = small_config(model="cox")
        truths = true_values(cfg)
        assert truths["alpha"] == pytest.approx(-3.0, abs=1e-12)
        assert truths["beta_Z"] == 0.5
        assert truths["beta_B"] == 0.5
        assert true_risk_intercept(1.0) == pytest.approx(-3.0, abs=1e-12)
        assert true_risk_intercept(np.exp(1.5)) == pytest.approx(0.0, abs=1e-12)

    def test_truths_cached(self):
        cfg = small_config(model="glm")
        first = true_values(cfg)
        second = true_values(cfg)
        assert first == second

    def test_accuracy_truths_in_range(self):
        truths = true_values(small_config())
        for key in ("auc", "tpr", "ppv", "npv"):
            assert 0.0 < truths[key] < 1.0


class TestReplication:
    def test_deterministic_record(self):
        cfg = small_config(n_perturb=10)
        a = run_replication(cfg, 2)
        b = run_replication(cfg, 2)
        for scheme in ("full", "new", "samuelsen"):
            assert np.array_equal(a.estimates[scheme], b.estimates[scheme], equal_nan=True)
        assert np.array_equal(a.pert.se, b.pert.se, equal_nan=True)

    def test_pi1_one_schemes_identical(self):
        cfg = small_config(pi1=1.0, n_cohort=600)
        rec = run_replication(cfg, 0)
        assert np.array_equal(rec.estimates["new"], rec.estimates["samuelsen"])

    def test_threads_do_not_change_results(self):
        cfg = small_config(n_reps=4)
        seq = run_replications(cfg, threads=1)
        par = run_replications(cfg, threads=2)
        for a, b in zip(seq, par):
            assert a.rep_id == b.rep_id
            for scheme in ("full", "new", "samuelsen"):
                assert np.array_equal(a.estimates[scheme], b.estimates[scheme], equal_nan=True)


def stub_record(rep_id, names, values, se=None):
    est = np.asarray(values, dtype=float)
    pert = None
    if se is not None:
        se = np.asarray(se, dtype=float)
        pert = PerturbationResult(point=est, se=se,
                                  ci_lower=est - 1.959963984540054 * se,
                                  ci_upper=est + 1.959963984540054 * se,
                                  b_used=10, b_total=10)
    return ReplicationRecord(rep_id=rep_id, names=names,
                             estimates={"full": est, "new": est, "samuelsen": est},
                             converged={"full": True, "new": True, "samuelsen": True},
                             cutoffs={"full": 0.1, "new": 0.1, "samuelsen": 0.1},
                             pert=pert)


class TestAggregate:
    def test_hand_built_three_records(self):
        names = ["alpha", "beta_Z"]
        records = [stub_record(0, names, [1.0, 0.4], [0.5, 0.2]),
                   stub_record(1, names, [2.0, 0.5], [0.7, 0.3]),
                   stub_record(2, names, [3.0, 0.9], [0.6, 0.1])]
        truths = {"alpha": 2.0, "beta_Z": 0.5}
        rep = aggregate(records, truths, level=0.95)
        row = rep.row("alpha")
        assert row["bias_new"] == pytest.approx(0.0, abs=1e-15)
        assert row["esd_new"] == pytest.approx(1.0, abs=1e-15)
        assert row["pase"] == pytest.approx(0.6, abs=1e-15)
        # CIs around 1.0 and 3.0 have half-widths 0.98 and 1.176: the first
        # misses the truth 2.0, the other two contain it
        assert row["coverage"] == pytest.approx(2.0 / 3.0)
        row = rep.row("beta_Z")
        assert row["bias_new"] == pytest.approx(0.1, abs=1e-12)
        assert row["esd_new"] == pytest.approx(np.std([0.4, 0.5, 0.9], ddof=1), abs=1e-12)
        # truth 0.5: |0.9 - 0.5| = 0.4 > 1.96 * 0.1, so one CI misses
        assert row["coverage"] == pytest.approx(2.0 / 3.0)

    def test_records_equal_truth(self):
        names = ["alpha"]
        records = [stub_record(k, names, [2.0], [0.3]) for k in range(5)]
        rep = aggregate(records, {"alpha": 2.0})
        row = rep.row("alpha")
        assert row["bias_new"] == 0.0
        assert row["esd_new"] == 0.0
        assert row["coverage"] == 1.0

    def test_nonconverged_excluded_and_counted(self):
        names = ["alpha"]
        good = [stub_record(k, names, [1.0 + k]) for k in range(3)]
        bad = ReplicationRecord(rep_id=3, names=names,
                                estimates={"full": np.array([1.0]), "new": None,
                                           "samuelsen": None},
                                converged={"full": True, "new": False, "samuelsen": False},
                                cutoffs={"full": 0.1, "new": None, "samuelsen": None},
                                pert=None)
        rep = aggregate(good + [bad], {"alpha": 2.0})
        assert rep.nonconv["new"] == 1
        assert rep.nonconv["samuelsen"] == 1
        assert rep.row("alpha")["bias_new"] == pytest.approx(np.mean([1, 2, 3]) - 2.0)

    def test_needs_two_records(self):
        with pytest.raises(ValueError):
            aggregate([stub_record(0, ["alpha"], [1.0])], {"alpha": 1.0})


class TestSimulateCell:
    def test_end_to_end_deterministic_csv(self, tmp_path):
        cfg = small_config(n_reps=3, n_perturb=8)
        _, _, rep1 = simulate_cell(cfg, threads=1)
        _, _, rep2 = simulate_cell(cfg, threads=2)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_report_csv(rep1, p1)
        write_report_csv(rep2, p2)
        assert p1.read_bytes() == p2.read_bytes()
        header = p1.read_text().splitlines()[0]
        assert header == ("parameter,true,bias_full,bias_samuelsen,esd_samuelsen,"
                          "bias_new,esd_new,pase,coverage,nonconv_samuelsen,nonconv_new")

    def test_pi1_one_aggregate_rows_identical(self):
        cfg = small_config(pi1=1.0, n_reps=3, n_cohort=600)
        _, _, rep = simulate_cell(cfg)
        for row in rep.rows:
            if row["bias_new"] is not None:
                assert row["bias_new"] == row["bias_samuelsen"]
                assert row["esd_new"] == row["esd_samuelsen"]

    def test_matching_cell_runs(self):
        cfg = small_config(matching=True, n_cohort=500, n_reps=2)
        records, truths, rep = simulate_cell(cfg)
        assert len(records) == 2
        assert rep.n_reps == 2
