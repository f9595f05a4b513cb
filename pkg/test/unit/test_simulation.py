#!/usr/bin/env python3
"""
Unit tests for simulation.py: the structural simulator and the scenario
helpers used by the Monte Carlo checks.
"""

import os
import sys

import numpy as np

# Add ctsftm/lib directory to path for imports (repo root)
REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
sys.path.insert(0, os.path.join(REPO_ROOT, "ctsftm", "lib"))

import pytest  # noqa: E402
from config import scenario_config  # noqa: E402
from counterfactual import EffectModifierMap, mimicking_time  # noqa: E402
from errors import ConfigError  # noqa: E402
from simulation import (  # noqa: E402
    TRUTH_SCHEMA_VERSION,
    _CovariateDraw,
    _refill_times,
    estimation_config_for,
    misspecify,
    simulate_cohort,
    simulate_subject,
)

FAST = {"n": 20, "baseline": {"rate": 1.0 / 300.0}}


def scenario(**overrides):
    merged = dict(FAST)
    merged.update(overrides)
    return scenario_config(merged)


class TestStructuralModel:
    """tau = U^{-1}(U) on the generated exposure path."""

    def test_null_effect(self):
        """Test psi = 0 makes the failure time equal U."""
        cohort = simulate_cohort(scenario(psi=[0.0, 0.0]), seed=1)
        for latent in cohort.latent:
            assert latent.tau == pytest.approx(latent.U, rel=1e-10)

    def test_always_treated(self):
        """Test continuous exposure gives tau = U e^{-psi1}."""
        cohort = simulate_cohort(
            scenario(psi=[-0.5], effect_modifiers=[], refill={"always_on": True}),
            seed=2,
        )
        for latent in cohort.latent:
            assert latent.tau == pytest.approx(latent.U * np.exp(0.5), rel=1e-10)

    def test_observed_data(self):
        """Test every subject has a refill and follow-up beyond V_K."""
        cohort = simulate_cohort(scenario(), seed=3)
        for s, latent in zip(cohort.subjects, cohort.latent):
            assert s.K >= 1
            assert s.followup_time > s.dispensations.refill_times[-1]
            assert s.followup_time == pytest.approx(
                min(latent.tau, latent.censoring_time)
            )
            assert s.event_indicator == int(latent.tau <= latent.censoring_time)
            assert s.baseline_names == ("x0_1",)
            assert s.covariates.names == ("l1", "l2")

    def test_censoring_after_last_refill(self):
        """Test censoring is only drawn after the last refill."""
        cohort = simulate_cohort(scenario(), seed=4)
        for s, latent in zip(cohort.subjects, cohort.latent):
            assert latent.censoring_time > s.dispensations.refill_times[-1]
            assert 0.0 <= latent.censoring_probability <= 1.0

    def test_mimicking_round_trip(self):
        """Test U recomputed from an uncensored observed path is the drawn U."""
        cohort = simulate_cohort(scenario(n=60), seed=8)
        g = EffectModifierMap(tuple(cohort.scenario.effect_modifiers))
        uncensored = [
            (s, latent)
            for s, latent in zip(cohort.subjects, cohort.latent)
            if s.event_indicator
        ]
        assert uncensored
        for s, latent in uncensored:
            assert mimicking_time(s, cohort.psi, g) == pytest.approx(
                latent.U, rel=1e-10
            )


class TestRefillLaw:
    """Two-phase gap-clock refill hazard."""

    def test_rate_switches_at_change_point(self):
        """Test the baseline rate drops to late_rate at the change point."""
        law = scenario_config().refill
        assert law.rate_at(0.0) == law.rate
        assert law.rate_at(law.change_point - 1e-9) == law.rate
        assert law.rate_at(law.change_point) == law.late_rate

    def test_single_phase_mean(self):
        """Test the mean gap is 1/rate without a change point."""
        law = scenario_config(
            {"refill": {"change_point": None, "late_rate": None}}
        ).refill
        assert law.rate_at(1e6) == law.rate
        assert law.mean_gap() == pytest.approx(1.0 / law.rate)

    def test_change_point_needs_late_rate(self):
        """Test a change point without a late rate is refused."""
        with pytest.raises(ConfigError):
            scenario_config({"refill": {"late_rate": None}})

    def test_gap_moments(self):
        """Test pooled simulated gaps follow the configured law."""
        free = scenario_config({"refill": {"gamma": {}}})
        law = free.refill
        gaps = []
        for i in range(25):
            rng = np.random.default_rng(i)
            covariates = _CovariateDraw(free, rng)
            refills = np.asarray(_refill_times(free, covariates, rng, 20000.0))
            gaps.extend(np.diff(refills) - (free.coverage_window - free.epsilon))
        gaps = np.asarray(gaps)
        se = gaps.std(ddof=1) / np.sqrt(len(gaps))
        assert abs(gaps.mean() - law.mean_gap()) <= 3.0 * se

        late = gaps > law.change_point
        p = np.exp(-law.rate * law.change_point)
        assert abs(late.mean() - p) <= 3.0 * np.sqrt(p * (1 - p) / len(gaps))

    def test_censoring_fraction(self):
        """Test the censored share matches the latent censoring probabilities."""
        cohort = simulate_cohort(scenario(n=500), seed=9)
        p = np.array([latent.censoring_probability for latent in cohort.latent])
        se = np.sqrt(np.mean(p * (1 - p)) / len(p))
        assert cohort.expected_censoring_fraction == pytest.approx(p.mean())
        assert abs(cohort.censoring_fraction - p.mean()) <= 3.0 * se


class TestReproducibility:
    """Per-subject random streams."""

    def test_same_seed_same_cohort(self):
        """Test a seed fully determines the cohort."""
        first = simulate_cohort(scenario(), seed=11)
        second = simulate_cohort(scenario(), seed=11)
        assert [s.id for s in first.subjects] == [s.id for s in second.subjects]
        assert [s.followup_time for s in first.subjects] == [
            s.followup_time for s in second.subjects
        ]

    def test_different_seed(self):
        """Test another seed gives another cohort."""
        first = simulate_cohort(scenario(), seed=11)
        second = simulate_cohort(scenario(), seed=12)
        assert [s.followup_time for s in first.subjects] != [
            s.followup_time for s in second.subjects
        ]

    def test_prefix_stable(self):
        """Test growing n leaves earlier subjects untouched."""
        small = simulate_cohort(scenario(n=5), seed=7)
        large = simulate_cohort(scenario(n=15), seed=7)
        for a, b in zip(small.subjects, large.subjects):
            assert a.id == b.id
            assert a.followup_time == b.followup_time
            assert a.dispensations.refill_times.tolist() == (
                b.dispensations.refill_times.tolist()
            )

    def test_single_subject(self):
        """Test a subject can be generated on its own."""
        cohort = simulate_cohort(scenario(n=3), seed=5)
        subject, latent = simulate_subject(cohort.scenario, 5, 2)
        assert subject.id == "S00003"
        assert latent.U == cohort.latent[2].U


class TestTruth:
    """Ground-truth record."""

    def test_contents(self):
        """Test the truth record carries psi and every subject."""
        cohort = simulate_cohort(scenario(n=8), seed=21)
        truth = cohort.truth()
        assert truth["schema_version"] == TRUTH_SCHEMA_VERSION
        assert truth["psi"] == [-0.5, 0.3]
        assert truth["effect_modifiers"] == ["l1"]
        assert truth["seed"] == 21
        assert len(truth["subjects"]) == 8
        assert 0.0 <= truth["censoring_fraction"] <= 1.0
        assert cohort.psi.to_list() == [-0.5, 0.3]


class TestScenarioValidation:
    """Scenario overrides are validated with dotted field names."""

    def test_negative_rate(self):
        """Test a negative refill rate names its field."""
        with pytest.raises(ConfigError) as exc_info:
            scenario_config({"refill": {"rate": -1.0}})
        assert exc_info.value.field == "simulation.refill.rate"

    def test_psi_dimension(self):
        """Test psi must match the effect modifiers."""
        with pytest.raises(ConfigError):
            scenario_config({"psi": [0.1], "effect_modifiers": ["l1"]})

    def test_unknown_covariate(self):
        """Test the generator only knows l1 and l2."""
        with pytest.raises(ConfigError):
            scenario_config({"censoring": {"gamma": {"age": 0.1}}})


class TestEstimationConfig:
    """Configurations analysing a simulated cohort."""

    def setup_method(self):
        """Default scenario."""
        self.scenario = scenario_config()

    def test_correct_specification(self):
        """Test every nuisance sees both scenario covariates."""
        config = estimation_config_for(self.scenario, "sim")
        assert config["model"]["effect_modifiers"] == ["l1"]
        assert config["refill_hazard"]["covariates"] == ["l1", "l2"]
        assert config["data"]["outcomes"] == "sim/outcomes.csv"

    def test_cut_points_follow_change_point(self):
        """Test the refill hazard is cut where the true baseline changes."""
        config = estimation_config_for(self.scenario)
        assert config["refill_hazard"]["cut_points"] == [15.0]

    def test_no_cut_points_without_change_point(self):
        """Test a single-phase law leaves the cut points to the quantiles."""
        single = scenario_config({"refill": {"change_point": None, "late_rate": None}})
        assert "cut_points" not in estimation_config_for(single)["refill_hazard"]

    def test_misspecify_drops_covariate(self):
        """Test misspecification removes l2 from one model only."""
        config = estimation_config_for(self.scenario)
        wrong = misspecify(config, self.scenario, "censoring")
        assert wrong["censoring"]["covariates"] == ["l1"]
        assert wrong["refill_hazard"]["covariates"] == ["l1", "l2"]
        assert config["censoring"]["covariates"] == ["l1", "l2"]

    def test_unknown_nuisance(self):
        """Test only the three nuisance models can be misspecified."""
        with pytest.raises(ConfigError):
            misspecify({}, self.scenario, "treatment")

    def test_inactive_covariate(self):
        """Test dropping a covariate the truth ignores is refused."""
        inactive = scenario_config({"refill": {"gamma": {"l1": 0.4}}})
        with pytest.raises(ConfigError):
            misspecify(estimation_config_for(inactive), inactive, "refill_hazard")
