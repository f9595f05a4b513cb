#!/usr/bin/env python3
"""
Unit tests for pipeline.py: settings resolution, Steps 1-3 and the
diagnostics report.
"""

import dataclasses
import functools
import os
import sys
from unittest.mock import patch

# Add ctsftm/lib directory to path for imports (repo root)
REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
sys.path.insert(0, os.path.join(REPO_ROOT, "ctsftm", "lib"))

from config import load_config, scenario_config, validate_config  # noqa: E402
from pipeline import (  # noqa: E402
    DIAGNOSTICS_SCHEMA_VERSION,
    AnalysisSettings,
    diagnose,
    estimate,
    fit_nuisances,
    positivity_violations,
    weight_summary,
)
from simulation import simulate_cohort  # noqa: E402


def run_config(**estimator):
    with patch.dict(os.environ, {"CTSFTM_TEST_MODE": ""}):
        config = load_config()
    config["model"] = {"effect_modifiers": ["l1"], "centers": [0.0]}
    config["estimator"].update({"bootstrap_replicates": 0, "tolerance": 1e-6})
    config["estimator"].update(estimator)
    return validate_config(config)


@functools.lru_cache(maxsize=None)
def cohort():
    scenario = scenario_config({"n": 300, "baseline": {"rate": 1.0 / 300.0}})
    return simulate_cohort(scenario, seed=13).subjects


@functools.lru_cache(maxsize=None)
def settings_and_nuisances():
    settings = AnalysisSettings.from_config(run_config(), ("l1", "l2"), ("x0_1",))
    return settings, fit_nuisances(cohort(), settings)


class TestAnalysisSettings:
    """Resolution of column selections."""

    def test_none_selects_every_column(self):
        """Test unset covariate lists pick up all ingested columns."""
        settings = AnalysisSettings.from_config(run_config(), ("l1", "l2"), ("x0_1",))
        assert settings.refill_features.covariates == ("l1", "l2")
        assert settings.censoring_features.covariates == ("l1", "l2")
        assert settings.outcome_features.covariates == ("l1", "l2")
        assert settings.outcome_features.baseline_covariates == ("x0_1",)
        assert settings.refill_features.baseline_covariates == ()
        assert settings.effect_modifiers.columns == ("l1",)
        assert settings.positivity_floor == 0.05

    def test_explicit_selection(self):
        """Test explicit lists are kept as given."""
        with patch.dict(os.environ, {"CTSFTM_TEST_MODE": ""}):
            config = load_config()
        config["refill_hazard"]["covariates"] = ["l2"]
        config["censoring"]["positivity_floor"] = 0.0
        settings = AnalysisSettings.from_config(
            validate_config(config), ("l1", "l2"), ()
        )
        assert settings.refill_features.covariates == ("l2",)
        assert settings.positivity_floor is None


class TestEstimate:
    """Point estimate through the pipeline."""

    def test_bootstrap_disabled(self):
        """Test B = 0 skips inference and says so."""
        settings, nuisances = settings_and_nuisances()
        result = estimate(cohort(), settings, seed=1, nuisances=nuisances)
        assert result.converged
        assert result.bootstrap_se is None
        assert "bootstrap disabled: no standard errors" in result.warnings
        payload = result.to_dict()
        assert len(payload["psi_hat"]) == 2
        assert payload["index"] == "simple"


class TestDiagnose:
    """Diagnostics report contents."""

    def test_report_sections(self):
        """Test every section of the report is present."""
        settings, nuisances = settings_and_nuisances()
        report = diagnose(cohort(), settings, nuisances)
        assert report["schema_version"] == DIAGNOSTICS_SCHEMA_VERSION
        assert report["n_subjects"] == len(cohort())
        assert set(report["martingale_means"]) == {"constant", "l1", "l2", "g:l1"}
        for entry in report["martingale_means"].values():
            assert entry["status"] in ("PASS", "FAIL")
        assert report["covariation"]["constant"]["status"] in ("PASS", "FAIL")
        assert set(report["followup"]) == {"coverage", "gaps", "terminal"}
        assert report["weights"]["min"] >= 1.0
        assert report["hazard_scale"] == 1.0

    def test_scaled_hazard(self):
        """Test doubling the refill hazard drives the martingale mean negative."""
        settings, nuisances = settings_and_nuisances()
        doubled = dataclasses.replace(
            settings,
            diagnostics=settings.diagnostics.model_copy(update={"hazard_scale": 2.0}),
        )
        report = diagnose(cohort(), doubled, nuisances)
        constant = report["martingale_means"]["constant"]
        assert report["hazard_scale"] == 2.0
        assert constant["mean"] < -3 * constant["se"]
        assert constant["status"] == "FAIL"


class TestWeights:
    """IPCW weight summaries and positivity."""

    def test_weight_summary(self):
        """Test the summary covers the uncensored subjects."""
        _, nuisances = settings_and_nuisances()
        summary = weight_summary(cohort(), nuisances.censoring)
        assert summary["n"] == sum(s.event_indicator for s in cohort())
        assert summary["min"] <= summary["mean"] <= summary["max"]
        assert 0 < summary["ess"] <= summary["n"]

    def test_positivity_violations(self):
        """Test a strict floor flags subjects and no floor flags none."""
        _, nuisances = settings_and_nuisances()
        strict = positivity_violations(cohort(), nuisances.censoring, 0.9999)
        assert strict["count"] > 0
        assert strict["count"] == len(strict["subjects"])
        assert positivity_violations(cohort(), nuisances.censoring, None)["count"] == 0
