#!/usr/bin/env python3
"""
Unit tests for estimator.py: the row table, the outcome regression, the
optimal index, the psi solver and the bootstrap.
"""

import dataclasses
import functools
import os
import sys
from unittest.mock import patch

import numpy as np

# Add ctsftm/lib directory to path for imports (repo root)
REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
sys.path.insert(0, os.path.join(REPO_ROOT, "ctsftm", "lib"))

import estimator  # noqa: E402
import pytest  # noqa: E402
import scipy.optimize  # noqa: E402
from config import EstimatorConfig, scenario_config  # noqa: E402
from counterfactual import (  # noqa: E402
    EffectModifierMap,
    PsiVector,
    mimicking_gradient,
    mimicking_time,
)
from errors import (  # noqa: E402
    BootstrapError,
    ConvergenceError,
    DomainError,
    ExponentOverflowError,
    FeatureDimensionError,
    InputValidationError,
    NonIdentifiableError,
    SimulationError,
)
from estimator import (  # noqa: E402
    Nuisances,
    OptimalIndex,
    OutcomeFeatureMap,
    OutcomeRegressionModel,
    bootstrap_variance,
    build_cohort_design,
    build_exposure_table,
    c_opt,
    conditional_mean_U,
    estimating_function,
    evaluate_estimating_equations,
    fit_optimal_index,
    fit_weighted_least_squares,
    ipcw_weight,
    jacobian,
    solve_psi,
)
from hazards import (  # noqa: E402
    CensoringCoxModel,
    CensoringFeatureMap,
    RefillFeatureMap,
    RefillHazardModel,
    fit_censoring_cox,
    fit_refill_hazard,
)
from simulation import simulate_cohort  # noqa: E402
from trajectory import CovariateProcess  # noqa: E402

COVARIATES = ("l1", "l2")
CFG = EstimatorConfig(tolerance=1e-6, bootstrap_replicates=0)


@functools.lru_cache(maxsize=None)
def simulated(psi=(-0.5, 0.3), modifiers=("l1",), n=200, seed=3):
    """Small simulated cohort, generated once per parameter set."""
    scenario = scenario_config(
        {
            "n": n,
            "psi": list(psi),
            "effect_modifiers": list(modifiers),
            "baseline": {"rate": 1.0 / 300.0},
        }
    )
    return simulate_cohort(scenario, seed).subjects


def fitted_nuisances(cohort, modifiers=("l1",)):
    refill = fit_refill_hazard(cohort, RefillFeatureMap(COVARIATES, ()))
    censoring = fit_censoring_cox(cohort, CensoringFeatureMap(COVARIATES, ()))
    return Nuisances(
        refill=refill,
        censoring=censoring,
        effect_modifiers=EffectModifierMap(tuple(modifiers)),
        outcome_features=OutcomeFeatureMap(COVARIATES, ()),
        positivity_floor=None,
    )


def trivial_nuisances(outcome_features=None, outcome=None):
    """Constant refill hazard and no censoring events."""
    refill = RefillHazardModel(
        RefillFeatureMap((), (), include_refill_index=False), [], [0.0], [0.05]
    )
    censoring = CensoringCoxModel(
        CensoringFeatureMap((), ()), [], [], [], no_events=True
    )
    return Nuisances(
        refill=refill,
        censoring=censoring,
        effect_modifiers=EffectModifierMap.absent(),
        outcome_features=outcome_features or OutcomeFeatureMap((), ()),
        positivity_floor=None,
        outcome=outcome,
    )


def constant_followup(cohort):
    """Bootstrap statistic that ignores resampling when subjects are identical."""
    return np.array([np.mean([s.followup_time for s in cohort])])


def always_fails(cohort):
    raise SimulationError("replicate failed")


class TestWeightedLeastSquares:
    """Minimum-norm WLS."""

    def test_matches_normal_equations(self):
        """Test the coefficients solve X'WX b = X'Wy."""
        rng = np.random.default_rng(0)
        x = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
        y = rng.normal(size=50)
        w = rng.uniform(0.1, 2.0, size=50)
        expected = np.linalg.solve(x.T @ (w[:, None] * x), x.T @ (w * y))
        assert fit_weighted_least_squares(x, y, w) == pytest.approx(
            expected, rel=1e-10
        )

    def test_matrix_response(self):
        """Test each response column is fitted separately."""
        rng = np.random.default_rng(1)
        x = np.column_stack([np.ones(30), rng.normal(size=30)])
        y = rng.normal(size=(30, 2))
        w = np.ones(30)
        both = fit_weighted_least_squares(x, y, w)
        assert both[:, 1] == pytest.approx(
            fit_weighted_least_squares(x, y[:, 1], w), rel=1e-10
        )


class TestConditionalMeanU:
    """Outcome regression predictions."""

    def setup_method(self):
        """Model with two features fitted at psi = (0.1, 0.2)."""
        self.psi = PsiVector(0.1, np.array([0.2]))
        self.model = OutcomeRegressionModel(
            ("intercept", "l1"), np.array([2.0, 0.5]), self.psi, 1.0
        )

    def test_prediction(self):
        """Test a linear prediction per row."""
        features = np.array([[1.0, 4.0], [1.0, -2.0]])
        assert conditional_mean_U(self.psi, self.model, features).tolist() == [
            4.0,
            1.0,
        ]

    def test_feature_count(self):
        """Test a feature row of the wrong length is rejected."""
        with pytest.raises(FeatureDimensionError):
            conditional_mean_U(self.psi, self.model, np.ones((1, 3)))

    def test_other_psi(self):
        """Test a model fitted at another psi cannot be reused."""
        with pytest.raises(DomainError):
            conditional_mean_U(PsiVector(0.1), self.model, np.ones((1, 2)))


class TestOptimalIndex:
    """c_opt from row-level residuals and gradients."""

    def setup_method(self):
        """Four compensator rows and two refill rows, one feature."""
        self.features = np.ones((6, 1))
        self.residuals = np.array([1.0, -1.0, 1.0, -1.0, 0.0, 0.0])
        self.gradient = np.array([[0.0], [0.0], [0.0], [0.0], [3.0], [3.0]])
        self.fit_weights = np.array([0.25, 0.25, 0.25, 0.25, 0.0, 0.0])
        self.jump = np.array([False, False, False, False, True, True])

    def test_fitted_index(self):
        """Test c = E[dU residual at refill] / variance."""
        index = fit_optimal_index(
            self.features,
            self.residuals,
            self.gradient,
            self.fit_weights,
            self.jump,
            np.array([1.0, 2.0]),
        )
        assert index.variance == pytest.approx(1.0)
        assert not index.variance_floored
        assert c_opt(np.ones((1, 1)), index) == pytest.approx([[3.0]])

    def test_variance_floor(self):
        """Test a zero residual variance is floored."""
        index = fit_optimal_index(
            self.features,
            np.zeros(6),
            self.gradient,
            self.fit_weights,
            self.jump,
            np.array([1.0, 2.0]),
            variance_floor=1e-4,
        )
        assert index.variance_floored
        assert index.variance == 1e-4

    def test_scaling(self):
        """Test c_opt divides the linear index by the variance."""
        index = OptimalIndex(coef=np.array([[1.0, 2.0]]), variance=4.0)
        assert c_opt(np.array([[2.0]]), index).tolist() == [[0.5, 1.0]]


class TestExposureTable:
    """Row table built from fitted nuisances."""

    def test_matches_mimicking_time(self):
        """Test the table's U and dU/dpsi equal the direct computations."""
        cohort = simulated()[:40]
        nuisances = fitted_nuisances(simulated())
        g = nuisances.effect_modifiers
        table = build_exposure_table(
            cohort, nuisances.refill, g, nuisances.outcome_features
        )
        psi = PsiVector(-0.4, np.array([0.2]))
        U, elapsed, gradient = table.mimicking(psi)
        assert elapsed.shape == (len(table.row_piece),)
        for i, s in enumerate(cohort):
            assert U[i] == pytest.approx(mimicking_time(s, psi, g), rel=1e-10)
            assert gradient[i] == pytest.approx(
                mimicking_gradient(s, psi, g), rel=1e-8, abs=1e-8
            )

    def test_feature_columns(self):
        """Test the static features follow the map's names."""
        cohort = simulated()[:5]
        nuisances = fitted_nuisances(simulated())
        fm = nuisances.outcome_features
        table = build_exposure_table(
            cohort, nuisances.refill, nuisances.effect_modifiers, fm
        )
        _, elapsed, _ = table.mimicking(PsiVector(0.0, np.array([0.0])))
        assert table.features(elapsed).shape[1] == fm.dim
        assert fm.names[0] == "intercept"
        assert fm.names[-1] == "elapsed_mimicking"


class TestEstimatingFunction:
    """Per-subject estimating functions."""

    def test_censored_subject_contributes_zero(self):
        """Test Delta = 0 gives a zero contribution."""
        s = next(s for s in simulated() if s.event_indicator == 0)
        nuisances = trivial_nuisances()
        assert estimating_function(PsiVector(0.3), s, nuisances, CFG).tolist() == [
            0.0
        ]

    def test_perfect_outcome_regression(self):
        """Test a residual-free outcome model gives a zero contribution."""
        s = next(s for s in simulated() if s.event_indicator == 1)
        fm = OutcomeFeatureMap((), (), False, False, False)
        psi = PsiVector(0.3)
        U = mimicking_time(s, psi, EffectModifierMap.absent())
        outcome = OutcomeRegressionModel(("intercept",), np.array([U]), psi, 0.0)
        nuisances = trivial_nuisances(fm, outcome)
        value = estimating_function(psi, s, nuisances, CFG)
        assert value == pytest.approx([0.0], abs=1e-9)

    def test_requires_outcome_model(self):
        """Test Step 3 must have been fitted first."""
        s = next(s for s in simulated() if s.event_indicator == 1)
        with pytest.raises(ValueError):
            estimating_function(PsiVector(0.3), s, trivial_nuisances(), CFG)


class TestIPCW:
    """Inverse probability of censoring weights."""

    def test_censored_weight_zero(self):
        """Test censored subjects carry no weight."""
        s = next(s for s in simulated() if s.event_indicator == 0)
        assert ipcw_weight(s, trivial_nuisances().censoring) == 0.0

    def test_no_censoring_events(self):
        """Test S_C = 1 gives unit weights."""
        s = next(s for s in simulated() if s.event_indicator == 1)
        assert ipcw_weight(s, trivial_nuisances().censoring) == 1.0

    def test_no_uncensored_subjects(self):
        """Test a fully censored cohort cannot be analysed."""
        cohort = [dataclasses.replace(s, event_indicator=0) for s in simulated()[:10]]
        with pytest.raises(InputValidationError, match="no uncensored subjects"):
            build_cohort_design(cohort, trivial_nuisances())


class TestSolvePsi:
    """Newton-Raphson on the estimating equations."""

    def setup_method(self):
        """Nuisances fitted on the default small cohort."""
        self.cohort = simulated()
        self.design = build_cohort_design(self.cohort, fitted_nuisances(self.cohort))

    def test_converges(self):
        """Test the solver reaches the tolerance and reports its fits."""
        result = solve_psi(self.design, CFG)
        assert result.converged
        assert result.ee_norm <= CFG.tolerance
        assert result.psi_hat.dim == 2
        assert result.n_subjects == len(self.cohort)
        assert result.n_uncensored == sum(s.event_indicator for s in self.cohort)
        assert "outcome_regression" in result.nuisance_summaries
        assert result.trace[0]["iteration"] == 0

    def test_index_scale_invariance(self):
        """Test rescaling the index leaves the root unchanged."""
        base = solve_psi(self.design, CFG)
        scaled = solve_psi(
            self.design, CFG.model_copy(update={"index_scale": 10.0})
        )
        assert scaled.psi_hat.as_array() == pytest.approx(
            base.psi_hat.as_array(), abs=1e-5
        )

    def test_optimal_index(self):
        """Test the optimal index solves and records its variance."""
        cfg = CFG.model_copy(update={"index": "optimal"})
        result = solve_psi(self.design, cfg)
        assert result.converged
        assert result.index == "optimal"
        assert result.nuisance_summaries["optimal_index"]["variance"] > 0

    def test_iteration_limit(self):
        """Test ConvergenceError carries the last iterate as a result."""
        cfg = CFG.model_copy(update={"max_iterations": 1, "tolerance": 1e-300})
        with pytest.raises(ConvergenceError) as exc_info:
            solve_psi(self.design, cfg)
        result = exc_info.value.result
        assert result is not None
        assert not result.converged
        assert exc_info.value.last_iterate is not None

    def test_dimension_mismatch(self):
        """Test the initial psi must match the effect modifiers."""
        with pytest.raises(FeatureDimensionError):
            solve_psi(self.design, CFG, initial=PsiVector(0.0))

    def test_step_cap(self):
        """Test no psi component moves more than max_step per iteration."""
        base = solve_psi(self.design, CFG)
        capped = solve_psi(self.design, CFG.model_copy(update={"max_step": 0.05}))
        path = np.array([entry["psi"] for entry in capped.trace])
        assert np.all(np.abs(np.diff(path, axis=0)) <= 0.05 + 1e-12)
        assert capped.psi_hat.as_array() == pytest.approx(
            base.psi_hat.as_array(), abs=1e-5
        )

    def test_jacobian_overflow_is_convergence_error(self):
        """Test an uncomputable Jacobian stops the solve with its last iterate."""
        with patch.object(
            estimator, "jacobian", side_effect=ExponentOverflowError("overflow")
        ):
            with pytest.raises(ConvergenceError) as exc_info:
                solve_psi(self.design, CFG)
        assert exc_info.value.result is not None
        assert not exc_info.value.result.converged
        assert "Jacobian not computable" in str(exc_info.value)


class TestJacobian:
    """Finite-difference Jacobian of the estimating equations."""

    def setup_method(self):
        """Nuisances fitted on the default small cohort."""
        cohort = simulated()
        self.design = build_cohort_design(cohort, fitted_nuisances(cohort))
        self.psi = PsiVector.from_array([-0.4, 0.2])

    def test_one_sided_when_one_side_overflows(self):
        """Test a one-sided difference replaces an overflowing central one."""
        central = jacobian(self.psi, self.design, CFG)
        real = estimator._try_evaluate
        first = self.psi.as_array()[0]

        def upper_overflows(psi, design, cfg):
            if psi.as_array()[0] > first:
                return None
            return real(psi, design, cfg)

        with patch.object(estimator, "_try_evaluate", side_effect=upper_overflows):
            one_sided = jacobian(self.psi, self.design, CFG)
        assert one_sided == pytest.approx(central, rel=1e-3, abs=1e-6)

    def test_both_sides_overflow(self):
        """Test a column with no finite side raises ExponentOverflowError."""
        with patch.object(estimator, "_try_evaluate", return_value=None):
            with pytest.raises(ExponentOverflowError):
                jacobian(self.psi, self.design, CFG)

    def test_scalar_root_matches_bisection(self):
        """Test the Newton root against Brent's method for scalar psi."""
        cohort = simulated(psi=(-0.5,), modifiers=())
        design = build_cohort_design(cohort, fitted_nuisances(cohort, ()))
        result = solve_psi(design, CFG)

        def ee(p):
            return evaluate_estimating_equations(PsiVector(p), design, CFG).mean[0]

        p_hat = result.psi_hat.psi1
        root = scipy.optimize.brentq(ee, p_hat - 0.05, p_hat + 0.05, xtol=1e-10)
        assert p_hat == pytest.approx(root, abs=1e-4)


class TestNonIdentifiable:
    """A modifier with no variation cannot be identified."""

    def test_zero_effect_modifier(self):
        """Test a modifier that is identically zero gives a singular Jacobian."""
        cohort = []
        for s in simulated()[:120]:
            c = s.covariates
            zeros = np.zeros((len(c.change_times), 1))
            covariates = CovariateProcess(
                c.change_times, np.hstack([c.values, zeros]), COVARIATES + ("l0",)
            )
            cohort.append(dataclasses.replace(s, covariates=covariates))
        design = build_cohort_design(cohort, fitted_nuisances(cohort, ("l0",)))
        with pytest.raises(NonIdentifiableError) as exc_info:
            solve_psi(design, CFG)
        assert isinstance(exc_info.value, ConvergenceError)
        assert exc_info.value.result is not None


class TestBootstrap:
    """Subject-level bootstrap."""

    def test_identical_subjects(self):
        """Test resampling identical subjects gives zero spread."""
        s = simulated()[0]
        summary = bootstrap_variance([s] * 10, constant_followup, 20, seed=5)
        assert summary.se == pytest.approx([0.0], abs=1e-9)
        assert summary.ci[0][0] == pytest.approx(s.followup_time)
        assert summary.ci[0][1] == pytest.approx(s.followup_time)
        assert summary.failures == 0

    def test_deterministic(self):
        """Test the same seed reproduces the same replicates."""
        cohort = list(simulated()[:30])
        first = bootstrap_variance(cohort, constant_followup, 20, seed=9)
        second = bootstrap_variance(cohort, constant_followup, 20, seed=9)
        assert first.se == second.se
        assert first.ci == second.ci
        assert first.se[0] > 0

    def test_worker_count_does_not_matter(self):
        """Test one and two workers give identical replicates."""
        cohort = list(simulated()[:30])
        serial = bootstrap_variance(cohort, constant_followup, 20, seed=9, n_jobs=1)
        parallel = bootstrap_variance(cohort, constant_followup, 20, seed=9, n_jobs=2)
        assert serial == parallel

    def test_too_many_failures(self):
        """Test failing replicates raise BootstrapError with diagnostics."""
        with pytest.raises(BootstrapError) as exc_info:
            bootstrap_variance(list(simulated()[:5]), always_fails, 10, seed=1)
        assert exc_info.value.diagnostics["failures"] == 10
