#!/usr/bin/env python3
"""
Steps 1-3 of the estimation procedure and the diagnostics report.

The commands and the bootstrap both go through ``estimate_psi`` so a
replicate refits every nuisance model exactly as the point estimate does.
"""

import functools
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import DiagnosticsSection, EstimatorConfig, RunConfig
from counterfactual import EffectModifierMap, PsiVector
from errors import PositivityViolationError
from estimator import (
    EstimationResult,
    Nuisances,
    OutcomeFeatureMap,
    bootstrap_variance,
    build_cohort_design,
    ipcw_weight,
    solve_psi,
)
from hazards import (
    CensoringCoxModel,
    CensoringFeatureMap,
    RefillFeatureMap,
    RefillHazardModel,
    censoring_survival,
    fit_censoring_cox,
    fit_refill_hazard,
)
from martingale import covariation_diagnostic, mean_zero_check
from trajectory import History, SubjectTrajectory, followup_decomposition

logger = logging.getLogger(__name__)

DIAGNOSTICS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class AnalysisSettings:
    """Everything Steps 1-3 need, resolved against the ingested columns."""

    effect_modifiers: EffectModifierMap
    refill_features: RefillFeatureMap
    n_pieces: int
    include_terminal_gap: bool
    refill_max_iterations: int
    refill_tolerance: float
    censoring_features: CensoringFeatureMap
    censoring_max_iterations: int
    censoring_tolerance: float
    positivity_floor: Optional[float]
    outcome_features: OutcomeFeatureMap
    estimator: EstimatorConfig
    diagnostics: Optional[DiagnosticsSection] = None
    cut_points: Optional[Tuple[float, ...]] = None

    @classmethod
    def from_config(
        cls,
        run_config: RunConfig,
        covariate_names: Sequence[str],
        baseline_names: Sequence[str],
    ) -> "AnalysisSettings":
        """Resolve ``None`` selections to every ingested column."""

        def pick(selected: Optional[List[str]], available: Sequence[str]) -> tuple:
            return tuple(available) if selected is None else tuple(selected)

        refill = run_config.refill_hazard
        censoring = run_config.censoring
        outcome = run_config.outcome_regression
        return cls(
            effect_modifiers=EffectModifierMap(
                tuple(run_config.model.effect_modifiers),
                tuple(run_config.model.centers),
            ),
            refill_features=RefillFeatureMap(
                pick(refill.covariates, covariate_names),
                tuple(refill.baseline_covariates),
                refill.include_refill_index,
            ),
            n_pieces=refill.n_pieces,
            include_terminal_gap=refill.include_terminal_gap,
            refill_max_iterations=refill.max_iterations,
            refill_tolerance=refill.tolerance,
            censoring_features=CensoringFeatureMap(
                pick(censoring.covariates, covariate_names),
                tuple(censoring.baseline_covariates),
                censoring.include_treatment,
            ),
            censoring_max_iterations=censoring.max_iterations,
            censoring_tolerance=censoring.tolerance,
            positivity_floor=censoring.positivity_floor or None,
            outcome_features=OutcomeFeatureMap(
                pick(outcome.covariates, covariate_names),
                pick(outcome.baseline_covariates, baseline_names),
                outcome.include_gap_clock,
                outcome.include_refill_index,
                outcome.include_elapsed_mimicking,
            ),
            estimator=run_config.estimator,
            diagnostics=run_config.diagnostics,
            cut_points=(
                None if refill.cut_points is None else tuple(refill.cut_points)
            ),
        )


def fit_refill_step(
    cohort: Sequence[SubjectTrajectory], settings: AnalysisSettings
) -> RefillHazardModel:
    """Step 1: refill gap-time hazard."""
    return fit_refill_hazard(
        cohort,
        settings.refill_features,
        n_pieces=settings.n_pieces,
        include_terminal_gap=settings.include_terminal_gap,
        max_iterations=settings.refill_max_iterations,
        tolerance=settings.refill_tolerance,
        cut_points=settings.cut_points,
    )


def fit_censoring_step(
    cohort: Sequence[SubjectTrajectory], settings: AnalysisSettings
) -> CensoringCoxModel:
    """Step 2: censoring Cox model with Breslow baseline."""
    return fit_censoring_cox(
        cohort,
        settings.censoring_features,
        max_iterations=settings.censoring_max_iterations,
        tolerance=settings.censoring_tolerance,
    )


def fit_nuisances(
    cohort: Sequence[SubjectTrajectory],
    settings: AnalysisSettings,
    refill: Optional[RefillHazardModel] = None,
    censoring: Optional[CensoringCoxModel] = None,
) -> Nuisances:
    """Fit (or reuse) the Step 1 and Step 2 models."""
    if refill is None:
        refill = fit_refill_step(cohort, settings)
    if censoring is None:
        censoring = fit_censoring_step(cohort, settings)
    return Nuisances(
        refill=refill,
        censoring=censoring,
        effect_modifiers=settings.effect_modifiers,
        outcome_features=settings.outcome_features,
        positivity_floor=settings.positivity_floor,
    )


def estimate_psi(
    cohort: Sequence[SubjectTrajectory],
    settings: AnalysisSettings,
    nuisances: Optional[Nuisances] = None,
    initial: Optional[PsiVector] = None,
) -> EstimationResult:
    """Steps 1-3 without inference."""
    if nuisances is None:
        nuisances = fit_nuisances(cohort, settings)
    design = build_cohort_design(cohort, nuisances)
    return solve_psi(design, settings.estimator, initial)


def _refit_psi(
    settings: AnalysisSettings,
    initial: PsiVector,
    cohort: List[SubjectTrajectory],
) -> np.ndarray:
    return estimate_psi(cohort, settings, initial=initial).psi_hat.as_array()


def estimate(
    cohort: Sequence[SubjectTrajectory],
    settings: AnalysisSettings,
    seed: int,
    nuisances: Optional[Nuisances] = None,
) -> EstimationResult:
    """
    Point estimate plus bootstrap inference.

    Raises:
        ConvergenceError: the point estimate did not converge
        BootstrapError: too many bootstrap replicates failed
    """
    result = estimate_psi(cohort, settings, nuisances)
    cfg = settings.estimator
    if cfg.bootstrap_replicates == 0:
        result.warnings.append("bootstrap disabled: no standard errors")
        return result

    logger.info("Running %d bootstrap replicates", cfg.bootstrap_replicates)
    summary = bootstrap_variance(
        list(cohort),
        functools.partial(_refit_psi, settings, result.psi_hat),
        cfg.bootstrap_replicates,
        seed,
        confidence_level=cfg.confidence_level,
        n_jobs=cfg.n_jobs,
        max_failure_fraction=cfg.max_failure_fraction,
    )
    result.bootstrap_se = summary.se
    result.bootstrap_ci = summary.ci
    result.bootstrap_failures = summary.failures
    if summary.failures:
        result.warnings.append(
            f"{summary.failures} of {summary.replicates} bootstrap replicates failed"
        )
    return result


def _constant(history: History, k: int, u: float) -> float:
    return 1.0


def _covariate_integrand(name: str, center: float = 0.0) -> Any:
    def integrand(history: History, k: int, u: float) -> float:
        return history.covariate(name) - center

    return integrand


def weight_summary(
    cohort: Sequence[SubjectTrajectory], censoring: CensoringCoxModel
) -> Dict[str, Any]:
    """IPCW weights of uncensored subjects, floor disabled."""
    weights = np.array(
        [ipcw_weight(s, censoring) for s in cohort if s.event_indicator == 1]
    )
    if len(weights) == 0:
        return {"n": 0}
    return {
        "n": int(len(weights)),
        "min": float(weights.min()),
        "max": float(weights.max()),
        "mean": float(weights.mean()),
        "ess": float(weights.sum() ** 2 / np.sum(weights**2)),
        "cohort_mean": float(weights.sum() / len(cohort)),
    }


def positivity_violations(
    cohort: Sequence[SubjectTrajectory],
    censoring: CensoringCoxModel,
    floor: Optional[float],
) -> Dict[str, Any]:
    """Uncensored subjects whose S_C(X) is below the floor."""
    offenders = []
    for s in cohort:
        if s.event_indicator == 0 or floor is None:
            continue
        try:
            censoring_survival(censoring, s, s.followup_time, floor)
        except PositivityViolationError as e:
            offenders.append({"subject": s.id, "survival": e.value})
    return {"floor": floor, "count": len(offenders), "subjects": offenders}


def diagnose(
    cohort: Sequence[SubjectTrajectory],
    settings: AnalysisSettings,
    nuisances: Optional[Nuisances] = None,
) -> Dict[str, Any]:
    """
    Martingale and weight diagnostics for fitted nuisance models.

    The refill baseline is multiplied by ``diagnostics.hazard_scale`` before
    the martingale checks, so a deliberately wrong hazard can be inspected.
    """
    diagnostics = settings.diagnostics or DiagnosticsSection(
        output="ctsftm_diagnostics.json", covariation_tolerance=0.25, hazard_scale=1.0
    )
    if nuisances is None:
        nuisances = fit_nuisances(cohort, settings)
    refill = nuisances.refill
    if diagnostics.hazard_scale != 1.0:
        logger.info("Refill baseline scaled by %g", diagnostics.hazard_scale)
        refill = refill.scaled(diagnostics.hazard_scale)

    integrands = {"constant": _constant}
    for name in refill.feature_map.covariates:
        integrands[name] = _covariate_integrand(name)
    g = nuisances.effect_modifiers
    for name, center in zip(g.columns, g.centers):
        integrands[f"g:{name}"] = _covariate_integrand(name, center)

    means = {}
    for name, f in integrands.items():
        report = mean_zero_check(f, cohort, refill)
        means[name] = report.to_dict()
        logger.info(
            "Martingale mean for %s: %.4g (SE %.4g) %s",
            name,
            report.mean,
            report.se,
            means[name]["status"],
        )

    covariation = covariation_diagnostic(_constant, _constant, cohort, refill)
    tolerance = diagnostics.covariation_tolerance
    within = abs(covariation.ratio - 1.0) <= tolerance
    covariation_entry = dict(covariation.to_dict(), tolerance=tolerance)
    covariation_entry["status"] = "PASS" if within else "FAIL"

    decomposition = [followup_decomposition(s) for s in cohort]
    return {
        "schema_version": DIAGNOSTICS_SCHEMA_VERSION,
        "n_subjects": len(cohort),
        "n_uncensored": sum(s.event_indicator for s in cohort),
        "hazard_scale": diagnostics.hazard_scale,
        "martingale_means": means,
        "covariation": {"constant": covariation_entry},
        "weights": weight_summary(cohort, nuisances.censoring),
        "positivity": positivity_violations(
            cohort, nuisances.censoring, settings.positivity_floor
        ),
        "followup": {
            key: float(np.mean([d[key] for d in decomposition]))
            for key in ("coverage", "gaps", "terminal")
        },
        "refill_hazard": refill.summary(),
        "censoring": nuisances.censoring.summary(),
    }
