#!/usr/bin/env python3
"""
Doubly-robust IPCW g-estimation of psi.

For every uncensored subject the estimating function is

    w_i * sum_k int c(history) [U_i(psi) - E{U_i(psi) | history, T_k >= u}] dM_ik(u)

with w_i = 1 / S_C(tau_i). The integral is evaluated on a row table: each
compensator piece contributes Simpson nodes (a, mid, b) and each refill one
jump row. Integrands that are quadratic in the gap clock are integrated
exactly; the same nodes give the time-integrated least squares fit of the
outcome regression.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed

from config import EstimatorConfig
from counterfactual import EXPONENT_LIMIT, EffectModifierMap, PsiVector
from errors import (
    BootstrapError,
    ConvergenceError,
    CtsftmError,
    DomainError,
    ExponentOverflowError,
    FeatureDimensionError,
    InputValidationError,
    NonIdentifiableError,
)
from hazards import CensoringCoxModel, RefillHazardModel, censoring_survival
from martingale import JUMP_FACTOR, SIMPSON_WEIGHTS
from trajectory import SubjectTrajectory

logger = logging.getLogger(__name__)

# Relative singular-value threshold for a rank-deficient Jacobian
SINGULAR_TOLERANCE = 1e-8


@dataclass(frozen=True, eq=False)
class OutcomeFeatureMap:
    """Regressors of the outcome regression."""

    covariates: Tuple[str, ...] = ()
    baseline_covariates: Tuple[str, ...] = ()
    include_gap_clock: bool = True
    include_refill_index: bool = True
    include_elapsed_mimicking: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "baseline_covariates", tuple(self.baseline_covariates))

    @property
    def names(self) -> Tuple[str, ...]:
        names = ("intercept",) + self.baseline_covariates + self.covariates
        if self.include_gap_clock:
            names += ("gap_clock",)
        if self.include_refill_index:
            names += ("refill_index",)
        if self.include_elapsed_mimicking:
            names += ("elapsed_mimicking",)
        return names

    @property
    def dim(self) -> int:
        return len(self.names)


@dataclass(frozen=True, eq=False)
class ExposureTable:
    """Pieces and integrand rows of a set of subjects."""

    n_subjects: int
    subject: np.ndarray
    length: np.ndarray
    treated: np.ndarray
    gvals: np.ndarray
    row_piece: np.ndarray
    row_offset: np.ndarray
    row_dm: np.ndarray
    row_fit_weight: np.ndarray
    row_jump: np.ndarray
    static_features: np.ndarray
    feature_map: OutcomeFeatureMap

    @property
    def row_subject(self) -> np.ndarray:
        return self.subject[self.row_piece]

    @property
    def dim(self) -> int:
        return 1 + self.gvals.shape[1]

    def exponents(self, psi: PsiVector) -> np.ndarray:
        if psi.dim != self.dim:
            raise FeatureDimensionError(
                f"psi has dimension {psi.dim}, effect modifiers need {self.dim}"
            )
        eta = psi.psi1 + self.gvals @ psi.psi2
        on = self.treated.astype(bool)
        bad = on & ~(np.abs(eta) <= EXPONENT_LIMIT)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ExponentOverflowError(
                f"exponent {eta[i]:.4g} on a treated segment exceeds "
                f"+-{EXPONENT_LIMIT}",
                segment=(int(self.subject[i]), i),
            )
        return np.where(on, eta, 0.0)

    def mimicking(self, psi: PsiVector) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        U_i(psi), elapsed mimicking time at every row, and dU_i/dpsi.

        Returns:
            tuple: (U per subject, elapsed per row, gradient n x p)
        """
        rate = np.exp(self.exponents(psi))
        contrib = self.length * rate
        total = np.bincount(self.subject, weights=contrib, minlength=self.n_subjects)

        running = np.cumsum(contrib) - contrib
        first = np.searchsorted(self.subject, np.arange(self.n_subjects))
        start = running - running[first][self.subject]
        elapsed = start[self.row_piece] + rate[self.row_piece] * self.row_offset

        design = np.column_stack([np.ones(len(contrib)), self.gvals])
        weights = contrib * self.treated
        gradient = np.column_stack(
            [
                np.bincount(
                    self.subject,
                    weights=weights * design[:, j],
                    minlength=self.n_subjects,
                )
                for j in range(self.dim)
            ]
        )
        return total, elapsed, gradient

    def features(self, elapsed: np.ndarray) -> np.ndarray:
        if self.feature_map.include_elapsed_mimicking:
            return np.column_stack([self.static_features, elapsed])
        return self.static_features


def build_exposure_table(
    subjects: Sequence[SubjectTrajectory],
    refill: RefillHazardModel,
    g: EffectModifierMap,
    feature_map: OutcomeFeatureMap,
) -> ExposureTable:
    """Partition each subject's follow-up and lay out Simpson and jump rows."""
    subject, length, treated, gvals = [], [], [], []
    row_piece, row_offset, row_dm, row_fit, row_jump, static = [], [], [], [], [], []
    base = 0
    for i, s in enumerate(subjects):
        part = refill.partition(s)
        rates = refill.piece_rates(s, part)
        values = s.covariates.values[part.covariate_rows]
        n_pieces = len(part.start)
        subject.append(np.full(n_pieces, i))
        length.append(part.length)
        treated.append(part.treated)
        gvals.append(g.evaluate(values, s.covariates.names).reshape(n_pieces, g.dim))

        risk = np.flatnonzero(part.gap > 0)
        gap = part.gap[risk]
        last = risk[np.r_[gap[1:] != gap[:-1], True] & (gap <= s.K)]
        total_risk_time = float(np.sum(part.length[risk]))

        pieces, offsets, dm, fit, jump = [], [], [], [], []
        for fraction, weight in zip((0.0, 0.5, 1.0), SIMPSON_WEIGHTS):
            pieces.append(risk)
            offsets.append(fraction * part.length[risk])
            dm.append(-weight * rates[risk] * part.length[risk])
            fit.append(weight * part.length[risk] / total_risk_time)
            jump.append(np.zeros(len(risk), dtype=bool))
        pieces.append(last)
        offsets.append(part.length[last])
        dm.append(np.ones(len(last)))
        fit.append(np.zeros(len(last)))
        jump.append(np.ones(len(last), dtype=bool))

        pieces_i = np.concatenate(pieces)
        offsets_i = np.concatenate(offsets)
        u = part.gap_clock[pieces_i] + offsets_i
        columns = [np.ones(len(pieces_i))]
        columns += [
            np.full(len(pieces_i), s.baseline_value(name))
            for name in feature_map.baseline_covariates
        ]
        columns += [
            values[pieces_i, s.covariates.index_of(name)]
            for name in feature_map.covariates
        ]
        if feature_map.include_gap_clock:
            columns.append(u)
        if feature_map.include_refill_index:
            columns.append(part.gap[pieces_i].astype(float))

        row_piece.append(base + pieces_i)
        row_offset.append(offsets_i)
        row_dm.append(np.concatenate(dm))
        row_fit.append(np.concatenate(fit))
        row_jump.append(np.concatenate(jump))
        static.append(np.column_stack(columns))
        base += n_pieces

    return ExposureTable(
        n_subjects=len(subjects),
        subject=np.concatenate(subject).astype(int),
        length=np.concatenate(length),
        treated=np.concatenate(treated),
        gvals=np.vstack(gvals),
        row_piece=np.concatenate(row_piece),
        row_offset=np.concatenate(row_offset),
        row_dm=np.concatenate(row_dm),
        row_fit_weight=np.concatenate(row_fit),
        row_jump=np.concatenate(row_jump),
        static_features=np.vstack(static),
        feature_map=feature_map,
    )


def fit_weighted_least_squares(
    features: np.ndarray, response: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """Minimum-norm weighted least squares coefficients (response may be 2-D)."""
    root = np.sqrt(weights)
    if response.ndim == 1:
        scaled = response * root
    else:
        scaled = response * root[:, None]
    coef, _, _, _ = scipy.linalg.lstsq(features * root[:, None], scaled)
    return coef


@dataclass(frozen=True, eq=False)
class OutcomeRegressionModel:
    """Linear model for E{U(psi) | history, T_k >= u}, fitted at ``psi``."""

    feature_names: Tuple[str, ...]
    xi: np.ndarray
    psi: PsiVector
    residual_variance: float

    def summary(self) -> Dict[str, Any]:
        return {
            "features": list(self.feature_names),
            "xi": self.xi.tolist(),
            "psi": self.psi.to_list(),
            "residual_variance": self.residual_variance,
        }


def conditional_mean_U(
    psi: PsiVector, orm: OutcomeRegressionModel, features: np.ndarray
) -> np.ndarray:
    """
    Predicted U(psi) at risk points.

    Raises:
        FeatureDimensionError: features do not match the fitted model
        DomainError: the model was fitted at another psi
    """
    features = np.atleast_2d(features)
    if features.shape[1] != len(orm.xi):
        raise FeatureDimensionError(
            f"{features.shape[1]} features given, model has {len(orm.xi)}"
        )
    if not np.array_equal(psi.as_array(), orm.psi.as_array()):
        raise DomainError(f"outcome regression fitted at {orm.psi}, not {psi}")
    return features @ orm.xi


@dataclass(frozen=True, eq=False)
class OptimalIndex:
    """c_opt(row) = features @ coef / (jump factor * variance)."""

    coef: np.ndarray
    variance: float
    variance_floored: bool = False


def c_opt(features: np.ndarray, index: OptimalIndex) -> np.ndarray:
    return np.atleast_2d(features) @ index.coef / (JUMP_FACTOR * index.variance)


def fit_optimal_index(
    features: np.ndarray,
    residuals: np.ndarray,
    gradient: np.ndarray,
    fit_weights: np.ndarray,
    jump: np.ndarray,
    jump_weights: np.ndarray,
    variance_floor: float = 1e-8,
) -> OptimalIndex:
    """
    Fit the optimal index from row-level quantities.

    The conditional variance is the pooled weighted residual variance over
    compensator rows. The gradient of the residual is dU minus its risk-set
    regression; its expectation at refills comes from regressing those
    residuals on the jump rows.

    Args:
        features: regressors per row
        residuals: U - E{U | history} per row
        gradient: dU_i/dpsi of the row's subject (rows x p)
        fit_weights: time-integration weights (zero on jump rows)
        jump: mask of jump rows
        jump_weights: IPCW weights of the jump rows' subjects
        variance_floor: lower bound on the variance
    """
    risk = ~jump
    total = float(np.sum(fit_weights[risk]))
    variance = float(np.sum(fit_weights[risk] * residuals[risk] ** 2) / total)
    floored = variance < variance_floor
    if floored:
        logger.warning(
            "residual variance %.3g floored at %.3g", variance, variance_floor
        )
        variance = variance_floor
    slope = fit_weighted_least_squares(
        features[risk], gradient[risk], fit_weights[risk]
    )
    gradient_residual = gradient[jump] - features[jump] @ slope
    coef = fit_weighted_least_squares(features[jump], gradient_residual, jump_weights)
    return OptimalIndex(coef=coef, variance=variance, variance_floored=floored)


def ipcw_weight(
    s: SubjectTrajectory,
    cm: CensoringCoxModel,
    positivity_floor: Optional[float] = None,
) -> float:
    """Delta / S_C(tau | history); zero for censored subjects."""
    if s.event_indicator == 0:
        return 0.0
    return 1.0 / censoring_survival(cm, s, s.followup_time, positivity_floor)


@dataclass(frozen=True, eq=False)
class Nuisances:
    """Fitted Step 1-2 models plus the Step 3 specification."""

    refill: RefillHazardModel
    censoring: CensoringCoxModel
    effect_modifiers: EffectModifierMap
    outcome_features: OutcomeFeatureMap
    positivity_floor: Optional[float] = 0.05
    outcome: Optional[OutcomeRegressionModel] = None
    index: Optional[OptimalIndex] = None

    def with_step3(
        self, outcome: OutcomeRegressionModel, index: Optional[OptimalIndex]
    ) -> "Nuisances":
        return Nuisances(
            self.refill,
            self.censoring,
            self.effect_modifiers,
            self.outcome_features,
            self.positivity_floor,
            outcome,
            index,
        )


@dataclass(frozen=True, eq=False)
class CohortDesign:
    """Uncensored subjects, their weights and row table."""

    nuisances: Nuisances
    subjects: Tuple[SubjectTrajectory, ...]
    weights: np.ndarray
    n_total: int
    table: ExposureTable


def build_cohort_design(
    cohort: Sequence[SubjectTrajectory], nuisances: Nuisances
) -> CohortDesign:
    """
    Select uncensored subjects and compute their IPCW weights.

    Raises:
        InputValidationError: no uncensored subjects
        PositivityViolationError: a weight denominator below the floor
    """
    subjects = tuple(s for s in cohort if s.event_indicator == 1)
    if not subjects:
        raise InputValidationError("no uncensored subjects")
    floor = nuisances.positivity_floor
    weights = np.array([ipcw_weight(s, nuisances.censoring, floor) for s in subjects])
    table = build_exposure_table(
        subjects,
        nuisances.refill,
        nuisances.effect_modifiers,
        nuisances.outcome_features,
    )
    return CohortDesign(nuisances, subjects, weights, len(cohort), table)


@dataclass(frozen=True, eq=False)
class EstimatingEquationFit:
    """Per-subject estimating functions at psi with the Step 3 fits used."""

    psi: PsiVector
    per_subject: np.ndarray
    mean: np.ndarray
    outcome: OutcomeRegressionModel
    index: Optional[OptimalIndex]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.mean))


def _index_values(
    table: ExposureTable,
    features: np.ndarray,
    cfg: EstimatorConfig,
    index: Optional[OptimalIndex],
) -> np.ndarray:
    if cfg.index == "optimal":
        assert index is not None
        return cfg.index_scale * c_opt(features, index)
    ones = np.ones(len(table.row_piece))
    simple = np.column_stack([ones, table.gvals[table.row_piece]])
    return cfg.index_scale * simple


def _integrate(
    table: ExposureTable,
    weights: np.ndarray,
    U: np.ndarray,
    predicted: np.ndarray,
    index_values: np.ndarray,
) -> np.ndarray:
    rows = table.row_subject
    residual_dm = (U[rows] - predicted) * table.row_dm
    per_subject = np.column_stack(
        [
            np.bincount(
                rows,
                weights=index_values[:, j] * residual_dm,
                minlength=table.n_subjects,
            )
            for j in range(index_values.shape[1])
        ]
    )
    return weights[:, None] * per_subject


def evaluate_estimating_equations(
    psi: PsiVector, design: CohortDesign, cfg: EstimatorConfig
) -> EstimatingEquationFit:
    """Refit the outcome (and gradient) regressions at psi and evaluate P_n EE."""
    table = design.table
    U, elapsed, gradient = table.mimicking(psi)
    features = table.features(elapsed)
    rows = table.row_subject
    fit_weights = design.weights[rows] * table.row_fit_weight
    risk = ~table.row_jump

    xi = fit_weighted_least_squares(features[risk], U[rows][risk], fit_weights[risk])
    predicted = features @ xi
    residuals = U[rows] - predicted
    variance = float(
        np.sum(fit_weights[risk] * residuals[risk] ** 2) / np.sum(fit_weights[risk])
    )
    outcome = OutcomeRegressionModel(table.feature_map.names, xi, psi, variance)

    index = None
    if cfg.index == "optimal":
        index = fit_optimal_index(
            features,
            residuals,
            gradient[rows],
            fit_weights,
            table.row_jump,
            design.weights[rows][table.row_jump],
            cfg.variance_floor,
        )
    values = _index_values(table, features, cfg, index)
    per_subject = _integrate(table, design.weights, U, predicted, values)
    mean = per_subject.sum(axis=0) / design.n_total
    return EstimatingEquationFit(psi, per_subject, mean, outcome, index)


def estimating_function(
    psi: PsiVector,
    s: SubjectTrajectory,
    nuisances: Nuisances,
    cfg: EstimatorConfig,
) -> np.ndarray:
    """
    Estimating function of one subject, using the Step 3 fits in ``nuisances``.

    Raises:
        PositivityViolationError: S_C(tau) below the floor
        ValueError: outcome regression missing or fitted at another psi
    """
    if s.event_indicator == 0:
        return np.zeros(psi.dim)
    if nuisances.outcome is None:
        raise ValueError("outcome regression has not been fitted")
    weight = ipcw_weight(s, nuisances.censoring, nuisances.positivity_floor)
    table = build_exposure_table(
        [s], nuisances.refill, nuisances.effect_modifiers, nuisances.outcome_features
    )
    U, elapsed, _ = table.mimicking(psi)
    features = table.features(elapsed)
    predicted = conditional_mean_U(psi, nuisances.outcome, features)
    values = _index_values(table, features, cfg, nuisances.index)
    return _integrate(table, np.array([weight]), U, predicted, values)[0]


@dataclass
class EstimationResult:
    """Outcome of the psi solver, with inference filled in by the pipeline."""

    psi_hat: PsiVector
    ee_norm: float
    iterations: int
    converged: bool
    index: str = "simple"
    n_subjects: int = 0
    n_uncensored: int = 0
    bootstrap_se: Optional[List[float]] = None
    bootstrap_ci: Optional[List[List[float]]] = None
    bootstrap_failures: int = 0
    nuisance_summaries: Dict[str, Any] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    trace: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "psi_hat": self.psi_hat.to_list(),
            "ee_norm": self.ee_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "index": self.index,
            "n_subjects": self.n_subjects,
            "n_uncensored": self.n_uncensored,
            "bootstrap_se": self.bootstrap_se,
            "bootstrap_ci": self.bootstrap_ci,
            "bootstrap_failures": self.bootstrap_failures,
            "nuisances": self.nuisance_summaries,
            "warnings": list(self.warnings),
            "trace": list(self.trace),
        }


def _try_evaluate(
    psi: PsiVector, design: CohortDesign, cfg: EstimatorConfig
) -> Optional[EstimatingEquationFit]:
    try:
        return evaluate_estimating_equations(psi, design, cfg)
    except ExponentOverflowError as e:
        logger.debug("overflow at psi=%s: %s", psi, e)
        return None


def _trace_entry(
    iteration: int, fit: EstimatingEquationFit, step: float
) -> Dict[str, Any]:
    return {
        "iteration": iteration,
        "psi": fit.psi.to_list(),
        "ee_norm": fit.norm,
        "step": step,
    }


def jacobian(
    psi: PsiVector,
    design: CohortDesign,
    cfg: EstimatorConfig,
    at_psi: Optional[EstimatingEquationFit] = None,
) -> np.ndarray:
    """
    Central finite-difference Jacobian of P_n EE, step 1e-5 (1 + |psi_j|).

    When one side of a difference overflows, the one-sided difference from
    ``psi`` is used instead.

    Raises:
        ExponentOverflowError: both sides of a difference overflow
    """
    center = psi.as_array()
    columns = []
    for j in range(len(center)):
        h = 1e-5 * (1.0 + abs(center[j]))
        up, down = center.copy(), center.copy()
        up[j] += h
        down[j] -= h
        f_up = _try_evaluate(PsiVector.from_array(up), design, cfg)
        f_down = _try_evaluate(PsiVector.from_array(down), design, cfg)
        if f_up is not None and f_down is not None:
            columns.append((f_up.mean - f_down.mean) / (2.0 * h))
            continue
        if f_up is None and f_down is None:
            raise ExponentOverflowError(
                f"Jacobian column {j} overflows on both sides of psi={psi}"
            )
        if at_psi is None:
            at_psi = evaluate_estimating_equations(psi, design, cfg)
        if f_up is not None:
            columns.append((f_up.mean - at_psi.mean) / h)
        else:
            columns.append((at_psi.mean - f_down.mean) / h)
    return np.column_stack(columns)


def _result(
    fit: EstimatingEquationFit,
    iterations: int,
    converged: bool,
    design: CohortDesign,
    cfg: EstimatorConfig,
    trace: List[Dict[str, Any]],
    warnings: List[str],
) -> EstimationResult:
    summaries = {
        "refill_hazard": design.nuisances.refill.summary(),
        "censoring": design.nuisances.censoring.summary(),
        "outcome_regression": fit.outcome.summary(),
    }
    if fit.index is not None:
        summaries["optimal_index"] = {
            "variance": fit.index.variance,
            "variance_floored": fit.index.variance_floored,
        }
    return EstimationResult(
        psi_hat=fit.psi,
        ee_norm=fit.norm,
        iterations=iterations,
        converged=converged,
        index=cfg.index,
        n_subjects=design.n_total,
        n_uncensored=len(design.subjects),
        nuisance_summaries=summaries,
        warnings=warnings,
        trace=trace,
    )


def solve_psi(
    design: CohortDesign,
    cfg: EstimatorConfig,
    initial: Optional[PsiVector] = None,
) -> EstimationResult:
    """
    Newton-Raphson on P_n EE(psi) = 0 with step halving.

    Steps longer than ``cfg.max_step`` (max norm) are shortened. The outcome
    (and gradient) regressions are refit at every evaluation.

    Raises:
        NonIdentifiableError: singular Jacobian
        ConvergenceError: max iterations, exhausted step halving or a Jacobian
            that overflows on both sides; ``result``
            holds the last iterate with converged=False
    """
    dim = design.table.dim
    if initial is None:
        initial = (
            PsiVector.from_array(cfg.initial_psi)
            if cfg.initial_psi is not None
            else PsiVector.zeros(dim)
        )
    if initial.dim != dim:
        raise FeatureDimensionError(
            f"initial psi has dimension {initial.dim}, need {dim}"
        )

    warnings: List[str] = []
    if design.nuisances.censoring.no_events:
        warnings.append("no censoring events: censoring survival set to 1")

    fit = evaluate_estimating_equations(initial, design, cfg)
    trace = [_trace_entry(0, fit, 0.0)]
    iteration = 0
    while fit.norm > cfg.tolerance:
        if iteration >= cfg.max_iterations:
            result = _result(fit, iteration, False, design, cfg, trace, warnings)
            raise ConvergenceError(
                f"psi solver did not converge in {cfg.max_iterations} iterations "
                f"(|EE|={fit.norm:.3g})",
                last_iterate=fit.psi,
                trace=trace,
                result=result,
            )
        try:
            jac = jacobian(fit.psi, design, cfg, fit)
        except ExponentOverflowError as e:
            result = _result(fit, iteration, False, design, cfg, trace, warnings)
            raise ConvergenceError(
                f"Jacobian not computable at iteration {iteration}: {e}",
                last_iterate=fit.psi,
                trace=trace,
                result=result,
            )
        singular = np.linalg.svd(jac, compute_uv=False)
        ratio = singular[-1] / singular[0] if singular[0] > 0 else 0.0
        if ratio < SINGULAR_TOLERANCE:
            result = _result(fit, iteration, False, design, cfg, trace, warnings)
            raise NonIdentifiableError(
                f"estimating-equation Jacobian is singular at psi={fit.psi} "
                f"(singular value ratio {ratio:.2g}); the estimating equations "
                "do not identify every psi component, e.g. an effect modifier "
                "that is constant while treated",
                last_iterate=fit.psi,
                trace=trace,
                result=result,
            )
        step = -np.linalg.solve(jac, fit.mean)
        largest = float(np.max(np.abs(step)))
        if largest > cfg.max_step:
            logger.debug("Newton step %.3g capped at %.3g", largest, cfg.max_step)
            step *= cfg.max_step / largest
        iteration += 1

        scale = 1.0
        candidate = None
        for _ in range(cfg.step_halving + 1):
            trial = _try_evaluate(
                PsiVector.from_array(fit.psi.as_array() + scale * step), design, cfg
            )
            if trial is not None and trial.norm < fit.norm:
                candidate = trial
                break
            scale *= 0.5
        if candidate is None:
            result = _result(fit, iteration, False, design, cfg, trace, warnings)
            raise ConvergenceError(
                f"step halving exhausted at iteration {iteration} "
                f"(|EE|={fit.norm:.3g})",
                last_iterate=fit.psi,
                trace=trace,
                result=result,
            )
        fit = candidate
        trace.append(_trace_entry(iteration, fit, scale))
        logger.info(
            "Newton iteration %d: psi=%s |EE|=%.3g", iteration, fit.psi, fit.norm
        )

    if fit.index is not None and fit.index.variance_floored:
        warnings.append("residual variance floored in the optimal index")
    return _result(fit, iteration, True, design, cfg, trace, warnings)


@dataclass(frozen=True)
class BootstrapSummary:
    """Subject-level bootstrap of psi-hat."""

    se: List[float]
    ci: List[List[float]]
    replicates: int
    failures: int


def _bootstrap_replicate(
    cohort: Sequence[SubjectTrajectory],
    refit: Callable[[List[SubjectTrajectory]], np.ndarray],
    seed: np.random.SeedSequence,
) -> Tuple[Optional[np.ndarray], str]:
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(cohort), len(cohort))
    try:
        return np.asarray(refit([cohort[i] for i in idx]), dtype=float), ""
    except CtsftmError as e:
        return None, f"{type(e).__name__}: {e}"


def bootstrap_variance(
    cohort: Sequence[SubjectTrajectory],
    refit: Callable[[List[SubjectTrajectory]], np.ndarray],
    replicates: int,
    seed: int,
    confidence_level: float = 0.95,
    n_jobs: int = 1,
    max_failure_fraction: float = 0.2,
) -> BootstrapSummary:
    """
    Nonparametric subject-level bootstrap.

    Each replicate draws its own child of SeedSequence(seed), so results do
    not depend on n_jobs.

    Args:
        cohort: all subjects
        refit: full pipeline returning psi-hat for a resampled cohort
        replicates: number of replicates B
        seed: base seed
        confidence_level: percentile interval level
        n_jobs: joblib worker count
        max_failure_fraction: tolerated share of failed replicates

    Raises:
        BootstrapError: too many replicates failed
    """
    children = np.random.SeedSequence(seed).spawn(replicates)
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_bootstrap_replicate)(cohort, refit, child) for child in children
    )
    estimates = [psi for psi, _ in outcomes if psi is not None]
    messages = [msg for psi, msg in outcomes if psi is None]
    failures = len(messages)
    if failures > max_failure_fraction * replicates or len(estimates) < 2:
        raise BootstrapError(
            f"{failures} of {replicates} bootstrap replicates failed",
            diagnostics={"failures": failures, "messages": messages[:20]},
        )
    if failures:
        logger.warning("%d of %d bootstrap replicates failed", failures, replicates)

    draws = np.vstack(estimates)
    alpha = 1.0 - confidence_level
    lower = np.quantile(draws, alpha / 2.0, axis=0)
    upper = np.quantile(draws, 1.0 - alpha / 2.0, axis=0)
    return BootstrapSummary(
        se=np.std(draws, axis=0, ddof=1).tolist(),
        ci=[[float(lo), float(hi)] for lo, hi in zip(lower, upper)],
        replicates=replicates,
        failures=failures,
    )
