#!/usr/bin/env python3
"""
Structural simulator with a known psi.

Each subject is generated forwards: covariates, then refills from the true
refill hazard, then U from the baseline law. The failure time is obtained by
inverting the mimicking map, tau = U^{-1}(U), and censoring is drawn after the
last refill. Every subject owns its random streams, derived from the seed and
its index, so cohorts do not depend on generation order.

Covariates:
    l1  continuous AR(1) step process, updated at exponential intervals
    l2  binary, drawn once (it also scales U, the confounding knob)
    x0_1 baseline noise column, unrelated to anything
"""

import copy
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config import SCENARIO_COVARIATES, ScenarioConfig
from counterfactual import EffectModifierMap, PsiVector, invert_mimicking
from errors import ConfigError, SimulationError
from trajectory import (
    CovariateProcess,
    DispensationRecord,
    ExposurePath,
    SubjectTrajectory,
)

logger = logging.getLogger(__name__)

TRUTH_SCHEMA_VERSION = 1

# Random streams per subject attempt
COVARIATE_STREAM = 0
REFILL_STREAM = 1
OUTCOME_STREAM = 2
CENSORING_STREAM = 3

BASELINE_NAMES = ("x0_1",)


@dataclass(frozen=True)
class SimulatedSubject:
    """Latent quantities of one generated subject."""

    id: str
    U: float
    tau: float
    censoring_time: float
    censoring_probability: float
    attempts: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "U": self.U,
            "tau": self.tau,
            "censoring_time": self.censoring_time,
            "censoring_probability": self.censoring_probability,
            "attempts": self.attempts,
        }


@dataclass(frozen=True)
class SimulatedCohort:
    """Observed trajectories plus the ground truth behind them."""

    subjects: Tuple[SubjectTrajectory, ...]
    latent: Tuple[SimulatedSubject, ...]
    scenario: ScenarioConfig
    seed: int

    @property
    def psi(self) -> PsiVector:
        return PsiVector.from_array(self.scenario.psi)

    @property
    def censoring_fraction(self) -> float:
        return float(np.mean([1 - s.event_indicator for s in self.subjects]))

    @property
    def expected_censoring_fraction(self) -> float:
        return float(np.mean([s.censoring_probability for s in self.latent]))

    def truth(self) -> Dict[str, Any]:
        """Ground-truth record; never read back by the estimator."""
        return {
            "schema_version": TRUTH_SCHEMA_VERSION,
            "seed": self.seed,
            "psi": list(self.scenario.psi),
            "effect_modifiers": list(self.scenario.effect_modifiers),
            "scenario": self.scenario.model_dump(),
            "censoring_fraction": self.censoring_fraction,
            "expected_censoring_fraction": self.expected_censoring_fraction,
            "subjects": [s.to_dict() for s in self.latent],
        }


def _stream(seed: int, index: int, attempt: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(index, attempt, stream))
    )


class _CovariateDraw:
    """Covariate path drawn lazily; extending it never changes its prefix."""

    def __init__(self, scenario: ScenarioConfig, rng: np.random.Generator) -> None:
        dynamics = scenario.covariates
        self.rng = rng
        self.rate = dynamics.update_rate
        self.ar = dynamics.ar_coefficient
        self.sd = dynamics.innovation_sd
        self.baseline = np.array([rng.standard_normal()])
        l2 = float(rng.random() < dynamics.l2_probability)
        stationary_sd = self.sd / np.sqrt(1.0 - self.ar**2)
        self.times: List[float] = [0.0]
        self.rows: List[List[float]] = [[stationary_sd * rng.standard_normal(), l2]]

    @property
    def l2(self) -> float:
        return self.rows[0][1]

    def extend(self, horizon: float) -> None:
        while self.times[-1] <= horizon:
            t = self.times[-1] + self.rng.exponential(1.0 / self.rate)
            l1 = self.ar * self.rows[-1][0] + self.sd * self.rng.standard_normal()
            self.times.append(t)
            self.rows.append([l1, self.l2])

    def process(self, horizon: Optional[float] = None) -> CovariateProcess:
        times = np.array(self.times)
        values = np.array(self.rows)
        if horizon is not None:
            keep = times <= horizon
            times, values = times[keep], values[keep]
        return CovariateProcess(times, values, SCENARIO_COVARIATES)


def _log_linear(gamma: Dict[str, float], values: np.ndarray) -> np.ndarray:
    coef = np.array([gamma.get(name, 0.0) for name in SCENARIO_COVARIATES])
    return np.exp(np.atleast_2d(values) @ coef)


def _invert_hazard(
    covariates: _CovariateDraw,
    start: float,
    rate: float,
    gamma: Dict[str, float],
    target: float,
    change_point: Optional[float] = None,
    late_rate: Optional[float] = None,
) -> float:
    """
    Time after ``start`` at which the cumulative hazard reaches ``target``.

    The baseline is ``rate`` until ``change_point`` days after ``start`` and
    ``late_rate`` from then on.
    """
    elapsed = 0.0
    late = change_point is None
    while True:
        t = start + elapsed
        covariates.extend(t)
        times = np.asarray(covariates.times)
        row = int(np.searchsorted(times, t, side="right")) - 1
        span = times[row + 1] - t
        switch = not late and elapsed + span >= change_point
        if switch:
            span = change_point - elapsed
        base = rate if change_point is None or not late else late_rate
        hazard = base * float(_log_linear(gamma, np.asarray(covariates.rows[row]))[0])
        if hazard * span >= target:
            return elapsed + target / hazard
        target -= hazard * span
        if switch:
            elapsed, late = change_point, True
        else:
            elapsed += span


def _cumulative_hazard(
    process: CovariateProcess,
    start: float,
    end: float,
    rate: float,
    gamma: Dict[str, float],
) -> float:
    breaks = np.concatenate(([start, end], process.change_times))
    breaks = np.unique(breaks[(breaks >= start) & (breaks <= end)])
    mid = 0.5 * (breaks[:-1] + breaks[1:])
    values = process.values[process.rows_at(mid)]
    return float(np.sum(np.diff(breaks) * rate * _log_linear(gamma, values)))


def _refill_times(
    scenario: ScenarioConfig,
    covariates: _CovariateDraw,
    rng: np.random.Generator,
    horizon: float,
) -> List[float]:
    """Refills until the first one past ``horizon`` (included)."""
    w, epsilon = scenario.coverage_window, scenario.epsilon
    refills = [0.0]
    while refills[-1] <= horizon:
        previous = refills[-1]
        if scenario.refill.always_on:
            refills.append(previous + w)
            continue
        origin = previous + w - epsilon
        gap = _invert_hazard(
            covariates,
            origin,
            scenario.refill.rate,
            scenario.refill.gamma,
            rng.exponential(),
            scenario.refill.change_point,
            scenario.refill.late_rate,
        )
        refills.append(max(origin + gap, previous + w))
    return refills


def _baseline_time(
    scenario: ScenarioConfig, l2: float, rng: np.random.Generator
) -> float:
    law = scenario.baseline
    scale = np.exp(law.confounding * l2) / law.rate
    if law.distribution == "weibull":
        return float(scale * rng.exponential() ** (1.0 / law.shape))
    return float(scale * rng.exponential())


def _simulate_attempt(
    scenario: ScenarioConfig, seed: int, index: int, attempt: int
) -> Optional[Tuple[SubjectTrajectory, SimulatedSubject]]:
    psi = PsiVector.from_array(scenario.psi)
    g = EffectModifierMap(tuple(scenario.effect_modifiers))
    w = scenario.coverage_window

    covariates = _CovariateDraw(
        scenario, _stream(seed, index, attempt, COVARIATE_STREAM)
    )
    U = _baseline_time(
        scenario, covariates.l2, _stream(seed, index, attempt, OUTCOME_STREAM)
    )

    horizon = 2.0 * U + w
    while True:
        covariates.extend(horizon)
        refill_rng = _stream(seed, index, attempt, REFILL_STREAM)
        refills = _refill_times(scenario, covariates, refill_rng, horizon)
        starts = np.asarray(refills)
        path = ExposurePath(covariates.process(), np.column_stack([starts, starts + w]))
        tau = invert_mimicking(U, path, psi, g)
        if tau <= horizon:
            break
        horizon *= 2.0

    kept = [v for v in refills if v < tau]
    if len(kept) < 2:
        return None
    v_last = kept[-1]

    process = covariates.process()
    censoring = scenario.censoring
    c_rng = _stream(seed, index, attempt, CENSORING_STREAM)
    C = v_last + _invert_hazard(
        covariates, v_last, censoring.rate, censoring.gamma, c_rng.exponential()
    )
    survival = np.exp(
        -_cumulative_hazard(process, v_last, tau, censoring.rate, censoring.gamma)
    )

    x = min(tau, C)
    subject_id = f"S{index + 1:05d}"
    subject = SubjectTrajectory(
        id=subject_id,
        followup_time=x,
        event_indicator=int(tau <= C),
        baseline_covariates=covariates.baseline,
        covariates=covariates.process(x),
        dispensations=DispensationRecord(np.asarray(kept), w, scenario.epsilon),
        baseline_names=BASELINE_NAMES,
    )
    latent = SimulatedSubject(subject_id, U, tau, C, float(1.0 - survival), attempt + 1)
    return subject, latent


def simulate_subject(
    scenario: ScenarioConfig, seed: int, index: int
) -> Tuple[SubjectTrajectory, SimulatedSubject]:
    """
    Generate subject ``index``; resample while it has no refill before tau.

    Raises:
        SimulationError: still no refill after ``max_resample`` attempts
    """
    for attempt in range(scenario.max_resample):
        generated = _simulate_attempt(scenario, seed, index, attempt)
        if generated is not None:
            return generated
    raise SimulationError(
        f"subject {index + 1}: no refill before failure in "
        f"{scenario.max_resample} attempts"
    )


def simulate_cohort(scenario: ScenarioConfig, seed: int = 0) -> SimulatedCohort:
    """
    Generate a cohort of ``scenario.n`` subjects.

    Args:
        scenario: validated scenario
        seed: base seed; the same seed gives identical cohorts

    Raises:
        SimulationError: a subject could not be generated
    """
    generated = [simulate_subject(scenario, seed, i) for i in range(scenario.n)]
    cohort = SimulatedCohort(
        subjects=tuple(s for s, _ in generated),
        latent=tuple(latent for _, latent in generated),
        scenario=scenario,
        seed=seed,
    )
    resampled = sum(latent.attempts > 1 for latent in cohort.latent)
    logger.info(
        "Simulated %d subjects (%d resampled), censoring fraction %.3f (expected %.3f)",
        scenario.n,
        resampled,
        cohort.censoring_fraction,
        cohort.expected_censoring_fraction,
    )
    return cohort


def estimation_config_for(
    scenario: ScenarioConfig, data_dir: Optional[str] = None
) -> Dict[str, Any]:
    """Configuration overrides that analyse a simulated cohort correctly specified."""
    config: Dict[str, Any] = {
        "dispensation": {
            "coverage_window": scenario.coverage_window,
            "epsilon": scenario.epsilon,
        },
        "model": {
            "effect_modifiers": list(scenario.effect_modifiers),
            "centers": [0.0] * len(scenario.effect_modifiers),
        },
        "refill_hazard": {"covariates": list(SCENARIO_COVARIATES)},
        "censoring": {"covariates": list(SCENARIO_COVARIATES)},
        "outcome_regression": {
            "covariates": list(SCENARIO_COVARIATES),
            "baseline_covariates": [],
        },
    }
    if scenario.refill.change_point is not None:
        # baseline pieces matching the true gap-clock law
        config["refill_hazard"]["cut_points"] = [scenario.refill.change_point]
    if data_dir is not None:
        config["data"] = {
            name: f"{data_dir}/{name}.csv"
            for name in ("covariates", "dispensations", "outcomes")
        }
    return config


MISSPECIFIABLE = ("outcome_regression", "refill_hazard", "censoring")


def misspecify(
    config: Dict[str, Any],
    scenario: ScenarioConfig,
    which: str,
    omit: str = "l2",
) -> Dict[str, Any]:
    """
    Copy of an estimation configuration that drops a truly active covariate
    from one nuisance model.

    Raises:
        ConfigError: unknown nuisance, or the covariate is inactive in the truth
    """
    if which not in MISSPECIFIABLE:
        raise ConfigError(f"cannot misspecify '{which}'", field="which")
    if which == "refill_hazard":
        active = scenario.refill.gamma.get(omit, 0.0) != 0.0
    elif which == "censoring":
        active = scenario.censoring.gamma.get(omit, 0.0) != 0.0
    else:
        active = omit == "l2" and scenario.baseline.confounding != 0.0
    if not active:
        raise ConfigError(
            f"covariate '{omit}' is not active in the true {which} model", field=which
        )

    misspecified = copy.deepcopy(config)
    section = misspecified.setdefault(which, {})
    selected = section.get("covariates") or list(SCENARIO_COVARIATES)
    section["covariates"] = [name for name in selected if name != omit]
    logger.info("Misspecified %s: dropped %s", which, omit)
    return misspecified

