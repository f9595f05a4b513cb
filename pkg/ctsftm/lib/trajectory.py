#!/usr/bin/env python3
"""
Observed trajectories for the ctSFTM.

A subject is followed on a calendar clock in days. Covariates are cadlag step
functions, treatment is derived from refill dispensations (each covering w
days), and refill k is modelled on a gap clock that starts at
o_k = V_{k-1} + w - epsilon, so that u = T_k lands exactly on V_k.

All types are frozen; arrays are stored read-only.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from errors import (
    DomainError,
    InputValidationError,
    PredictabilityError,
    SubjectRejectedError,
)

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6


def _readonly(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class CovariateProcess:
    """Right-continuous step function L_u with named columns."""

    change_times: np.ndarray
    values: np.ndarray
    names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        times = np.array(self.change_times, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float)
        if len(times) == 0:
            raise InputValidationError("covariate process needs a time 0 row")
        if values.ndim == 1:
            values = values.reshape(len(times), -1)
        if values.ndim != 2 or values.shape[0] != len(times):
            raise InputValidationError("one covariate vector per change time required")
        if times[0] != 0.0:
            raise InputValidationError("first covariate change time must be 0")
        if np.any(np.diff(times) <= 0):
            raise InputValidationError(
                "covariate change times must be strictly increasing"
            )
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise InputValidationError("covariate times and values must be finite")
        names = tuple(self.names) or tuple(f"l{j + 1}" for j in range(values.shape[1]))
        if len(names) != values.shape[1]:
            raise InputValidationError("covariate names do not match value columns")
        object.__setattr__(self, "change_times", _readonly(times))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "names", names)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate '{name}'")

    def rows_at(self, u: np.ndarray) -> np.ndarray:
        """Row index in effect at each time (largest change time <= u)."""
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise DomainError("covariates are defined for u >= 0 only")
        return np.searchsorted(self.change_times, u, side="right") - 1

    def at(self, u: float) -> np.ndarray:
        return self.values[int(self.rows_at(u))]

    def truncated(self, horizon: float) -> "CovariateProcess":
        keep = self.change_times <= horizon
        return CovariateProcess(self.change_times[keep], self.values[keep], self.names)


def covariate_at(c: CovariateProcess, u: float) -> np.ndarray:
    """Value of the covariate process at time u (right-continuous lookup)."""
    return c.at(u)


@dataclass(frozen=True, eq=False)
class DispensationRecord:
    """Normalized refill times V_0 = 0 < V_1 < ... < V_K."""

    refill_times: np.ndarray
    coverage_window: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        times = np.array(self.refill_times, dtype=float).reshape(-1)
        if not self.coverage_window > 0:
            raise InputValidationError("coverage window must be positive")
        if not 0 < self.epsilon < self.coverage_window:
            raise InputValidationError("epsilon must lie in (0, coverage_window)")
        if len(times) < 2:
            raise SubjectRejectedError("at least one refill after baseline is required")
        if times[0] != 0.0:
            raise InputValidationError("baseline dispensation must be at time 0")
        # Same expression as the normalization step, so it holds exactly
        if np.any(times[1:] < times[:-1] + self.coverage_window):
            raise InputValidationError("refills overlap; normalize dispensations first")
        object.__setattr__(self, "refill_times", _readonly(times))

    @property
    def K(self) -> int:
        return len(self.refill_times) - 1

    @property
    def origins(self) -> np.ndarray:
        """Gap-clock origins o_1 .. o_{K+1}; the last one opens the terminal gap."""
        return self.refill_times + self.coverage_window - self.epsilon


def normalize_dispensations(
    raw_refills: Sequence[float],
    w: float,
    epsilon: float = DEFAULT_EPSILON,
    subject_id: Optional[str] = None,
) -> DispensationRecord:
    """
    Shift overlapping refills so that each starts when the previous one ends.

    Args:
        raw_refills: observed refill times, starting with the baseline at 0
        w: coverage window of one dispensation (days)
        epsilon: gap-time offset (days)
        subject_id: used in error messages

    Returns:
        DispensationRecord with V_k = max(V_k, V_{k-1} + w) applied in order

    Raises:
        SubjectRejectedError: no refill after baseline
        InputValidationError: non-increasing or badly anchored input
    """
    raw = np.asarray(raw_refills, dtype=float).reshape(-1)
    if len(raw) < 2:
        raise SubjectRejectedError(
            "at least one refill after baseline is required", subject_id=subject_id
        )
    if raw[0] != 0.0:
        raise InputValidationError(
            "baseline refill at time 0 is required", subject_id=subject_id
        )
    if not np.all(np.isfinite(raw)) or np.any(np.diff(raw) <= 0):
        raise InputValidationError(
            "refill times must be finite and strictly increasing", subject_id=subject_id
        )

    normalized = raw.copy()
    for k in range(1, len(normalized)):
        normalized[k] = max(normalized[k], normalized[k - 1] + w)
    return DispensationRecord(normalized, w, epsilon)


@dataclass(frozen=True, eq=False)
class GapTimeSet:
    """Gap times T_k = V_k - (V_{k-1} + w - epsilon) with their origins."""

    gaps: np.ndarray
    origins: np.ndarray

    @property
    def K(self) -> int:
        return len(self.gaps)


def gap_times(d: DispensationRecord) -> GapTimeSet:
    origins = d.refill_times[:-1] + d.coverage_window - d.epsilon
    gaps = d.refill_times[1:] - origins
    return GapTimeSet(_readonly(gaps), _readonly(origins.copy()))


@dataclass(frozen=True, eq=False)
class ExposurePath:
    """
    Treatment and covariate path on [0, inf).

    Treatment is on over the half-open intervals in ``on_intervals``; the
    covariate process is extended constantly past its last change.
    """

    covariates: CovariateProcess
    on_intervals: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    def __post_init__(self) -> None:
        intervals = np.array(self.on_intervals, dtype=float).reshape(-1, 2)
        if np.any(intervals[:, 1] <= intervals[:, 0]):
            raise InputValidationError("treatment intervals must have positive length")
        merged = []
        for start, end in intervals[np.argsort(intervals[:, 0], kind="stable")]:
            if merged and start <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], end)
            else:
                merged.append([start, end])
        object.__setattr__(
            self,
            "on_intervals",
            _readonly(np.array(merged, dtype=float).reshape(-1, 2)),
        )

    @classmethod
    def from_dispensations(
        cls,
        covariates: CovariateProcess,
        d: DispensationRecord,
        followup_time: Optional[float] = None,
    ) -> "ExposurePath":
        starts = d.refill_times
        ends = starts + d.coverage_window
        if followup_time is not None:
            ends = ends.copy()
            ends[-1] = min(ends[-1], followup_time)
        return cls(covariates, np.column_stack([starts, ends]))

    @classmethod
    def untreated(cls, covariates: CovariateProcess) -> "ExposurePath":
        return cls(covariates, np.empty((0, 2)))

    @classmethod
    def always_on(cls, covariates: CovariateProcess) -> "ExposurePath":
        return cls(covariates, np.array([[0.0, np.inf]]))

    def treated_at(self, u: np.ndarray) -> np.ndarray:
        """A_u for an array of times (right-continuous)."""
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise DomainError("treatment is defined for u >= 0 only")
        if not len(self.on_intervals):
            return np.zeros(u.shape, dtype=np.int8)
        idx = np.searchsorted(self.on_intervals[:, 0], u, side="right") - 1
        ends = self.on_intervals[np.clip(idx, 0, None), 1]
        return np.where((idx >= 0) & (u < ends), 1, 0).astype(np.int8)

    def treated_before(self, u: np.ndarray) -> np.ndarray:
        """A_{u-}, the treatment state just before each time."""
        u = np.asarray(u, dtype=float)
        idx = np.searchsorted(self.on_intervals[:, 0], u, side="left") - 1
        if not len(self.on_intervals):
            return np.zeros(u.shape, dtype=np.int8)
        ends = self.on_intervals[np.clip(idx, 0, None), 1]
        return np.where((idx >= 0) & (u <= ends), 1, 0).astype(np.int8)

    @property
    def last_breakpoint(self) -> float:
        """Time after which covariates and treatment stay constant."""
        bounds = self.on_intervals.ravel()
        bounds = bounds[np.isfinite(bounds)]
        return float(max(self.covariates.change_times[-1], bounds.max(initial=0.0)))

    def segments(self, horizon: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Partition [0, horizon] on which treatment and covariates are constant.

        Returns:
            tuple: (breaks, treated, covariate_rows) with len(breaks) = pieces + 1
        """
        bounds = self.on_intervals.ravel()
        breaks = np.concatenate(
            ([0.0, horizon], self.covariates.change_times, bounds[np.isfinite(bounds)])
        )
        breaks = np.unique(breaks[(breaks >= 0) & (breaks <= horizon)])
        mid = 0.5 * (breaks[:-1] + breaks[1:])
        return breaks, self.treated_at(mid), self.covariates.rows_at(mid)


@dataclass(frozen=True, eq=False)
class SubjectTrajectory:
    """One subject's observed data: follow-up, event flag, covariates, refills."""

    id: str
    followup_time: float
    event_indicator: int
    baseline_covariates: np.ndarray
    covariates: CovariateProcess
    dispensations: DispensationRecord
    baseline_names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        x = float(self.followup_time)
        if not np.isfinite(x) or x <= 0:
            raise InputValidationError(
                "followup time must be positive", subject_id=self.id
            )
        if self.event_indicator not in (0, 1):
            raise InputValidationError(
                "event indicator must be 0 or 1", subject_id=self.id
            )
        if x <= self.dispensations.refill_times[-1]:
            raise SubjectRejectedError(
                "followup time must exceed the last refill time", subject_id=self.id
            )
        if self.covariates.change_times[-1] > x:
            raise InputValidationError(
                "covariate change after followup time", subject_id=self.id
            )
        baseline = np.array(self.baseline_covariates, dtype=float).reshape(-1)
        names = tuple(self.baseline_names) or tuple(
            f"x0_{j + 1}" for j in range(len(baseline))
        )
        if len(names) != len(baseline):
            raise InputValidationError(
                "baseline names do not match values", subject_id=self.id
            )
        object.__setattr__(self, "followup_time", x)
        object.__setattr__(self, "event_indicator", int(self.event_indicator))
        object.__setattr__(self, "baseline_covariates", _readonly(baseline))
        object.__setattr__(self, "baseline_names", names)

    @property
    def K(self) -> int:
        return self.dispensations.K

    @cached_property
    def gaps(self) -> GapTimeSet:
        return gap_times(self.dispensations)

    @cached_property
    def path(self) -> ExposurePath:
        return ExposurePath.from_dispensations(
            self.covariates, self.dispensations, self.followup_time
        )

    def treatment_indicator(self, u: float) -> int:
        return treatment_indicator(self, u)

    def history(self, cutoff: float, inclusive: bool = True) -> "History":
        return History(self, cutoff, inclusive)

    def baseline_value(self, name: str) -> float:
        try:
            return float(self.baseline_covariates[self.baseline_names.index(name)])
        except ValueError:
            raise KeyError(f"unknown baseline covariate '{name}'")


def treatment_indicator(s: SubjectTrajectory, u: float) -> int:
    """
    Treatment state A_u of a subject.

    Raises:
        DomainError: u outside [0, followup_time]
    """
    if not 0.0 <= u <= s.followup_time:
        raise DomainError(
            f"subject {s.id}: u={u} outside [0, {s.followup_time}]"
        )
    return int(s.path.treated_at(u))


class History:
    """
    Observed history of one subject up to a calendar cutoff.

    Covariates at the cutoff itself are visible (covariate changes count
    first) unless ``inclusive`` is False, in which case the value just before
    the cutoff is returned. Treatment is visible as A_{t-}; refills only
    strictly before the cutoff. Anything later raises PredictabilityError.
    """

    def __init__(
        self, subject: SubjectTrajectory, cutoff: float, inclusive: bool = True
    ) -> None:
        self.subject = subject
        self.cutoff = float(cutoff)
        self.inclusive = inclusive

    @property
    def subject_id(self) -> str:
        return self.subject.id

    @property
    def baseline_covariates(self) -> np.ndarray:
        return self.subject.baseline_covariates

    def _guard(self, t: float, what: str) -> None:
        if t > self.cutoff:
            raise PredictabilityError(
                f"{what} at t={t} requested with history cut at {self.cutoff}"
            )

    def covariate_at(self, t: float) -> np.ndarray:
        self._guard(t, "covariate")
        if t == self.cutoff and not self.inclusive and t > 0:
            times = self.subject.covariates.change_times
            return self.subject.covariates.values[np.searchsorted(times, t) - 1]
        return self.subject.covariates.at(t)

    def covariate(self, name: str, t: Optional[float] = None) -> float:
        t = self.cutoff if t is None else t
        return float(self.covariate_at(t)[self.subject.covariates.index_of(name)])

    def treatment_before(self, t: Optional[float] = None) -> int:
        t = self.cutoff if t is None else t
        self._guard(t, "treatment")
        return int(self.subject.path.treated_before(t))

    def refill_times(self) -> np.ndarray:
        v = self.subject.dispensations.refill_times
        return v[v < self.cutoff]

    def refill_time(self, k: int) -> float:
        v = self.subject.dispensations.refill_times
        if k >= len(v) or v[k] >= self.cutoff:
            raise PredictabilityError(
                f"refill {k} is not observed before t={self.cutoff}"
            )
        return float(v[k])


def followup_decomposition(s: SubjectTrajectory) -> Dict[str, float]:
    """
    Split follow-up into coverage, gap and terminal time.

    coverage + gaps + terminal equals followup_time; the epsilon offset of each
    gap clock is booked as coverage.
    """
    d = s.dispensations
    return {
        "coverage": d.K * d.coverage_window,
        "gaps": float(np.sum(s.gaps.gaps - d.epsilon)),
        "terminal": s.followup_time - float(d.refill_times[-1]),
    }


@dataclass(frozen=True, eq=False)
class FollowupPartition:
    """
    Pieces of [0, X] on which treatment, covariates and refill risk are constant.

    ``gap`` is 0 when no refill is at risk, k for observed gap k and K + 1 for
    the terminal (right-censored) gap. ``gap_clock`` holds the gap-clock value
    at the start of each at-risk piece.
    """

    start: np.ndarray
    end: np.ndarray
    treated: np.ndarray
    covariate_rows: np.ndarray
    gap: np.ndarray
    gap_clock: np.ndarray

    @property
    def length(self) -> np.ndarray:
        return self.end - self.start

    @property
    def at_risk(self) -> np.ndarray:
        return self.gap > 0


def partition_followup(
    s: SubjectTrajectory,
    gap_breaks: Iterable[float] = (),
    include_terminal: bool = True,
) -> FollowupPartition:
    """
    Partition a subject's follow-up for exact piecewise integration.

    Args:
        s: subject trajectory
        gap_breaks: extra gap-clock break points (e.g. baseline hazard cuts)
        include_terminal: treat (o_{K+1}, X] as an at-risk terminal gap
    """
    d = s.dispensations
    v = d.refill_times
    origins = d.origins
    x = s.followup_time
    cuts = np.asarray(list(gap_breaks), dtype=float)

    breaks = np.concatenate(
        (
            [0.0, x],
            s.covariates.change_times,
            v,
            v + d.coverage_window,
            origins,
            (origins[:, None] + cuts[None, :]).ravel(),
        )
    )
    breaks = np.unique(breaks[(breaks >= 0) & (breaks <= x)])
    start, end = breaks[:-1], breaks[1:]
    mid = 0.5 * (start + end)

    j = np.searchsorted(origins, mid, side="right") - 1
    safe_j = np.clip(j, 0, d.K)
    observed = (j >= 0) & (j < d.K) & (mid < v[np.clip(j + 1, 0, d.K)])
    terminal = (j == d.K) & include_terminal
    gap = np.where(observed | terminal, j + 1, 0)
    gap_clock = np.where(gap > 0, start - origins[safe_j], np.nan)

    return FollowupPartition(
        start=_readonly(start.copy()),
        end=_readonly(end.copy()),
        treated=_readonly(s.path.treated_at(mid)),
        covariate_rows=_readonly(s.covariates.rows_at(mid)),
        gap=_readonly(gap.astype(int)),
        gap_clock=_readonly(gap_clock),
    )
