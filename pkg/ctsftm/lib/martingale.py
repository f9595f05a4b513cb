#!/usr/bin/env python3
"""
Refill counting processes and their estimated martingales.

For gap k of a subject, N_k(u) = 1{u >= T_k} and Y_k(u) = 1{u <= T_k} on the
gap clock. dM_k = dN_k - lambda_k(u) Y_k(u) du has a unit atom at T_k and a
piecewise-constant absolutely continuous part, so every integral against it
is a finite sum.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from errors import NonFiniteIntegrandError
from hazards import RefillHazardModel
from trajectory import GapTimeSet, History, SubjectTrajectory

logger = logging.getLogger(__name__)

# {1 - jump of the cumulative hazard}; all hazards here are continuous
JUMP_FACTOR = 1.0

# Simpson nodes on [a, b] at a, mid, b
SIMPSON_WEIGHTS = np.array([1.0, 4.0, 1.0]) / 6.0

Integrand = Callable[[History, int, float], Any]


@dataclass(frozen=True, eq=False)
class GapMartingale:
    """
    dM for one gap: segment masses on [0, end] and an optional unit jump.

    ``times`` holds the calendar time of every gap-clock break, so history
    lookups land exactly on covariate changes and on V_k.
    """

    k: int
    origin: float
    breaks: np.ndarray
    rates: np.ndarray
    jumps: bool
    times: np.ndarray

    @property
    def end(self) -> float:
        return float(self.breaks[-1])

    def calendar(self, u: float) -> float:
        """Calendar time of gap-clock point u."""
        i = int(np.searchsorted(self.breaks, u))
        if i < len(self.breaks) and self.breaks[i] == u:
            return float(self.times[i])
        return self.origin + u

    @property
    def masses(self) -> np.ndarray:
        return self.rates * np.diff(self.breaks)

    @property
    def value(self) -> float:
        """M_k at the end of the gap."""
        return float(self.jumps) - float(np.sum(self.masses))


@dataclass(frozen=True, eq=False)
class MartingaleIncrements:
    """All gap martingales of one subject, terminal gap last when present."""

    subject: SubjectTrajectory
    gaps: Tuple[GapMartingale, ...]

    @property
    def terminal_value(self) -> float:
        """M(inf) summed over gaps."""
        return float(sum(gap.value for gap in self.gaps))

    @property
    def compensator(self) -> float:
        return float(sum(np.sum(gap.masses) for gap in self.gaps))


def counting_at_risk(gaps: GapTimeSet, k: int, u: float) -> Tuple[int, int]:
    """(N_k(u), Y_k(u)) for refill k (1-based)."""
    t_k = gaps.gaps[k - 1]
    return int(u >= t_k), int(u <= t_k)


def martingale_increments(
    s: SubjectTrajectory, m: RefillHazardModel
) -> MartingaleIncrements:
    """Closed-form dM for every gap of a subject under a fitted refill model."""
    part = m.partition(s)
    rates = m.piece_rates(s, part)
    origins = s.dispensations.origins
    gaps = []
    for k in np.unique(part.gap[part.gap > 0]):
        idx = np.flatnonzero(part.gap == k)
        origin = float(origins[k - 1])
        breaks = np.concatenate((part.gap_clock[idx], [part.end[idx[-1]] - origin]))
        gaps.append(
            GapMartingale(
                k=int(k),
                origin=origin,
                breaks=breaks,
                rates=rates[idx],
                jumps=bool(k <= s.K),
                times=np.concatenate((part.start[idx], [part.end[idx[-1]]])),
            )
        )
    return MartingaleIncrements(s, tuple(gaps))


def _values(f: Integrand, history: History, k: int, u: float) -> np.ndarray:
    value = np.atleast_1d(np.asarray(f(history, k, u), dtype=float))
    if not np.all(np.isfinite(value)):
        raise NonFiniteIntegrandError(
            f"subject {history.subject_id}: integrand {value} at k={k}, u={u}"
        )
    return value


def _refine(
    gap: GapMartingale, breakpoints: Optional[Sequence[float]]
) -> Tuple[np.ndarray, np.ndarray]:
    if breakpoints is None:
        return gap.breaks, gap.rates
    extra = np.asarray(breakpoints, dtype=float)
    inside = extra[(extra > 0) & (extra < gap.end)]
    breaks = np.unique(np.concatenate((gap.breaks, inside)))
    mid = 0.5 * (breaks[:-1] + breaks[1:])
    rates = gap.rates[np.searchsorted(gap.breaks, mid, side="right") - 1]
    return breaks, rates


def stochastic_integral(
    f: Integrand,
    inc: MartingaleIncrements,
    breakpoints: Optional[Sequence[float]] = None,
    quadrature: str = "step",
) -> np.ndarray:
    """
    Sum over gaps of the integral of f against dM.

    ``f(history, k, u)`` is evaluated with the history cut at the start of
    each segment, so it is constant on the segment (``quadrature="step"``) or
    varies only through the gap clock u (``quadrature="simpson"``, exact for
    integrands quadratic in u). At the refill the history is cut strictly
    before V_k.

    Args:
        f: predictable integrand
        inc: martingale increments of one subject
        breakpoints: extra gap-clock points refining every segment partition
        quadrature: "step" or "simpson"

    Raises:
        NonFiniteIntegrandError: f returned NaN or infinity
    """
    if quadrature not in ("step", "simpson"):
        raise ValueError(f"unknown quadrature '{quadrature}'")
    s = inc.subject
    total: Optional[np.ndarray] = None
    for gap in inc.gaps:
        breaks, rates = _refine(gap, breakpoints)
        for a, b, rate in zip(breaks[:-1], breaks[1:], rates):
            history = s.history(gap.calendar(a))
            mass = rate * (b - a)
            if quadrature == "step":
                term = _values(f, history, gap.k, a) * mass
            else:
                nodes = (a, 0.5 * (a + b), b)
                term = sum(
                    weight * _values(f, history, gap.k, u)
                    for weight, u in zip(SIMPSON_WEIGHTS, nodes)
                ) * mass
            total = -term if total is None else total - term
        if gap.jumps:
            history = s.history(gap.calendar(gap.end), inclusive=False)
            term = _values(f, history, gap.k, gap.end)
            total = term if total is None else total + term
    if total is None:
        return np.zeros(1)
    return total


@dataclass(frozen=True)
class CovariationReport:
    """Predicted versus empirical covariation of two martingale integrals."""

    n: int
    compensator: float
    covariance: float
    ratio: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "n": self.n,
            "compensator": self.compensator,
            "covariance": self.covariance,
            "ratio": self.ratio,
        }


def covariation_diagnostic(
    f: Integrand,
    g: Integrand,
    cohort: Sequence[SubjectTrajectory],
    m: RefillHazardModel,
) -> CovariationReport:
    """
    Compare the compensator of the product of two martingale integrals with
    their empirical covariance.

    The compensator is the cohort mean of sum_k int f g Y lambda du (times the
    jump factor); the ratio is covariance / compensator.
    """
    integrals_f, integrals_g, compensators = [], [], []
    for s in cohort:
        inc = martingale_increments(s, m)
        integrals_f.append(float(stochastic_integral(f, inc)[0]))
        integrals_g.append(float(stochastic_integral(g, inc)[0]))
        predicted = 0.0
        for gap in inc.gaps:
            for a, mass in zip(gap.breaks[:-1], gap.masses):
                history = s.history(gap.calendar(a))
                fv = float(_values(f, history, gap.k, a)[0])
                gv = float(_values(g, history, gap.k, a)[0])
                predicted += fv * gv * mass
        compensators.append(JUMP_FACTOR * predicted)

    n = len(compensators)
    compensator = float(np.mean(compensators)) if n else 0.0
    covariance = float(np.cov(integrals_f, integrals_g, ddof=1)[0, 1]) if n > 1 else 0.0
    ratio = covariance / compensator if compensator != 0 else float("nan")
    return CovariationReport(
        n=n, compensator=compensator, covariance=covariance, ratio=ratio
    )


@dataclass(frozen=True)
class MeanZeroReport:
    """Cohort mean of a martingale integral with its standard error."""

    n: int
    mean: float
    se: float

    @property
    def passed(self) -> bool:
        return abs(self.mean) <= 3.0 * self.se

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "mean": self.mean,
            "se": self.se,
            "status": "PASS" if self.passed else "FAIL",
        }


def mean_zero_check(
    f: Integrand, cohort: Sequence[SubjectTrajectory], m: RefillHazardModel
) -> MeanZeroReport:
    """Mean and SE of int f dM across subjects."""
    values = np.array(
        [float(stochastic_integral(f, martingale_increments(s, m))[0]) for s in cohort]
    )
    n = len(values)
    se = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return MeanZeroReport(n=n, mean=float(np.mean(values)), se=se)
