#!/usr/bin/env python3
"""
Nuisance hazard models.

Refill model: proportional hazards on the gap clock with a piecewise-constant
baseline, fitted by full maximum likelihood over pooled gap records.

Censoring model: time-dependent Cox model on the calendar clock over the
post-refill window (V_K, X], Breslow ties and Breslow baseline increments.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from errors import (
    ConvergenceError,
    DegenerateGapsError,
    DomainError,
    FeatureDimensionError,
    PositivityViolationError,
    ProbabilityRangeError,
    SingularInformationError,
    ZeroVarianceFeatureError,
)
from trajectory import (
    FollowupPartition,
    History,
    SubjectTrajectory,
    partition_followup,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Smallest singular value ratio an information matrix may have
INFORMATION_RANK_TOLERANCE = 1e-10


def _readonly(values: Any) -> np.ndarray:
    values = np.array(values, dtype=float)
    values.setflags(write=False)
    return values


def _newton_step(
    info: np.ndarray, score: np.ndarray, model: str, names: Sequence[str]
) -> np.ndarray:
    """
    Solve info @ step = score.

    Raises:
        SingularInformationError: info is numerically singular
    """
    singular = np.linalg.svd(info, compute_uv=False)
    if singular[0] == 0 or singular[-1] < INFORMATION_RANK_TOLERANCE * singular[0]:
        raise SingularInformationError(model, names)
    try:
        return scipy.linalg.solve(info, score, assume_a="sym")
    except scipy.linalg.LinAlgError:
        raise SingularInformationError(model, names)


# ---------------------------------------------------------------------------
# Refill gap-time hazard
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RefillFeatureMap:
    """Features z(u, history) of the refill hazard."""

    covariates: Tuple[str, ...] = ()
    baseline_covariates: Tuple[str, ...] = ()
    include_refill_index: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "baseline_covariates", tuple(self.baseline_covariates))

    @property
    def names(self) -> Tuple[str, ...]:
        extra = ("refill_index",) if self.include_refill_index else ()
        return self.covariates + self.baseline_covariates + extra

    @property
    def dim(self) -> int:
        return len(self.names)

    def evaluate(self, history: History, k: int) -> np.ndarray:
        """Feature vector at the history cutoff for refill k."""
        values = [history.covariate(name) for name in self.covariates]
        values += [history.subject.baseline_value(n) for n in self.baseline_covariates]
        if self.include_refill_index:
            values.append(float(k))
        return np.asarray(values, dtype=float)

    def design(
        self, s: SubjectTrajectory, rows: np.ndarray, gap: np.ndarray
    ) -> np.ndarray:
        """Feature matrix for partition pieces with covariate rows and gap indices."""
        cov_idx = [s.covariates.index_of(name) for name in self.covariates]
        base = [s.baseline_value(name) for name in self.baseline_covariates]
        columns = [s.covariates.values[rows][:, cov_idx]]
        columns.append(np.tile(np.asarray(base, dtype=float), (len(rows), 1)))
        if self.include_refill_index:
            columns.append(np.asarray(gap, dtype=float)[:, None])
        return np.hstack(columns).reshape(len(rows), self.dim)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "covariates": list(self.covariates),
            "baseline_covariates": list(self.baseline_covariates),
            "include_refill_index": self.include_refill_index,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RefillFeatureMap":
        return cls(
            tuple(data["covariates"]),
            tuple(data["baseline_covariates"]),
            bool(data["include_refill_index"]),
        )


@dataclass(frozen=True, eq=False)
class RefillHazardModel:
    """lambda_k(u | history) = baseline(u) exp(gamma'z)."""

    feature_map: RefillFeatureMap
    gamma: np.ndarray
    cut_points: np.ndarray
    rates: np.ndarray
    include_terminal_gap: bool = True
    log_likelihood: float = float("nan")
    converged: bool = True
    iterations: int = 0
    n_events: int = 0
    gamma_se: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self) -> None:
        gamma = _readonly(self.gamma).reshape(-1)
        cuts = _readonly(self.cut_points).reshape(-1)
        rates = _readonly(self.rates).reshape(-1)
        if len(gamma) != self.feature_map.dim:
            raise FeatureDimensionError(
                f"gamma has {len(gamma)} entries for {self.feature_map.dim} features"
            )
        if len(cuts) == 0 or cuts[0] != 0.0 or np.any(np.diff(cuts) <= 0):
            raise ValueError("cut points must start at 0 and increase strictly")
        if len(rates) != len(cuts) or np.any(~np.isfinite(rates)) or np.any(rates < 0):
            raise ValueError("one finite non-negative baseline rate per piece required")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "cut_points", cuts)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "gamma_se", _readonly(self.gamma_se).reshape(-1))

    def baseline_at(self, u: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.cut_points, u, side="right") - 1
        return self.rates[np.clip(idx, 0, None)]

    def scaled(self, factor: float) -> "RefillHazardModel":
        """Same model with the baseline multiplied by ``factor``."""
        return RefillHazardModel(
            self.feature_map,
            self.gamma,
            self.cut_points,
            self.rates * factor,
            self.include_terminal_gap,
            self.log_likelihood,
            self.converged,
            self.iterations,
            self.n_events,
            self.gamma_se,
        )

    def partition(self, s: SubjectTrajectory) -> FollowupPartition:
        return partition_followup(s, self.cut_points[1:], self.include_terminal_gap)

    def piece_rates(self, s: SubjectTrajectory, part: FollowupPartition) -> np.ndarray:
        """Hazard on each partition piece (zero where no refill is at risk)."""
        at_risk = part.gap > 0
        rates = np.zeros(len(part.start))
        if not np.any(at_risk):
            return rates
        mid = part.gap_clock[at_risk] + 0.5 * part.length[at_risk]
        z = self.feature_map.design(s, part.covariate_rows[at_risk], part.gap[at_risk])
        rates[at_risk] = self.baseline_at(mid) * np.exp(z @ self.gamma)
        return rates

    def summary(self) -> Dict[str, Any]:
        return {
            "features": list(self.feature_map.names),
            "gamma": self.gamma.tolist(),
            "gamma_se": self.gamma_se.tolist(),
            "cut_points": self.cut_points.tolist(),
            "baseline_rates": self.rates.tolist(),
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_events": self.n_events,
        }

    def to_dict(self) -> Dict[str, Any]:
        data = self.summary()
        data.update(
            {
                "schema_version": SCHEMA_VERSION,
                "model": "refill_hazard",
                "feature_map": self.feature_map.to_dict(),
                "include_terminal_gap": self.include_terminal_gap,
            }
        )
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RefillHazardModel":
        if (
            data.get("schema_version") != SCHEMA_VERSION
            or data.get("model") != "refill_hazard"
        ):
            raise ValueError("not a refill hazard model export of a supported version")
        return cls(
            RefillFeatureMap.from_dict(data["feature_map"]),
            data["gamma"],
            data["cut_points"],
            data["baseline_rates"],
            bool(data["include_terminal_gap"]),
            float(data["log_likelihood"]),
            bool(data["converged"]),
            int(data["iterations"]),
            int(data["n_events"]),
            data.get("gamma_se", []),
        )


@dataclass(frozen=True, eq=False)
class RefillRecords:
    """Pooled gap records: exposure pieces and event rows."""

    piece_index: np.ndarray
    exposure: np.ndarray
    piece_features: np.ndarray
    event_index: np.ndarray
    event_features: np.ndarray
    names: Tuple[str, ...]


def quantile_cut_points(gaps: np.ndarray, n_pieces: int) -> np.ndarray:
    """Baseline cut points at the quantiles of observed gaps, starting at 0."""
    if n_pieces <= 1:
        return np.array([0.0])
    qs = np.quantile(gaps, np.arange(1, n_pieces) / n_pieces)
    return np.concatenate(([0.0], np.unique(qs[qs > 0])))


def _event_piece(cuts: np.ndarray, gaps: np.ndarray) -> np.ndarray:
    # An event at a cut belongs to the piece ending there
    return np.searchsorted(cuts, gaps, side="left") - 1


def merge_empty_pieces(cuts: np.ndarray, gaps: np.ndarray) -> np.ndarray:
    """Drop cut points until every baseline piece holds at least one event."""
    cuts = np.asarray(cuts, dtype=float)
    while len(cuts) > 1:
        counts = np.bincount(_event_piece(cuts, gaps), minlength=len(cuts))
        empty = np.flatnonzero(counts == 0)
        if not len(empty):
            break
        j = int(empty[0])
        cuts = np.delete(cuts, 1 if j == 0 else j)
    return cuts


def refill_records(
    trajectories: Sequence[SubjectTrajectory],
    feature_map: RefillFeatureMap,
    cut_points: np.ndarray,
    include_terminal_gap: bool = True,
) -> RefillRecords:
    """Build exposure pieces and event rows for every gap of every subject."""
    piece_index, exposure, piece_x = [], [], []
    event_index, event_x = [], []
    for s in trajectories:
        part = partition_followup(s, cut_points[1:], include_terminal_gap)
        at_risk = part.gap > 0
        mid = part.gap_clock[at_risk] + 0.5 * part.length[at_risk]
        z = feature_map.design(s, part.covariate_rows[at_risk], part.gap[at_risk])
        piece_index.append(np.searchsorted(cut_points, mid, side="right") - 1)
        exposure.append(part.length[at_risk])
        piece_x.append(z)

        # Last piece of each observed gap carries the refill
        gap = part.gap[at_risk]
        last = np.r_[gap[1:] != gap[:-1], True] & (gap <= s.K)
        event_x.append(z[last])
        event_index.append(_event_piece(cut_points, s.gaps.gaps))

    return RefillRecords(
        piece_index=np.concatenate(piece_index),
        exposure=np.concatenate(exposure),
        piece_features=np.vstack(piece_x),
        event_index=np.concatenate(event_index),
        event_features=np.vstack(event_x),
        names=feature_map.names,
    )


def _check_feature_variance(records: RefillRecords) -> None:
    for j, name in enumerate(records.names):
        column = records.piece_features[:, j]
        if len(column) == 0 or np.ptp(column) == 0:
            raise ZeroVarianceFeatureError(name)


def _refill_loglik(
    beta: np.ndarray, records: RefillRecords, n_pieces: int
) -> Tuple[float, np.ndarray, np.ndarray]:
    theta, gamma = beta[:n_pieces], beta[n_pieces:]
    with np.errstate(over="ignore", invalid="ignore"):
        mass = np.exp(theta[records.piece_index] + records.piece_features @ gamma)
        mass = mass * records.exposure
    loglik = float(
        np.sum(theta[records.event_index])
        + np.sum(records.event_features @ gamma)
        - np.sum(mass)
    )
    x = records.piece_features
    grad_theta = np.bincount(records.event_index, minlength=n_pieces) - np.bincount(
        records.piece_index, weights=mass, minlength=n_pieces
    )
    grad_gamma = records.event_features.sum(axis=0) - x.T @ mass
    grad = np.concatenate((grad_theta, grad_gamma))

    q = x.shape[1]
    info = np.zeros((n_pieces + q, n_pieces + q))
    info[:n_pieces, :n_pieces] = np.diag(
        np.bincount(records.piece_index, weights=mass, minlength=n_pieces)
    )
    cross = np.zeros((n_pieces, q))
    for j in range(q):
        cross[:, j] = np.bincount(
            records.piece_index, weights=mass * x[:, j], minlength=n_pieces
        )
    info[:n_pieces, n_pieces:] = cross
    info[n_pieces:, :n_pieces] = cross.T
    info[n_pieces:, n_pieces:] = (x * mass[:, None]).T @ x
    return loglik, grad, info


def fit_refill_records(
    records: RefillRecords,
    cut_points: np.ndarray,
    max_iterations: int = 50,
    tolerance: float = 1e-9,
    max_halving: int = 30,
) -> Tuple[np.ndarray, np.ndarray, float, int, np.ndarray]:
    """
    Newton-Raphson on (log baseline rates, gamma).

    Returns:
        tuple: (rates, gamma, log_likelihood, iterations, gamma standard errors)

    Raises:
        SingularInformationError: the information matrix is singular
        ConvergenceError: carrying the last iterate
    """
    n_pieces = len(cut_points)
    events = np.bincount(records.event_index, minlength=n_pieces).astype(float)
    exposure = np.bincount(
        records.piece_index, weights=records.exposure, minlength=n_pieces
    )
    if np.any(exposure <= 0):
        raise DegenerateGapsError("a baseline piece has no exposure time")
    beta = np.concatenate(
        (np.log(events / exposure), np.zeros(records.piece_features.shape[1]))
    )

    loglik, grad, info = _refill_loglik(beta, records, n_pieces)
    iteration = 0
    while np.linalg.norm(grad) > tolerance:
        if iteration >= max_iterations:
            raise ConvergenceError(
                f"refill hazard fit did not converge in {max_iterations} iterations "
                f"(|score|={np.linalg.norm(grad):.3g})",
                last_iterate=beta,
            )
        iteration += 1
        step = _newton_step(info, grad, "refill hazard", records.names)
        scale = 1.0
        for _ in range(max_halving):
            candidate = beta + scale * step
            new_loglik, new_grad, new_info = _refill_loglik(
                candidate, records, n_pieces
            )
            if np.isfinite(new_loglik) and new_loglik >= loglik - 1e-12 * abs(loglik):
                break
            scale *= 0.5
        else:
            raise ConvergenceError(
                "refill hazard fit: step halving exhausted", last_iterate=beta
            )
        beta, loglik, grad, info = candidate, new_loglik, new_grad, new_info
        logger.debug("refill fit iteration %d: loglik=%.8f", iteration, loglik)
        if np.max(np.abs(scale * step)) < 1e-14:
            break

    # unit-vector solves give the inverse, with the same singularity check
    covariance = _newton_step(
        info, np.eye(len(info)), "refill hazard", records.names
    )
    se = np.sqrt(np.diag(covariance)[n_pieces:])
    return np.exp(beta[:n_pieces]), beta[n_pieces:], loglik, iteration, se


def fit_refill_hazard(
    cohort: Sequence[SubjectTrajectory],
    feature_map: RefillFeatureMap,
    n_pieces: int = 5,
    include_terminal_gap: bool = True,
    max_iterations: int = 50,
    tolerance: float = 1e-9,
    cut_points: Optional[Sequence[float]] = None,
) -> RefillHazardModel:
    """
    Fit the refill hazard by full likelihood over pooled gap records.

    Interior ``cut_points`` fix the baseline pieces; without them the pieces
    sit at the quantiles of the observed gaps.

    Raises:
        DegenerateGapsError: every gap sits at the epsilon floor
        ZeroVarianceFeatureError: a feature never varies
        SingularInformationError: features are collinear
        ConvergenceError: Newton-Raphson did not converge
    """
    gaps = np.concatenate([s.gaps.gaps for s in cohort])
    epsilon = max(s.dispensations.epsilon for s in cohort)
    if np.all(gaps <= 2.0 * epsilon):
        raise DegenerateGapsError("all refill gaps are at the epsilon floor")

    if cut_points is None:
        cuts = quantile_cut_points(gaps, n_pieces)
    else:
        cuts = np.concatenate(([0.0], np.asarray(cut_points, dtype=float)))
    cuts = merge_empty_pieces(cuts, gaps)
    records = refill_records(cohort, feature_map, cuts, include_terminal_gap)
    _check_feature_variance(records)

    rates, gamma, loglik, iterations, se = fit_refill_records(
        records, cuts, max_iterations, tolerance
    )
    logger.info(
        "Refill hazard fitted: %d events, %d pieces, loglik=%.4f, %d iterations",
        len(gaps),
        len(cuts),
        loglik,
        iterations,
    )
    return RefillHazardModel(
        feature_map=feature_map,
        gamma=gamma,
        cut_points=cuts,
        rates=rates,
        include_terminal_gap=include_terminal_gap,
        log_likelihood=loglik,
        converged=True,
        iterations=iterations,
        n_events=len(gaps),
        gamma_se=se,
    )


def refill_hazard_at(
    m: RefillHazardModel, k: int, u: float, s: SubjectTrajectory
) -> float:
    """
    Refill hazard of refill k at gap time u, from history up to o_k + u.

    Raises:
        DomainError: u < 0 or k outside 1..K+1
    """
    if u < 0 or not 1 <= k <= s.K + 1:
        raise DomainError(f"subject {s.id}: no refill hazard at k={k}, u={u}")
    origin = float(s.dispensations.origins[k - 1])
    z = m.feature_map.evaluate(s.history(origin + u), k)
    return float(m.baseline_at(u) * np.exp(z @ m.gamma))


def cumulative_refill_hazard(
    m: RefillHazardModel, k: int, u: float, s: SubjectTrajectory
) -> float:
    """Integral of the refill hazard of refill k over [0, u]."""
    if u < 0 or not 1 <= k <= s.K + 1:
        raise DomainError(f"subject {s.id}: no refill hazard at k={k}, u={u}")
    origin = float(s.dispensations.origins[k - 1])
    changes = s.covariates.change_times - origin
    breaks = np.concatenate(([0.0, u], m.cut_points, changes))
    breaks = np.unique(breaks[(breaks >= 0) & (breaks <= u)])
    mid = 0.5 * (breaks[:-1] + breaks[1:])
    rows = s.covariates.rows_at(origin + mid)
    z = m.feature_map.design(s, rows, np.full(len(mid), k))
    return float(np.sum(np.diff(breaks) * m.baseline_at(mid) * np.exp(z @ m.gamma)))


# ---------------------------------------------------------------------------
# Censoring Cox model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CensoringFeatureMap:
    """Features g_C(t, history): covariates and treatment just before t."""

    covariates: Tuple[str, ...] = ()
    baseline_covariates: Tuple[str, ...] = ()
    include_treatment: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "baseline_covariates", tuple(self.baseline_covariates))

    @property
    def names(self) -> Tuple[str, ...]:
        extra = ("treatment",) if self.include_treatment else ()
        return self.covariates + self.baseline_covariates + extra

    @property
    def dim(self) -> int:
        return len(self.names)

    def evaluate(self, s: SubjectTrajectory, times: np.ndarray) -> np.ndarray:
        """Feature rows at each time from values in effect strictly before it."""
        times = np.asarray(times, dtype=float).reshape(-1)
        rows = np.searchsorted(s.covariates.change_times, times, side="left") - 1
        rows = np.clip(rows, 0, None)
        cov_idx = [s.covariates.index_of(name) for name in self.covariates]
        base = [s.baseline_value(name) for name in self.baseline_covariates]
        columns = [s.covariates.values[rows][:, cov_idx]]
        columns.append(np.tile(np.asarray(base, dtype=float), (len(times), 1)))
        if self.include_treatment:
            columns.append(s.path.treated_before(times).astype(float)[:, None])
        return np.hstack(columns).reshape(len(times), self.dim)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "covariates": list(self.covariates),
            "baseline_covariates": list(self.baseline_covariates),
            "include_treatment": self.include_treatment,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CensoringFeatureMap":
        return cls(
            tuple(data["covariates"]),
            tuple(data["baseline_covariates"]),
            bool(data["include_treatment"]),
        )


@dataclass(frozen=True, eq=False)
class CensoringCoxModel:
    """Cox model for censoring with Breslow baseline increments."""

    feature_map: CensoringFeatureMap
    gamma: np.ndarray
    event_times: np.ndarray
    increments: np.ndarray
    log_likelihood: float = float("nan")
    converged: bool = True
    iterations: int = 0
    no_events: bool = False
    information: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    def __post_init__(self) -> None:
        gamma = _readonly(self.gamma).reshape(-1)
        times = _readonly(self.event_times).reshape(-1)
        increments = _readonly(self.increments).reshape(-1)
        if len(gamma) != self.feature_map.dim:
            raise FeatureDimensionError(
                f"gamma has {len(gamma)} entries for {self.feature_map.dim} features"
            )
        if len(times) != len(increments) or np.any(np.diff(times) <= 0):
            raise ValueError(
                "one increment per strictly increasing event time required"
            )
        if np.any(~np.isfinite(increments)) or np.any(increments < 0):
            raise ValueError("Breslow increments must be finite and non-negative")
        information = np.array(self.information, dtype=float)
        if information.size == 0:
            information = np.zeros((len(gamma), len(gamma)))
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "event_times", times)
        object.__setattr__(self, "increments", increments)
        object.__setattr__(
            self,
            "information",
            _readonly(information.reshape(len(gamma), len(gamma))),
        )

    @property
    def n_events(self) -> int:
        return len(self.event_times)

    def _jumps(self, s: SubjectTrajectory, u: float) -> Tuple[np.ndarray, np.ndarray]:
        v_k = float(s.dispensations.refill_times[-1])
        lo = np.searchsorted(self.event_times, v_k, side="right")
        hi = np.searchsorted(self.event_times, u, side="right")
        times = self.event_times[lo:hi]
        z = self.feature_map.evaluate(s, times)
        return times, self.increments[lo:hi] * np.exp(z @ self.gamma)

    def summary(self) -> Dict[str, Any]:
        return {
            "features": list(self.feature_map.names),
            "gamma": self.gamma.tolist(),
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_events": self.n_events,
            "no_events": self.no_events,
        }

    def to_dict(self) -> Dict[str, Any]:
        data = self.summary()
        data.update(
            {
                "schema_version": SCHEMA_VERSION,
                "model": "censoring_cox",
                "feature_map": self.feature_map.to_dict(),
                "event_times": self.event_times.tolist(),
                "increments": self.increments.tolist(),
                "information": self.information.tolist(),
            }
        )
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CensoringCoxModel":
        if (
            data.get("schema_version") != SCHEMA_VERSION
            or data.get("model") != "censoring_cox"
        ):
            raise ValueError("not a censoring model export of a supported version")
        dim = len(data["gamma"])
        return cls(
            CensoringFeatureMap.from_dict(data["feature_map"]),
            data["gamma"],
            data["event_times"],
            data["increments"],
            float(data["log_likelihood"]),
            bool(data["converged"]),
            int(data["iterations"]),
            bool(data["no_events"]),
            np.asarray(data["information"], dtype=float).reshape(dim, dim),
        )


@dataclass(frozen=True, eq=False)
class RiskSetTable:
    """(event time, subject) pairs of the censoring risk sets."""

    event_times: np.ndarray
    deaths: np.ndarray
    pair_event: np.ndarray
    pair_features: np.ndarray
    event_pairs: np.ndarray


def censoring_risk_sets(
    cohort: Sequence[SubjectTrajectory], feature_map: CensoringFeatureMap
) -> RiskSetTable:
    censored = [s for s in cohort if s.event_indicator == 0]
    all_times = np.array([s.followup_time for s in censored], dtype=float)
    times, deaths = np.unique(all_times, return_counts=True)

    pair_event, pair_features, event_pairs = [], [], []
    offset = 0
    for s in cohort:
        v_k = float(s.dispensations.refill_times[-1])
        lo = np.searchsorted(times, v_k, side="right")
        hi = np.searchsorted(times, s.followup_time, side="right")
        idx = np.arange(lo, hi)
        pair_event.append(idx)
        pair_features.append(feature_map.evaluate(s, times[idx]))
        if s.event_indicator == 0:
            # own censoring time is the last event in the subject's window
            event_pairs.append(offset + len(idx) - 1)
        offset += len(idx)

    return RiskSetTable(
        event_times=times,
        deaths=deaths.astype(float),
        pair_event=np.concatenate(pair_event).astype(int),
        pair_features=np.vstack(pair_features),
        event_pairs=np.asarray(event_pairs, dtype=int),
    )


def cox_partial_likelihood(
    gamma: np.ndarray, table: RiskSetTable
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Breslow partial log-likelihood, score and observed information."""
    x = table.pair_features
    n_events = len(table.event_times)
    eta = x @ gamma
    shift = eta.max() if len(eta) else 0.0
    risk = np.exp(eta - shift)
    s0 = np.bincount(table.pair_event, weights=risk, minlength=n_events)
    q = x.shape[1]
    s1 = np.zeros((n_events, q))
    s2 = np.zeros((n_events, q, q))
    for a in range(q):
        s1[:, a] = np.bincount(
            table.pair_event, weights=risk * x[:, a], minlength=n_events
        )
        for b in range(a, q):
            s2[:, a, b] = np.bincount(
                table.pair_event, weights=risk * x[:, a] * x[:, b], minlength=n_events
            )
            s2[:, b, a] = s2[:, a, b]

    d = table.deaths
    loglik = float(np.sum(eta[table.event_pairs]) - np.sum(d * (np.log(s0) + shift)))
    xbar = s1 / s0[:, None]
    score = x[table.event_pairs].sum(axis=0) - d @ xbar
    outer = xbar[:, :, None] * xbar[:, None, :]
    info = np.einsum("e,eab->ab", d, s2 / s0[:, None, None] - outer)
    return loglik, score, info


def breslow_increments(gamma: np.ndarray, table: RiskSetTable) -> np.ndarray:
    risk = np.exp(table.pair_features @ gamma)
    s0 = np.bincount(table.pair_event, weights=risk, minlength=len(table.event_times))
    return table.deaths / s0


def fit_censoring_cox(
    cohort: Sequence[SubjectTrajectory],
    feature_map: CensoringFeatureMap,
    max_iterations: int = 50,
    tolerance: float = 1e-8,
    max_halving: int = 30,
) -> CensoringCoxModel:
    """
    Fit the censoring Cox model on the windows (V_K, X].

    Censoring (event_indicator 0) is the event. Without any censoring event a
    trivial model with S_C = 1 is returned and ``no_events`` is set.

    Raises:
        ZeroVarianceFeatureError: a feature is constant over the risk sets
        SingularInformationError: features are collinear
        ConvergenceError: Newton-Raphson did not reach |score| < tolerance
    """
    if not any(s.event_indicator == 0 for s in cohort):
        logger.warning("No censoring events in cohort; censoring survival set to 1")
        return CensoringCoxModel(
            feature_map,
            np.zeros(feature_map.dim),
            np.empty(0),
            np.empty(0),
            log_likelihood=0.0,
            no_events=True,
            information=np.zeros((feature_map.dim, feature_map.dim)),
        )

    table = censoring_risk_sets(cohort, feature_map)
    for j, name in enumerate(feature_map.names):
        if np.ptp(table.pair_features[:, j]) == 0:
            raise ZeroVarianceFeatureError(name)

    gamma = np.zeros(feature_map.dim)
    loglik, score, info = cox_partial_likelihood(gamma, table)
    iteration = 0
    # Iterate to machine precision; convergence is judged against `tolerance`
    while feature_map.dim and np.linalg.norm(score) > 1e-12 * max(1.0, abs(loglik)):
        if iteration >= max_iterations:
            break
        iteration += 1
        step = _newton_step(info, score, "censoring Cox model", feature_map.names)
        scale = 1.0
        for _ in range(max_halving):
            candidate = gamma + scale * step
            new = cox_partial_likelihood(candidate, table)
            if np.isfinite(new[0]) and new[0] >= loglik - 1e-12 * abs(loglik):
                break
            scale *= 0.5
        else:
            break
        gamma, (loglik, score, info) = candidate, new
        logger.debug("censoring fit iteration %d: loglik=%.10f", iteration, loglik)
        if np.max(np.abs(scale * step)) < 1e-14:
            break

    if np.linalg.norm(score) >= tolerance:
        raise ConvergenceError(
            f"censoring Cox fit did not converge (|score|={np.linalg.norm(score):.3g})",
            last_iterate=gamma,
        )

    increments = breslow_increments(gamma, table)
    logger.info(
        "Censoring model fitted: %d events at %d times, gamma=%s",
        int(table.deaths.sum()),
        len(table.event_times),
        np.round(gamma, 4).tolist(),
    )
    return CensoringCoxModel(
        feature_map=feature_map,
        gamma=gamma,
        event_times=table.event_times,
        increments=increments,
        log_likelihood=loglik,
        converged=True,
        iterations=iteration,
        no_events=False,
        information=info,
    )


def censoring_cumulative_hazard(
    m: CensoringCoxModel, s: SubjectTrajectory, u: float
) -> float:
    """Breslow cumulative censoring hazard over (V_K, u]."""
    _, jumps = m._jumps(s, u)
    return float(np.sum(jumps))


def censoring_survival(
    m: CensoringCoxModel,
    s: SubjectTrajectory,
    u: float,
    positivity_floor: Optional[float] = None,
) -> float:
    """
    Product-limit probability of remaining uncensored through u.

    Args:
        m: fitted censoring model
        s: subject
        u: calendar time, at most the subject's followup time
        positivity_floor: raise when the survival drops below it (None disables)

    Raises:
        ProbabilityRangeError: a product-limit factor is outside [0, 1]
        PositivityViolationError: survival below the floor
    """
    if u > s.followup_time:
        raise DomainError(f"subject {s.id}: u={u} beyond followup {s.followup_time}")
    if u <= s.dispensations.refill_times[-1]:
        return 1.0
    times, jumps = m._jumps(s, u)
    factors = 1.0 - jumps
    if np.any((factors < 0) | (factors > 1)):
        bad = int(np.argmax((factors < 0) | (factors > 1)))
        raise ProbabilityRangeError(
            f"subject {s.id}: survival factor {factors[bad]:.4g} at t={times[bad]}"
        )
    survival = float(np.prod(factors))
    if positivity_floor is not None and not survival >= positivity_floor:
        raise PositivityViolationError(s.id, survival, positivity_floor)
    return survival

