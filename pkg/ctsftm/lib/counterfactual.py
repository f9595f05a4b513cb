#!/usr/bin/env python3
"""
Mimicking counterfactual baseline time U(psi).

U(psi) integrates exp{(psi1 + psi2'g(L_u)) A_u} over [0, horizon]. Every
process involved is a step function, so the integral is an exact sum over the
pieces where treatment and covariates are constant.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np

from errors import DomainError, ExponentOverflowError, FeatureDimensionError
from trajectory import ExposurePath, SubjectTrajectory

logger = logging.getLogger(__name__)

# Largest |psi1 + psi2'g| accepted on a treated piece
EXPONENT_LIMIT = 50.0

PathLike = Union[SubjectTrajectory, ExposurePath]


@dataclass(frozen=True, eq=False)
class PsiVector:
    """Causal parameter psi = (psi1, psi2)."""

    psi1: float
    psi2: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self) -> None:
        psi2 = np.array(self.psi2, dtype=float).reshape(-1)
        if not np.isfinite(self.psi1) or not np.all(np.isfinite(psi2)):
            raise DomainError("psi entries must be finite")
        psi2.setflags(write=False)
        object.__setattr__(self, "psi1", float(self.psi1))
        object.__setattr__(self, "psi2", psi2)

    @property
    def dim(self) -> int:
        return 1 + len(self.psi2)

    def as_array(self) -> np.ndarray:
        return np.concatenate(([self.psi1], self.psi2))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "PsiVector":
        values = np.asarray(values, dtype=float).reshape(-1)
        return cls(values[0], values[1:])

    @classmethod
    def zeros(cls, dim: int) -> "PsiVector":
        return cls.from_array(np.zeros(dim))

    def to_list(self) -> list:
        return [float(v) for v in self.as_array()]

    def __repr__(self) -> str:
        return f"PsiVector({self.to_list()})"


@dataclass(frozen=True, eq=False)
class EffectModifierMap:
    """g(L): named covariate columns, optionally centered."""

    columns: Tuple[str, ...] = ()
    centers: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        columns = tuple(self.columns)
        centers = tuple(float(c) for c in self.centers) or (0.0,) * len(columns)
        if len(centers) != len(columns):
            raise FeatureDimensionError("one center per effect modifier required")
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "centers", centers)

    @classmethod
    def absent(cls) -> "EffectModifierMap":
        return cls((), ())

    @property
    def dim(self) -> int:
        return len(self.columns)

    def evaluate(self, values: np.ndarray, names: Sequence[str]) -> np.ndarray:
        """g applied row-wise to covariate vectors laid out as ``names``."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        try:
            idx = [list(names).index(c) for c in self.columns]
        except ValueError:
            raise FeatureDimensionError(
                f"effect modifiers {self.columns} not all in covariates {tuple(names)}"
            )
        return values[:, idx] - np.asarray(self.centers)

    def to_dict(self) -> Dict[str, Any]:
        return {"columns": list(self.columns), "centers": list(self.centers)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EffectModifierMap":
        return cls(tuple(data["columns"]), tuple(data["centers"]))


def _resolve(s: PathLike, horizon: Any) -> Tuple[ExposurePath, float]:
    if isinstance(s, SubjectTrajectory):
        horizon = s.followup_time if horizon is None else float(horizon)
        if horizon > s.followup_time:
            raise DomainError(
                f"subject {s.id}: horizon {horizon} beyond followup {s.followup_time}"
            )
        path = s.path
    else:
        if horizon is None:
            raise DomainError("a horizon is required for a bare exposure path")
        path = s
        horizon = float(horizon)
    if horizon < 0:
        raise DomainError("horizon must be non-negative")
    return path, horizon


def treated_exponents(
    path: ExposurePath, psi: PsiVector, g: EffectModifierMap, horizon: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Piecewise exponent (psi1 + psi2'g) A on [0, horizon].

    Returns:
        tuple: (breaks, treated, exponent, g values per piece)

    Raises:
        ExponentOverflowError: a treated piece leaves [-EXPONENT_LIMIT, EXPONENT_LIMIT]
    """
    if psi.dim != g.dim + 1:
        raise FeatureDimensionError(
            f"psi has dimension {psi.dim}, effect modifiers need {g.dim + 1}"
        )
    breaks, treated, rows = path.segments(horizon)
    gvals = g.evaluate(path.covariates.values[rows], path.covariates.names)
    eta = psi.psi1 + gvals @ psi.psi2
    on = treated.astype(bool)
    bad = on & ~(np.abs(eta) <= EXPONENT_LIMIT)
    if np.any(bad):
        i = int(np.argmax(bad))
        segment = (float(breaks[i]), float(breaks[i + 1]))
        raise ExponentOverflowError(
            f"exponent {eta[i]:.4g} on treated segment {segment} exceeds "
            f"+-{EXPONENT_LIMIT}",
            segment=segment,
        )
    return breaks, treated, np.where(on, eta, 0.0), gvals


def mimicking_time(
    s: PathLike, psi: PsiVector, g: EffectModifierMap, horizon: Any = None
) -> float:
    """
    U(psi) over [0, horizon] by exact piece summation.

    Args:
        s: subject (horizon defaults to its followup time) or exposure path
        psi: causal parameter
        g: effect modifier map
        horizon: upper integration limit (days)
    """
    path, horizon = _resolve(s, horizon)
    breaks, _, exponent, _ = treated_exponents(path, psi, g, horizon)
    return float(np.sum(np.diff(breaks) * np.exp(exponent)))


def mimicking_gradient(
    s: PathLike, psi: PsiVector, g: EffectModifierMap, horizon: Any = None
) -> np.ndarray:
    """dU(psi)/dpsi; untreated pieces contribute nothing."""
    path, horizon = _resolve(s, horizon)
    breaks, treated, exponent, gvals = treated_exponents(path, psi, g, horizon)
    weight = np.diff(breaks) * np.exp(exponent) * treated
    design = np.column_stack([np.ones(len(weight)), gvals])
    return weight @ design


def invert_mimicking(
    u_value: float, path: PathLike, psi: PsiVector, g: EffectModifierMap
) -> float:
    """
    Calendar time tau at which U(psi) reaches u_value.

    The path is extended past its last break with its final piece.

    Raises:
        DomainError: u_value <= 0
    """
    if not u_value > 0:
        raise DomainError(f"u_value must be positive, got {u_value}")
    if isinstance(path, SubjectTrajectory):
        path = path.path

    end = path.last_breakpoint
    breaks, _, exponent, _ = treated_exponents(path, psi, g, end + 1.0)
    rates = np.exp(exponent)
    cumulative = np.concatenate(([0.0], np.cumsum(np.diff(breaks) * rates)))
    # The last piece runs from `end` onwards with constant rate
    finite = np.searchsorted(breaks, end, side="right") - 1
    if u_value <= cumulative[finite]:
        i = int(np.searchsorted(cumulative, u_value, side="left")) - 1
        return float(breaks[i] + (u_value - cumulative[i]) / rates[i])
    return float(breaks[finite] + (u_value - cumulative[finite]) / rates[-1])
