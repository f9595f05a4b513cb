#!/usr/bin/env python3
"""
Exception hierarchy for the ctSFTM library.

Scripts map these to exit codes: input and configuration problems exit 2,
statistical non-convergence exits 3.
"""

from typing import Any, Optional, Sequence


class CtsftmError(Exception):
    """Base class for all library errors"""

    pass


class InputValidationError(CtsftmError):
    """Exception raised when ingested data violates a trajectory invariant"""

    def __init__(
        self,
        message: str,
        subject_id: Optional[str] = None,
        rows: Optional[Sequence[Any]] = None,
    ) -> None:
        if subject_id is not None:
            message = f"subject {subject_id}: {message}"
        super().__init__(message)
        self.subject_id = subject_id
        self.rows = list(rows) if rows is not None else []


class SubjectRejectedError(InputValidationError):
    """Subject cannot enter the analysis (no refill after baseline, X <= V_K)"""

    pass


class ConfigError(CtsftmError):
    """Exception raised for invalid configuration values"""

    def __init__(self, message: str, field: Optional[str] = None) -> None:
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class DomainError(CtsftmError, ValueError):
    """A process was evaluated outside the time range it is defined on"""

    pass


class ExponentOverflowError(CtsftmError, OverflowError):
    """Treated-segment exponent outside the allowed range"""

    def __init__(self, message: str, segment: Optional[tuple] = None) -> None:
        super().__init__(message)
        self.segment = segment


class ZeroVarianceFeatureError(CtsftmError):
    """A hazard feature is constant across all records"""

    def __init__(self, feature: str) -> None:
        super().__init__(f"feature '{feature}' has zero variance")
        self.feature = feature


class DegenerateGapsError(CtsftmError):
    """All refill gaps collapse onto the epsilon floor"""

    pass


class SingularInformationError(CtsftmError):
    """A nuisance information matrix is singular (collinear features)"""

    def __init__(self, model: str, features: Sequence[str] = ()) -> None:
        super().__init__(
            f"{model}: information matrix is singular; features "
            f"{list(features)} are collinear or redundant"
        )
        self.model = model
        self.features = tuple(features)


class PredictabilityError(CtsftmError, AssertionError):
    """A history query looked at or past its evaluation time"""

    pass


class PositivityViolationError(CtsftmError):
    """Censoring survival fell below the positivity floor"""

    def __init__(self, subject_id: str, value: float, floor: float) -> None:
        super().__init__(
            f"subject {subject_id}: censoring survival {value:.4g} "
            f"below positivity floor {floor:.4g}"
        )
        self.subject_id = subject_id
        self.value = value
        self.floor = floor


class NonFiniteIntegrandError(CtsftmError, ValueError):
    """A stochastic-integral integrand produced NaN or infinity"""

    pass


class ConvergenceError(CtsftmError):
    """A Newton-Raphson fit did not converge"""

    def __init__(
        self,
        message: str,
        last_iterate: Any = None,
        trace: Optional[list] = None,
        result: Any = None,
    ) -> None:
        super().__init__(message)
        self.last_iterate = last_iterate
        self.trace = trace or []
        self.result = result


class NonIdentifiableError(ConvergenceError):
    """Estimating-equation Jacobian is singular; psi is not identified"""

    pass


class BootstrapError(CtsftmError):
    """Too many bootstrap replicates failed"""

    def __init__(self, message: str, diagnostics: Optional[dict] = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SimulationError(CtsftmError):
    """Scenario could not produce a valid subject"""

    pass


class FeatureDimensionError(CtsftmError, ValueError):
    """Feature vector or parameter dimension does not match the model"""

    pass


class ProbabilityRangeError(CtsftmError, ValueError):
    """A product-limit factor fell outside [0, 1]"""

    pass
