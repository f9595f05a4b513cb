#!/usr/bin/env python
"""
Configuration loader for the ctSFTM analysis commands.

This module handles loading configuration from external JSON files layered
over DEFAULT_CONFIG. Every section is then validated so that a bad value is
reported with its dotted field name (``simulation.refill.rate``).
"""

import copy
import json
import logging
import math
import os
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError

logger = logging.getLogger(__name__)

# Default configuration values
DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": None,  # None resolves to 0 with a warning
    "output": "ctsftm_result.json",
    "models_dir": None,  # fitted nuisance JSON is written/read here when set
    # Input files (data_model CSV trio)
    "data": {
        "covariates": "covariates.csv",
        "dispensations": "dispensations.csv",
        "outcomes": "outcomes.csv",
    },
    "dispensation": {
        "coverage_window": 30.0,  # days covered by one prescription
        "epsilon": 1e-6,  # days
    },
    # Effect modifiers g(L): covariate names, optional centering constants
    "model": {
        "effect_modifiers": [],
        "centers": [],
    },
    # Step 1 nuisance: refill gap-time hazard
    "refill_hazard": {
        "covariates": None,  # None = every ingested covariate column
        "baseline_covariates": [],
        "include_refill_index": True,
        "n_pieces": 5,
        "cut_points": None,  # interior baseline cuts; None = gap quantiles
        "include_terminal_gap": True,
        "max_iterations": 50,
        "tolerance": 1e-9,
    },
    # Step 2 nuisance: censoring Cox model
    "censoring": {
        "covariates": None,
        "baseline_covariates": [],
        "include_treatment": False,
        "positivity_floor": 0.05,
        "max_iterations": 50,
        "tolerance": 1e-8,
    },
    # Step 3 nuisance: outcome regression E{U(psi) | history, at risk}
    "outcome_regression": {
        "covariates": None,
        "baseline_covariates": None,  # None = every baseline column
        "include_gap_clock": True,
        "include_refill_index": True,
        "include_elapsed_mimicking": True,
    },
    "estimator": {
        "index": "simple",  # simple | optimal
        "index_scale": 1.0,
        "tolerance": 1e-8,
        "max_iterations": 100,
        "step_halving": 20,
        "max_step": 1.0,  # largest Newton step, max-norm in psi units
        "variance_floor": 1e-8,
        "initial_psi": None,
        "bootstrap_replicates": 200,  # 0 disables the bootstrap
        "confidence_level": 0.95,
        "max_failure_fraction": 0.2,
        "n_jobs": 1,
    },
    "diagnostics": {
        "output": "ctsftm_diagnostics.json",
        "covariation_tolerance": 0.25,
        "hazard_scale": 1.0,  # multiplies the fitted refill baseline
    },
    # Scenario used by the simulate command
    "simulation": {
        "output_dir": "simulated",
        "n": 500,
        "psi": [-0.5, 0.3],
        "effect_modifiers": ["l1"],
        "coverage_window": 30.0,
        "epsilon": 1e-6,
        "max_resample": 100,
        "baseline": {
            "distribution": "exponential",
            "rate": 1.0 / 1000.0,
            "shape": 1.0,
            "confounding": 0.5,
        },
        "covariates": {
            "update_rate": 1.0 / 60.0,
            "ar_coefficient": 0.7,
            "innovation_sd": 0.7,
            "l2_probability": 0.5,
        },
        "refill": {
            "rate": 1.0 / 10.0,  # prompt refills up to change_point
            "change_point": 15.0,  # gap-clock days
            "late_rate": 1.0 / 150.0,  # after change_point
            "gamma": {"l1": 0.4, "l2": -0.5},
            "always_on": False,
        },
        "censoring": {
            "rate": 1.0 / 200.0,
            "gamma": {"l1": 0.3, "l2": 0.5},
        },
    },
    # Testing settings
    "testing": {
        "smoke_test": False,
        "smoke_bootstrap_replicates": 50,
    },
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    covariates: str
    dispensations: str
    outcomes: str


class DispensationSection(_Section):
    coverage_window: float = Field(gt=0)
    epsilon: float = Field(gt=0)

    @model_validator(mode="after")
    def _epsilon_below_window(self) -> "DispensationSection":
        if self.epsilon >= self.coverage_window:
            raise ValueError("epsilon must be smaller than coverage_window")
        return self


class ModelSection(_Section):
    effect_modifiers: List[str]
    centers: List[float]

    @model_validator(mode="after")
    def _centers_match(self) -> "ModelSection":
        if self.centers and len(self.centers) != len(self.effect_modifiers):
            raise ValueError("centers must be empty or match effect_modifiers")
        return self


class RefillHazardSection(_Section):
    covariates: Optional[List[str]]
    baseline_covariates: List[str]
    include_refill_index: bool
    n_pieces: int = Field(ge=1)
    cut_points: Optional[List[float]] = None
    include_terminal_gap: bool
    max_iterations: int = Field(ge=1)
    tolerance: float = Field(gt=0)

    @model_validator(mode="after")
    def _increasing_cuts(self) -> "RefillHazardSection":
        cuts = self.cut_points or []
        if any(c <= 0 for c in cuts) or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError("cut_points must be positive and strictly increasing")
        return self


class CensoringSection(_Section):
    covariates: Optional[List[str]]
    baseline_covariates: List[str]
    include_treatment: bool
    positivity_floor: float = Field(ge=0, lt=1)
    max_iterations: int = Field(ge=1)
    tolerance: float = Field(gt=0)


class OutcomeRegressionSection(_Section):
    covariates: Optional[List[str]]
    baseline_covariates: Optional[List[str]]
    include_gap_clock: bool
    include_refill_index: bool
    include_elapsed_mimicking: bool


class EstimatorConfig(_Section):
    """Step 3 solver and inference settings."""

    index: Literal["simple", "optimal"] = "simple"
    index_scale: float = Field(default=1.0, gt=0)
    tolerance: float = Field(default=1e-8, gt=0)
    max_iterations: int = Field(default=100, ge=1)
    step_halving: int = Field(default=20, ge=0)
    max_step: float = Field(default=1.0, gt=0)
    variance_floor: float = Field(default=1e-8, gt=0)
    initial_psi: Optional[List[float]] = None
    bootstrap_replicates: int = Field(default=200, ge=0)
    confidence_level: float = Field(default=0.95, gt=0, lt=1)
    max_failure_fraction: float = Field(default=0.2, ge=0, le=1)
    n_jobs: int = 1

    @model_validator(mode="after")
    def _enough_replicates(self) -> "EstimatorConfig":
        if 0 < self.bootstrap_replicates < 50:
            raise ValueError("bootstrap_replicates must be 0 or at least 50")
        return self


class DiagnosticsSection(_Section):
    output: str
    covariation_tolerance: float = Field(gt=0)
    hazard_scale: float = Field(gt=0)


class BaselineLaw(_Section):
    distribution: Literal["exponential", "weibull"]
    rate: float = Field(gt=0)
    shape: float = Field(gt=0)
    confounding: float


class CovariateDynamics(_Section):
    update_rate: float = Field(gt=0)
    ar_coefficient: float = Field(gt=-1, lt=1)
    innovation_sd: float = Field(ge=0)
    l2_probability: float = Field(ge=0, le=1)


class RefillLaw(_Section):
    """Gap-clock refill hazard: rate before change_point, late_rate after."""

    rate: float = Field(gt=0)
    change_point: Optional[float] = Field(default=None, gt=0)
    late_rate: Optional[float] = Field(default=None, gt=0)
    gamma: Dict[str, float]
    always_on: bool = False

    @model_validator(mode="after")
    def _two_phase(self) -> "RefillLaw":
        if (self.change_point is None) != (self.late_rate is None):
            raise ValueError("change_point and late_rate must be set together")
        return self

    def rate_at(self, u: float) -> float:
        """Baseline rate at gap-clock time u."""
        if self.change_point is not None and u >= self.change_point:
            return float(self.late_rate)
        return self.rate

    def mean_gap(self) -> float:
        """Mean gap at gamma'z = 0."""
        if self.change_point is None:
            return 1.0 / self.rate
        prompt = math.exp(-self.rate * self.change_point)
        return (1.0 - prompt) / self.rate + prompt / self.late_rate


class CensoringLaw(_Section):
    rate: float = Field(gt=0)
    gamma: Dict[str, float]


SCENARIO_COVARIATES = ("l1", "l2")


class ScenarioConfig(_Section):
    """Generative scenario for the structural simulator."""

    output_dir: str
    n: int = Field(ge=1)
    psi: List[float] = Field(min_length=1)
    effect_modifiers: List[str]
    coverage_window: float = Field(gt=0)
    epsilon: float = Field(gt=0)
    max_resample: int = Field(ge=1)
    baseline: BaselineLaw
    covariates: CovariateDynamics
    refill: RefillLaw
    censoring: CensoringLaw

    @model_validator(mode="after")
    def _check_dimensions(self) -> "ScenarioConfig":
        if len(self.psi) != 1 + len(self.effect_modifiers):
            raise ValueError("psi needs one entry plus one per effect modifier")
        known = set(SCENARIO_COVARIATES)
        for name in list(self.effect_modifiers) + list(self.refill.gamma) + list(
            self.censoring.gamma
        ):
            if name not in known:
                raise ValueError(f"unknown scenario covariate '{name}'")
        if self.epsilon >= self.coverage_window:
            raise ValueError("epsilon must be smaller than coverage_window")
        return self


class TestingSection(_Section):
    smoke_test: bool
    smoke_bootstrap_replicates: int = Field(ge=0)


class RunConfig(_Section):
    """Validated view of a merged configuration dictionary."""

    seed: int = Field(ge=0)
    output: str
    models_dir: Optional[str]
    data: DataSection
    dispensation: DispensationSection
    model: ModelSection
    refill_hazard: RefillHazardSection
    censoring: CensoringSection
    outcome_regression: OutcomeRegressionSection
    estimator: EstimatorConfig
    diagnostics: DiagnosticsSection
    simulation: ScenarioConfig
    testing: TestingSection


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if key.startswith("_"):
            continue
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            # gamma maps are replaced whole so a covariate can be dropped
            if key == "gamma":
                base[key] = dict(value)
            else:
                _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def load_config(config_file: Optional[str] = None) -> Dict[str, Any]:
    """
    Load configuration from JSON file, falling back to defaults.

    Args:
        config_file (str): Path to configuration file

    Returns:
        dict: Merged configuration dictionary (not yet validated)

    Raises:
        ConfigError: file exists but is not valid JSON
    """
    config = copy.deepcopy(DEFAULT_CONFIG)

    test_mode = os.environ.get("CTSFTM_TEST_MODE", "").lower()
    is_smoke_mode = test_mode == "smoke"

    if config_file is not None:
        if not os.path.exists(config_file):
            raise ConfigError(f"configuration file {config_file} not found")
        try:
            with open(config_file, "r", encoding="utf-8") as f:
                user_config = json.load(f)
        except (IOError, json.JSONDecodeError) as e:
            raise ConfigError(f"could not load {config_file}: {e}")
        if not isinstance(user_config, dict):
            raise ConfigError("top level must be a JSON object")
        _deep_merge(config, user_config)
        logger.info("Loaded configuration from %s", config_file)

        # Relative paths are resolved against the config file location
        base_dir = os.path.dirname(os.path.abspath(config_file))
        locations = [(config["data"], key) for key in config["data"]]
        locations += [
            (config, "output"),
            (config, "models_dir"),
            (config["diagnostics"], "output"),
            (config["simulation"], "output_dir"),
        ]
        for section, key in locations:
            path = section.get(key)
            if isinstance(path, str) and not os.path.isabs(path):
                section[key] = os.path.join(base_dir, path)

    if config.get("seed") is None:
        logger.warning("No seed configured, using deterministic default seed 0")
        config["seed"] = 0

    if is_smoke_mode:
        config["testing"]["smoke_test"] = True

    if config["testing"].get("smoke_test"):
        replicates = config["estimator"]["bootstrap_replicates"]
        if replicates:
            config["estimator"]["bootstrap_replicates"] = min(
                replicates, config["testing"]["smoke_bootstrap_replicates"]
            )

    return config


def validate_config(config: Dict[str, Any]) -> RunConfig:
    """
    Validate a merged configuration dictionary.

    Raises:
        ConfigError: naming the first offending field
    """
    try:
        return RunConfig.model_validate(config)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise ConfigError(first["msg"], field=field)


def scenario_config(overrides: Optional[Dict[str, Any]] = None) -> ScenarioConfig:
    """Build a ScenarioConfig from the default scenario plus overrides."""
    scenario = copy.deepcopy(DEFAULT_CONFIG["simulation"])
    _deep_merge(scenario, overrides or {})
    try:
        return ScenarioConfig.model_validate(scenario)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(["simulation"] + [str(part) for part in first["loc"]])
        raise ConfigError(first["msg"], field=field)


def check_schema(
    run_config: RunConfig, covariate_names: List[str], baseline_names: List[str]
) -> None:
    """
    Check that every covariate named by the configuration exists in the data.

    Raises:
        ConfigError: unknown covariate or baseline column
    """
    references = {
        "model.effect_modifiers": (
            run_config.model.effect_modifiers,
            covariate_names,
        ),
        "refill_hazard.covariates": (
            run_config.refill_hazard.covariates,
            covariate_names,
        ),
        "refill_hazard.baseline_covariates": (
            run_config.refill_hazard.baseline_covariates,
            baseline_names,
        ),
        "censoring.covariates": (run_config.censoring.covariates, covariate_names),
        "censoring.baseline_covariates": (
            run_config.censoring.baseline_covariates,
            baseline_names,
        ),
        "outcome_regression.covariates": (
            run_config.outcome_regression.covariates,
            covariate_names,
        ),
        "outcome_regression.baseline_covariates": (
            run_config.outcome_regression.baseline_covariates,
            baseline_names,
        ),
    }
    for field, (selected, available) in references.items():
        for name in selected or []:
            if name not in available:
                raise ConfigError(f"unknown column '{name}'", field=field)


def create_sample_config(filename: str = "ctsftm_config.json.example") -> None:
    """
    Create a sample configuration file for users to customize.

    Args:
        filename (str): Name of the sample config file to create
    """
    sample_config = {
        "_comment": "ctSFTM configuration - copy to ctsftm_config.json and customize",
        "seed": 20240101,
        "output": "ctsftm_result.json",
        "data": {
            "_comment": "CSV inputs, relative to this file",
            "covariates": "simulated/covariates.csv",
            "dispensations": "simulated/dispensations.csv",
            "outcomes": "simulated/outcomes.csv",
        },
        "dispensation": {
            "_comment": "Days covered by one prescription and the gap-time epsilon",
            "coverage_window": 30.0,
            "epsilon": 1e-6,
        },
        "model": {
            "_comment": "Covariates modifying the treatment effect",
            "effect_modifiers": ["l1"],
            "centers": [0.0],
        },
        "refill_hazard": {"covariates": ["l1", "l2"], "n_pieces": 5},
        "censoring": {"covariates": ["l1", "l2"], "positivity_floor": 0.05},
        "outcome_regression": {"covariates": ["l1", "l2"]},
        "estimator": {
            "_comment": "index is simple or optimal",
            "index": "simple",
            "bootstrap_replicates": 200,
            "n_jobs": 1,
        },
        "simulation": {
            "_comment": "Scenario used by simulate.py",
            "output_dir": "simulated",
            "n": 500,
            "psi": [-0.5, 0.3],
        },
    }

    with open(filename, "w", encoding="utf-8") as f:
        json.dump(sample_config, f, indent=4)

    logger.info("Created sample configuration file: %s", filename)


if __name__ == "__main__":
    # When run directly, create a sample config file
    logging.basicConfig(level=logging.INFO)
    create_sample_config()
