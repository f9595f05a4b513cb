#!/usr/bin/env python3
"""
Batch commands behind the scripts in ``ctsftm/scripts``.

Each command takes a configuration file path and returns the process exit
code: 0 on success, 2 for input or configuration problems, 3 when a
statistical fit does not converge.
"""

import logging
import os
import sys
from typing import Any, Dict, Optional, Tuple

from config import RunConfig, check_schema, load_config, validate_config
from errors import BootstrapError, ConvergenceError, CtsftmError
from ingest import IngestedCohort, read_cohort, write_cohort
from persistence import ResultStore
from pipeline import AnalysisSettings, diagnose, estimate, fit_nuisances
from simulation import simulate_cohort

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3

RESULT_SCHEMA_VERSION = 1
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """Log to stderr; results only ever go to output files."""
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
    )


def _load(config_file: Optional[str]) -> RunConfig:
    return validate_config(load_config(config_file))


def _ingest(run: RunConfig) -> Tuple[IngestedCohort, AnalysisSettings]:
    cohort = read_cohort(
        run.data.covariates,
        run.data.dispensations,
        run.data.outcomes,
        run.dispensation.coverage_window,
        run.dispensation.epsilon,
    )
    check_schema(run, list(cohort.covariate_names), list(cohort.baseline_names))
    settings = AnalysisSettings.from_config(
        run, cohort.covariate_names, cohort.baseline_names
    )
    return cohort, settings


def _exit_code(error: CtsftmError) -> int:
    if isinstance(error, (ConvergenceError, BootstrapError)):
        return EXIT_CONVERGENCE
    return EXIT_INPUT


def cmd_simulate(config_file: Optional[str] = None) -> int:
    """Write the CSV trio and the ground-truth JSON of a simulated cohort."""
    try:
        run = _load(config_file)
        scenario = run.simulation
        cohort = simulate_cohort(scenario, run.seed)
        write_cohort(cohort.subjects, scenario.output_dir)
        truth_path = os.path.join(scenario.output_dir, "truth.json")
        if not ResultStore("simulate").save_json(truth_path, cohort.truth()):
            return EXIT_INPUT
    except CtsftmError as e:
        logger.error("simulate failed: %s", e)
        return _exit_code(e)
    except ValueError as e:
        logger.error("simulate failed on invalid input: %s", e)
        return EXIT_INPUT
    return EXIT_OK


def _result_payload(result: Dict[str, Any], run: RunConfig) -> Dict[str, Any]:
    payload = dict(result)
    payload["schema_version"] = RESULT_SCHEMA_VERSION
    payload["seed"] = run.seed
    # n_jobs is echoed in the sidecar only
    payload["config"] = run.model_dump(exclude={"estimator": {"n_jobs"}})
    return payload


def _runtime_meta(run: RunConfig) -> Dict[str, Any]:
    return {"n_jobs": run.estimator.n_jobs}


def cmd_estimate(config_file: Optional[str] = None) -> int:
    """
    Run Steps 1-3 with bootstrap inference and write the result JSON.

    A non-converged solve still writes its last iterate with converged=false.
    """
    run = None
    store = None
    try:
        run = _load(config_file)
        cohort, settings = _ingest(run)
        store = ResultStore("estimate", run.models_dir)
        nuisances = fit_nuisances(cohort.subjects, settings)
        store.save_models(nuisances.refill, nuisances.censoring)
        result = estimate(cohort.subjects, settings, run.seed, nuisances)
    except ConvergenceError as e:
        logger.error("estimate did not converge: %s", e)
        if e.result is not None and run is not None and store is not None:
            store.save_json(
                run.output,
                _result_payload(e.result.to_dict(), run),
                _runtime_meta(run),
            )
        return EXIT_CONVERGENCE
    except CtsftmError as e:
        logger.error("estimate failed: %s", e)
        return _exit_code(e)
    except ValueError as e:
        logger.error("estimate failed on invalid input: %s", e)
        return EXIT_INPUT

    logger.info("psi-hat = %s (|EE| = %.3g)", result.psi_hat.to_list(), result.ee_norm)
    payload = _result_payload(result.to_dict(), run)
    if not store.save_json(run.output, payload, _runtime_meta(run)):
        return EXIT_INPUT
    return EXIT_OK


def cmd_diagnose(config_file: Optional[str] = None) -> int:
    """
    Write martingale and weight diagnostics.

    Nuisance models exported by a previous ``estimate`` run are reused when
    ``models_dir`` is configured; missing ones are refitted.
    """
    try:
        run = _load(config_file)
        cohort, settings = _ingest(run)
        store = ResultStore("diagnose", run.models_dir)
        refill, censoring = store.load_models()
        nuisances = fit_nuisances(cohort.subjects, settings, refill, censoring)
        report = diagnose(cohort.subjects, settings, nuisances)
    except CtsftmError as e:
        logger.error("diagnose failed: %s", e)
        return _exit_code(e)
    except ValueError as e:
        logger.error("diagnose failed on invalid input: %s", e)
        return EXIT_INPUT

    report["seed"] = run.seed
    if not store.save_json(run.diagnostics.output, report):
        return EXIT_INPUT
    failed = [
        name
        for name, entry in report["martingale_means"].items()
        if entry["status"] == "FAIL"
    ]
    if failed:
        logger.warning("martingale mean checks failed for %s", failed)
    if report["covariation"]["constant"]["status"] == "FAIL":
        logger.warning("covariation ratio outside tolerance")
    return EXIT_OK
