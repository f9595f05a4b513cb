#!/usr/bin/env python3
"""
CSV ingestion and emission of subject trajectories.

Three long-format files describe a cohort:

    covariates.csv     subject_id, time, l1 .. l(p-1)     one row per change
    dispensations.csv  subject_id, refill_time            baseline row at 0
    outcomes.csv       subject_id, followup_time, event_indicator, x0_1 ..

Problems are collected over the whole input and reported together.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import InputValidationError
from trajectory import CovariateProcess, SubjectTrajectory, normalize_dispensations

logger = logging.getLogger(__name__)

ID_COLUMN = "subject_id"
REQUIRED_COLUMNS = {
    "covariates": (ID_COLUMN, "time"),
    "dispensations": (ID_COLUMN, "refill_time"),
    "outcomes": (ID_COLUMN, "followup_time", "event_indicator"),
}
# Exact float round trip through text
FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class IngestedCohort:
    subjects: Tuple[SubjectTrajectory, ...]
    covariate_names: Tuple[str, ...]
    baseline_names: Tuple[str, ...]


def _read_table(path: str, kind: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise InputValidationError(f"{kind} file {path} not found")
    try:
        frame = pd.read_csv(path, dtype={ID_COLUMN: str}, encoding="utf-8")
    except (ValueError, pd.errors.ParserError) as e:
        raise InputValidationError(f"could not parse {kind} file {path}: {e}")

    missing = [c for c in REQUIRED_COLUMNS[kind] if c not in frame.columns]
    if missing:
        raise InputValidationError(f"{kind} file {path} lacks columns {missing}")

    values = frame.drop(columns=[ID_COLUMN]).apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1) | frame[ID_COLUMN].isna()
    if bad.any():
        # header is line 1
        lines = [int(i) + 2 for i in np.flatnonzero(bad.to_numpy())]
        raise InputValidationError(
            f"{kind} file {path}: missing or non-numeric values on lines {lines[:20]}",
            rows=lines,
        )
    values.insert(0, ID_COLUMN, frame[ID_COLUMN])
    return values


def read_cohort(
    covariates_path: str,
    dispensations_path: str,
    outcomes_path: str,
    coverage_window: float,
    epsilon: float,
) -> IngestedCohort:
    """
    Read and validate the CSV trio.

    Dispensations are normalized (overlapping refills shifted) on the way in.

    Raises:
        InputValidationError: listing every offending row or subject
    """
    covariates = _read_table(covariates_path, "covariates")
    dispensations = _read_table(dispensations_path, "dispensations")
    outcomes = _read_table(outcomes_path, "outcomes")

    covariate_names = tuple(
        c for c in covariates.columns if c not in REQUIRED_COLUMNS["covariates"]
    )
    baseline_names = tuple(
        c for c in outcomes.columns if c not in REQUIRED_COLUMNS["outcomes"]
    )

    duplicated = outcomes[ID_COLUMN].duplicated()
    if duplicated.any():
        raise InputValidationError(
            "duplicate subjects in outcomes file",
            rows=outcomes.loc[duplicated, ID_COLUMN].tolist(),
        )

    by_subject_cov = dict(tuple(covariates.groupby(ID_COLUMN, sort=False)))
    by_subject_disp = dict(tuple(dispensations.groupby(ID_COLUMN, sort=False)))
    known = set(outcomes[ID_COLUMN])
    strays = sorted((set(by_subject_cov) | set(by_subject_disp)) - known)
    problems: List[str] = [f"subject {sid}: no outcome row" for sid in strays]

    subjects = []
    for row in outcomes.itertuples(index=False):
        sid = str(getattr(row, ID_COLUMN))
        try:
            subjects.append(
                _build_subject(
                    row,
                    by_subject_cov.get(sid),
                    by_subject_disp.get(sid),
                    covariate_names,
                    baseline_names,
                    coverage_window,
                    epsilon,
                )
            )
        except InputValidationError as e:
            problems.append(str(e))

    if problems:
        for problem in problems:
            logger.error(problem)
        raise InputValidationError(
            f"{len(problems)} subject(s) failed validation: {problems[0]}",
            rows=problems,
        )
    logger.info(
        "Ingested %d subjects, covariates %s, baseline %s",
        len(subjects),
        list(covariate_names),
        list(baseline_names),
    )
    return IngestedCohort(tuple(subjects), covariate_names, baseline_names)


def _build_subject(
    row: tuple,
    covariates: Optional[pd.DataFrame],
    dispensations: Optional[pd.DataFrame],
    covariate_names: Sequence[str],
    baseline_names: Sequence[str],
    coverage_window: float,
    epsilon: float,
) -> SubjectTrajectory:
    sid = str(getattr(row, ID_COLUMN))
    if covariates is None:
        raise InputValidationError("no covariate rows", subject_id=sid)
    if dispensations is None:
        raise InputValidationError("no dispensation rows", subject_id=sid)

    covariates = covariates.sort_values("time", kind="stable")
    try:
        process = CovariateProcess(
            covariates["time"].to_numpy(),
            covariates[list(covariate_names)].to_numpy(dtype=float),
            tuple(covariate_names),
        )
    except InputValidationError as e:
        raise InputValidationError(str(e), subject_id=sid)

    refills = np.sort(dispensations["refill_time"].to_numpy(dtype=float))
    record = normalize_dispensations(refills, coverage_window, epsilon, subject_id=sid)
    event = getattr(row, "event_indicator")
    return SubjectTrajectory(
        id=sid,
        followup_time=float(getattr(row, "followup_time")),
        event_indicator=int(event) if float(event) in (0.0, 1.0) else -1,
        baseline_covariates=np.array([float(getattr(row, n)) for n in baseline_names]),
        covariates=process,
        dispensations=record,
        baseline_names=tuple(baseline_names),
    )


def write_cohort(
    subjects: Sequence[SubjectTrajectory], directory: str
) -> Dict[str, str]:
    """
    Write the CSV trio for a cohort.

    Returns:
        dict: file kind -> path
    """
    os.makedirs(directory, exist_ok=True)
    covariate_rows, dispensation_rows, outcome_rows = [], [], []
    for s in subjects:
        names = s.covariates.names
        for t, values in zip(s.covariates.change_times, s.covariates.values):
            covariate_rows.append(
                {ID_COLUMN: s.id, "time": t, **dict(zip(names, values))}
            )
        for v in s.dispensations.refill_times:
            dispensation_rows.append({ID_COLUMN: s.id, "refill_time": v})
        outcome_rows.append(
            {
                ID_COLUMN: s.id,
                "followup_time": s.followup_time,
                "event_indicator": s.event_indicator,
                **dict(zip(s.baseline_names, s.baseline_covariates)),
            }
        )

    paths = {}
    for kind, rows in (
        ("covariates", covariate_rows),
        ("dispensations", dispensation_rows),
        ("outcomes", outcome_rows),
    ):
        path = os.path.join(directory, f"{kind}.csv")
        pd.DataFrame(rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        paths[kind] = path
    logger.info("Wrote %d subjects to %s", len(subjects), directory)
    return paths
