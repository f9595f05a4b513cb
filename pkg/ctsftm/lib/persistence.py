#!/usr/bin/env python3
"""
JSON persistence for fitted models, results, diagnostics and ground truth.

Payload files are written with sorted keys and no timestamps, so identical
inputs give byte-identical files. Timestamps go to a ``<file>.meta.json``
sidecar next to each payload.
"""

import json
import logging
import os
import platform
from datetime import datetime
from typing import Any, Dict, Optional, Tuple

from hazards import CensoringCoxModel, RefillHazardModel

logger = logging.getLogger(__name__)

REFILL_MODEL_FILE = "refill_hazard.json"
CENSORING_MODEL_FILE = "censoring_model.json"


def meta_path(path: str) -> str:
    return f"{path}.meta.json"


class ResultStore:
    """Writes and reads the JSON artefacts of one command run"""

    def __init__(self, command: str, models_dir: Optional[str] = None):
        """
        Args:
            command: name of the command writing the files
            models_dir: directory for fitted nuisance models (optional)
        """
        self.command = command
        self.models_dir = models_dir

    def save_json(
        self,
        path: str,
        payload: Dict[str, Any],
        runtime: Optional[Dict[str, Any]] = None,
    ) -> bool:
        """
        Write a payload plus its metadata sidecar.

        ``runtime`` settings that must not change the payload (worker counts)
        are recorded in the sidecar.

        Returns:
            bool: True if save successful, False otherwise
        """
        try:
            directory = os.path.dirname(os.path.abspath(path))
            os.makedirs(directory, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2, sort_keys=True, allow_nan=True)
                f.write("\n")
            meta = {
                "command": self.command,
                "file": os.path.basename(path),
                "written_at": datetime.now().isoformat(),
                "python_version": platform.python_version(),
                "platform": platform.platform(),
            }
            meta.update(runtime or {})
            with open(meta_path(path), "w", encoding="utf-8") as f:
                json.dump(meta, f, indent=2, sort_keys=True)
            logger.info("Saved %s", path)
            return True
        except (OSError, TypeError, ValueError) as e:
            logger.error("Error saving %s: %s", path, e)
            return False

    def load_json(self, path: str) -> Optional[Dict[str, Any]]:
        """
        Returns:
            dict: payload or None if missing/unreadable
        """
        try:
            if not os.path.exists(path):
                return None
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error("Error loading %s: %s", path, e)
            return None

    def save_models(
        self, refill: RefillHazardModel, censoring: CensoringCoxModel
    ) -> bool:
        """Export both nuisance models to ``models_dir``; no-op without one."""
        if self.models_dir is None:
            return False
        saved_refill = self.save_json(
            os.path.join(self.models_dir, REFILL_MODEL_FILE), refill.to_dict()
        )
        saved_censoring = self.save_json(
            os.path.join(self.models_dir, CENSORING_MODEL_FILE), censoring.to_dict()
        )
        return saved_refill and saved_censoring

    def load_models(
        self,
    ) -> Tuple[Optional[RefillHazardModel], Optional[CensoringCoxModel]]:
        """
        Previously exported nuisance models.

        A model that is absent or cannot be decoded comes back as None and
        will be refitted.
        """
        if self.models_dir is None:
            return None, None
        models = []
        for name, cls in (
            (REFILL_MODEL_FILE, RefillHazardModel),
            (CENSORING_MODEL_FILE, CensoringCoxModel),
        ):
            path = os.path.join(self.models_dir, name)
            data = self.load_json(path)
            model = None
            if data is not None:
                try:
                    model = cls.from_dict(data)
                    logger.info("Loaded fitted model from %s", path)
                except (KeyError, TypeError, ValueError) as e:
                    logger.warning("Ignoring %s: %s", path, e)
            models.append(model)
        return models[0], models[1]
