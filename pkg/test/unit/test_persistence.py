#!/usr/bin/env python3
"""
Unit tests for persistence.py: JSON payloads, sidecars and model export.
"""

import json
import os
import sys
import tempfile
from unittest.mock import patch

import numpy as np

# Add ctsftm/lib directory to path for imports (repo root)
REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
sys.path.insert(0, os.path.join(REPO_ROOT, "ctsftm", "lib"))

from hazards import (  # noqa: E402
    CensoringCoxModel,
    CensoringFeatureMap,
    RefillFeatureMap,
    RefillHazardModel,
)
from persistence import (  # noqa: E402
    CENSORING_MODEL_FILE,
    ResultStore,
    meta_path,
)


def models():
    refill = RefillHazardModel(
        RefillFeatureMap(("l1",), ()), [0.2, -0.1], [0.0, 5.0], [0.1, 0.3]
    )
    censoring = CensoringCoxModel(
        CensoringFeatureMap(("l1",), ()), [0.4], [50.0, 60.0], [0.2, 0.5]
    )
    return refill, censoring


class TestResultStore:
    """Writing and reading JSON artefacts."""

    def setup_method(self):
        """Temporary directory per test."""
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def teardown_method(self):
        self.tmp.cleanup()

    def test_payload_and_sidecar(self):
        """Test the payload is sorted JSON and the timestamp lives in the sidecar."""
        store = ResultStore("estimate")
        path = os.path.join(self.dir, "nested", "result.json")
        assert store.save_json(path, {"b": 1, "a": [1.5, 2.5]})
        with open(path, encoding="utf-8") as f:
            text = f.read()
        assert text.index('"a"') < text.index('"b"')
        assert "written_at" not in text
        with open(meta_path(path), encoding="utf-8") as f:
            meta = json.load(f)
        assert meta["command"] == "estimate"
        assert meta["file"] == "result.json"
        assert store.load_json(path) == {"a": [1.5, 2.5], "b": 1}

    def test_identical_payloads_identical_bytes(self):
        """Test the payload file is reproducible."""
        store = ResultStore("estimate")
        first = os.path.join(self.dir, "first.json")
        second = os.path.join(self.dir, "second.json")
        store.save_json(first, {"psi": [0.1, -0.2], "seed": 3})
        store.save_json(second, {"seed": 3, "psi": [0.1, -0.2]})
        with open(first, "rb") as f1, open(second, "rb") as f2:
            assert f1.read() == f2.read()

    def test_runtime_settings_in_sidecar(self):
        """Test runtime settings reach the sidecar but not the payload."""
        store = ResultStore("estimate")
        path = os.path.join(self.dir, "result.json")
        assert store.save_json(path, {"psi": [0.1]}, {"n_jobs": 4})
        with open(meta_path(path), encoding="utf-8") as f:
            assert json.load(f)["n_jobs"] == 4
        assert store.load_json(path) == {"psi": [0.1]}

    def test_load_missing(self):
        """Test a missing file loads as None."""
        assert ResultStore("diagnose").load_json(os.path.join(self.dir, "x")) is None

    def test_save_failure(self):
        """Test an unwritable path reports failure instead of raising."""
        store = ResultStore("estimate")
        with patch("builtins.open", side_effect=OSError("disk full")):
            assert not store.save_json(os.path.join(self.dir, "r.json"), {})


class TestModelExport:
    """Nuisance models in models_dir."""

    def setup_method(self):
        """Store with a temporary models directory."""
        self.tmp = tempfile.TemporaryDirectory()
        self.store = ResultStore("estimate", self.tmp.name)

    def teardown_method(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        """Test exported models load back with the same parameters."""
        refill, censoring = models()
        assert self.store.save_models(refill, censoring)
        loaded_refill, loaded_censoring = self.store.load_models()
        assert np.array_equal(loaded_refill.gamma, refill.gamma)
        assert np.array_equal(loaded_refill.rates, refill.rates)
        assert np.array_equal(loaded_censoring.increments, censoring.increments)
        assert loaded_censoring.feature_map.names == censoring.feature_map.names

    def test_missing_models(self):
        """Test absent models come back as None."""
        assert self.store.load_models() == (None, None)

    def test_corrupt_model_ignored(self):
        """Test a model of the wrong kind is ignored."""
        refill, censoring = models()
        self.store.save_models(refill, censoring)
        path = os.path.join(self.tmp.name, CENSORING_MODEL_FILE)
        self.store.save_json(path, refill.to_dict())
        loaded_refill, loaded_censoring = self.store.load_models()
        assert loaded_refill is not None
        assert loaded_censoring is None

    def test_without_models_dir(self):
        """Test export is a no-op without a directory."""
        store = ResultStore("estimate")
        assert not store.save_models(*models())
        assert store.load_models() == (None, None)
