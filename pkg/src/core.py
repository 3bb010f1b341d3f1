# src/core.py
"""
Core: loads config.json, applies command-line overrides and owns the
shared managers (run registry) for one CLI process.
"""
import json
import logging
import os
import time
from dataclasses import fields
from typing import Any, Dict, Optional

from .errors import DataError
from .mil import MilConfig
from .refine import RefineConfig
from .registry import RunRegistry
from .svm import TrainParams
from .synth import SynthConfig


log = logging.getLogger(__name__)
DEFAULT_REGISTRY = "runs/registry.db"


def _build(cls, section: Dict[str, Any], name: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise DataError(f"Unknown key(s) in config section '{name}': {', '.join(sorted(unknown))}")
    merged = dict(section)
    # None from the command line means "not given"
    merged.update({k: v for k, v in extra.items() if v is not None})
    return cls(**merged)


class Core:
    """Configuration plus managers shared by the subcommands."""

    def __init__(self, args):
        self.config_path = getattr(args, 'config', None) or 'config.json'
        self.config: Dict[str, Any] = {}
        if os.path.exists(self.config_path):
            with open(self.config_path, encoding="utf-8") as f:
                self.config = json.load(f)
            log.debug(f"Loaded config from {self.config_path}")
        elif getattr(args, 'config', None):
            raise DataError(f"Config file {self.config_path} not found")

        registry_override = getattr(args, 'registry', None)
        if registry_override:
            self.config.setdefault('registry', {})['path'] = registry_override
        self.registry_path = self.config.get('registry', {}).get('path') or DEFAULT_REGISTRY

        threads = getattr(args, 'threads', None)
        self.threads = int(threads or self.config.get('settings', {}).get('threads', 1))
        if self.threads < 1:
            raise DataError(f"threads must be >= 1, got {self.threads}")

        self.registry: Optional[RunRegistry] = None
        if not getattr(args, 'no_registry', False):
            self.registry = RunRegistry(self.registry_path)
        self.start_time = time.time()

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.config.get(name, {}))

    def train_params(self, **overrides) -> TrainParams:
        return _build(TrainParams, self.section('svm'), 'svm', **overrides)

    def mil_config(self, train_overrides: Optional[dict] = None, **overrides) -> MilConfig:
        params = self.train_params(**(train_overrides or {}))
        return _build(MilConfig, self.section('mil'), 'mil', train_params=params, threads=self.threads, **overrides)

    def refine_config(self, **overrides) -> RefineConfig:
        return _build(RefineConfig, self.section('refine'), 'refine', **overrides)

    def synth_config(self, **overrides) -> SynthConfig:
        return _build(SynthConfig, self.section('synth'), 'synth', **overrides)
