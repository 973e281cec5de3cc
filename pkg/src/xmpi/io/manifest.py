"""Run manifest: config snapshot, seeds and content hashes of every stage's inputs and outputs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__
from .formats import atomic_write, sha256_file, to_json

MANIFEST_NAME = "manifest.json"


class DependencyError(RuntimeError):
    """A stage input is missing or does not match the hash recorded by the stage that produced it."""


@dataclass
class RunManifest:
    config: dict
    seeds: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return {"tool_version": self.tool_version, "seeds": self.seeds, "config": self.config, "stages": self.stages}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["config"], d.get("seeds", {}), d.get("stages", {}), d.get("tool_version", ""))

    @classmethod
    def load(cls, out_dir) -> "RunManifest | None":
        p = Path(out_dir) / MANIFEST_NAME
        if not p.exists():
            return None
        return cls.from_dict(json.loads(p.read_text()))

    def save(self, out_dir):
        atomic_write(Path(out_dir) / MANIFEST_NAME, to_json(self.to_dict()) + "\n")

    def artifacts(self) -> dict[str, str]:
        """Every output file recorded by any stage, relative path -> sha256."""
        out = {}
        for rec in self.stages.values():
            out.update(rec.get("outputs", {}))
        return out

    def record(self, stage: str, out_dir, inputs, outputs, **info):
        """Hash ``inputs`` and ``outputs`` (paths relative to ``out_dir``) and store them under ``stage``."""
        root = Path(out_dir)
        self.stages[stage] = {
            "inputs": {str(p): sha256_file(root / p) for p in sorted(map(str, inputs))},
            "outputs": {str(p): sha256_file(root / p) for p in sorted(map(str, outputs))},
            **info,
        }

    def verify_inputs(self, out_dir, paths):
        """Check that each path exists and matches the hash its producing stage recorded."""
        root = Path(out_dir)
        known = self.artifacts()
        for p in map(str, paths):
            f = root / p
            if not f.exists():
                raise DependencyError(f"missing input {f}; run the stage that produces it first")
            want = known.get(p)
            if want is None:
                raise DependencyError(f"input {f} is not listed in the manifest")
            if sha256_file(f) != want:
                raise DependencyError(f"input {f} changed since it was written (hash mismatch)")
