"""Run directories: ``config.echo``, ``manifest.json``, ``logs/``, ``artifacts/``."""

from __future__ import annotations

import json
import os
from pathlib import Path


class RunDir:
    def __init__(self, root) -> None:
        self.root = Path(root)
        self.logs = self.root / "logs"
        self.artifacts = self.root / "artifacts"
        self.manifest_path = self.root / "manifest.json"
        self.config_echo = self.root / "config.echo"

    def create(self) -> "RunDir":
        self.logs.mkdir(parents=True, exist_ok=True)
        self.artifacts.mkdir(parents=True, exist_ok=True)
        return self

    def read_manifest(self) -> dict | None:
        if not self.manifest_path.exists():
            return None
        return json.loads(self.manifest_path.read_text())

    def write_manifest(self, manifest: dict) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.manifest_path)

    def resumable(self, command: str, config_hash: str) -> dict | None:
        """The previous manifest if it belongs to the same command and config."""
        m = self.read_manifest()
        if m and m.get("command") == command and m.get("config_hash") == config_hash:
            return m
        return None


def new_manifest(command: str, argv: list[str], config_hash: str, seed: int, config: dict | None = None) -> dict:
    return {
        "command": command,
        "argv": list(argv),
        "config_hash": config_hash,
        "seed": seed,
        "config": config or {},
        "artifacts": {},
        "completed": [],
        "status": "running",
    }
