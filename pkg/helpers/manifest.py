"""Run manifest written next to the outputs of every command."""

import json
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

import torch

VERSION = "0.1.0"
MANIFEST_NAME = "run_manifest.json"


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = VERSION
    torch_version: str = torch.__version__
    python_version: str = platform.python_version()
    started: str = field(default_factory=now)
    finished: Optional[str] = None
    status: str = "running"

    def finish(self, status: str = "ok") -> None:
        self.finished = now()
        self.status = status

    def write(self, out_dir: Path) -> Path:
        """Write run_manifest.json into `out_dir`, replacing an earlier one."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, default=str)
        return path


def read_manifest(path: Path) -> RunManifest:
    with open(path) as f:
        return RunManifest(**json.load(f))
