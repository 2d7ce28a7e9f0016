"""
run_manifest.py - One manifest per command run: what was asked, what came out.

Artifacts are the deterministic outputs of a run; their sha256 hashes are what
a rerun is compared against. Logs, the training progress file and the manifest
itself carry timestamps and are recorded as outputs only.
"""
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config_paths: List[str] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    started_at: str = field(default_factory=lambda: datetime.now().isoformat())
    finished_at: Optional[str] = None
    wall_clock_s: Optional[float] = None
    exit_code: Optional[int] = None
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def add_output(self, name: str, path) -> None:
        """Record a non-reproducible output, e.g. a log file."""
        self.outputs[name] = str(path)

    def add_artifact(self, name: str, path) -> None:
        """Record a deterministic output and its hash."""
        self.outputs[name] = str(path)
        self.artifacts[name] = sha256_file(path)

    def finish(self, exit_code: int) -> None:
        self.exit_code = exit_code
        self.finished_at = datetime.now().isoformat()
        self.wall_clock_s = round(time.perf_counter() - self._t0, 3)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.pop("_t0")
        return data

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
        LOGGER.info("manifest written to %s", path)
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls(**data)


def compare_artifacts(original: RunManifest, rerun: RunManifest) -> List[str]:
    """Names of artifacts whose hashes differ or that are missing from the rerun."""
    return [name for name, digest in original.artifacts.items() if rerun.artifacts.get(name) != digest]
