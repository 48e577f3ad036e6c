"""Hash-linked artifact files and run manifests used by the command line."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .exceptions import ProvenanceError


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_text(path: str | os.PathLike, text: str) -> str:
    """Write ``text`` and return its hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return sha256_bytes(text.encode())


def manifest_path(artifact: str | os.PathLike) -> Path:
    p = Path(artifact)
    return p.with_name(p.stem + ".manifest.json")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str | None = None
    tool_version: str = __version__

    def write(self, primary_output: str | os.PathLike) -> Path:
        self.finished = _now()
        path = manifest_path(primary_output)
        write_text(path, json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, artifact: str | os.PathLike) -> "RunManifest":
        path = manifest_path(artifact)
        if not path.exists():
            raise ProvenanceError(f"no run manifest for {artifact} (expected {path})")
        try:
            return cls(**json.loads(path.read_text()))
        except (TypeError, ValueError) as exc:
            raise ProvenanceError(f"unreadable run manifest {path}: {exc}") from exc


def _key(path: str | os.PathLike) -> str:
    return Path(path).name


def check_artifact(path: str | os.PathLike) -> str:
    """Verify a file against the manifest that produced it; return its hash."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    man = RunManifest.read(path)
    recorded = man.outputs.get(_key(path))
    actual = sha256_file(path)
    if recorded is None:
        raise ProvenanceError(f"{path} is not listed as an output of its run manifest")
    if recorded != actual:
        raise ProvenanceError(f"{path} was modified after it was written (hash mismatch)")
    return actual


def check_derived_from(derived: str | os.PathLike, upstream: str | os.PathLike, upstream_hash: str) -> None:
    """Refuse if ``derived`` was not produced from the current ``upstream`` content."""
    man = RunManifest.read(derived)
    recorded = man.inputs.get(_key(upstream))
    if recorded is None:
        raise ProvenanceError(f"{derived} does not record {Path(upstream).name} as an input")
    if recorded != upstream_hash:
        raise ProvenanceError(f"{derived} was derived from a different version of {Path(upstream).name}")
