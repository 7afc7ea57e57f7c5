"""Run manifests: config snapshots, seeds, and artifact digests.

Every command writes one next to its outputs.  Digests let downstream
commands verify that the artifacts they consume are the ones that were
produced (resume refuses to run against modified inputs).  Timestamps are
the only non-deterministic field.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

MANIFEST_NAME = "manifest.json"


class DigestMismatch(RuntimeError):
    """An input artifact changed since the manifest recorded it."""


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root, exclude: tuple[str, ...] = (MANIFEST_NAME,)) -> str:
    """Digest of a directory: sorted relative names plus file contents."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel in exclude:
            continue
        h.update(rel.encode("utf-8"))
        h.update(b"\0")
        h.update(bytes.fromhex(file_digest(path)))
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # label -> digest
    artifacts: dict = field(default_factory=dict)  # relative path -> digest
    created_at: str = ""

    def write(self, out_dir) -> Path:
        self.created_at = _dt.datetime.now(_dt.timezone.utc).isoformat()
        path = Path(out_dir) / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def read(cls, out_dir) -> "RunManifest":
        with open(Path(out_dir) / MANIFEST_NAME, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def record_artifacts(self, out_dir) -> None:
        out_dir = Path(out_dir)
        self.artifacts = {}
        for path in sorted(p for p in out_dir.rglob("*") if p.is_file()):
            rel = path.relative_to(out_dir).as_posix()
            if rel == MANIFEST_NAME:
                continue
            self.artifacts[rel] = file_digest(path)

    def verify_input(self, label: str, digest: str) -> None:
        recorded = self.inputs.get(label)
        if recorded is not None and recorded != digest:
            raise DigestMismatch(
                f"{label}: digest {digest[:12]}... does not match recorded {recorded[:12]}..."
            )
