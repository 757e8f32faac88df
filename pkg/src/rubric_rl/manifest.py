"""Run manifests: a JSON record written next to every output file.

Each manifest names its inputs with their sha256 and, when an input was
itself produced by this tool, the hash of that input's manifest. Following
those links back verifies a whole pipeline. Timestamps are left out of the
manifest hash so reruns with the same arguments hash identically.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import __version__
from .errors import ValidationError
from .fileio import atomic_write_text, sha256_file

SUFFIX = ".manifest.json"
_VOLATILE = ("started_at", "finished_at")


def manifest_path(output: str | Path) -> Path:
    return Path(str(output) + SUFFIX)


def _canonical(doc: dict[str, Any]) -> str:
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def manifest_hash(doc: dict[str, Any]) -> str:
    stable = {k: v for k, v in doc.items() if k not in _VOLATILE}
    return hashlib.sha256(_canonical(stable).encode("utf-8")).hexdigest()


def _iso(ts: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))


@dataclass
class RunManifest:
    subcommand: str
    config: dict[str, Any]
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    started_at: float = field(default_factory=time.time)

    def _doc(self, out_dir: Path, finished: float) -> dict[str, Any]:
        ins = []
        for p in self.inputs:
            entry: dict[str, Any] = {"path": os.path.relpath(p, out_dir), "sha256": sha256_file(p)}
            upstream = manifest_path(p)
            if upstream.is_file():
                entry["manifest_hash"] = manifest_hash(json.loads(upstream.read_text(encoding="utf-8")))
            ins.append(entry)
        return {
            "subcommand": self.subcommand,
            "tool_version": __version__,
            "config": self.config,
            "seed": self.seed,
            "inputs": ins,
            "outputs": [{"path": os.path.relpath(p, out_dir), "sha256": sha256_file(p)} for p in self.outputs],
            "counts": dict(sorted(self.counts.items())),
            "started_at": _iso(self.started_at),
            "finished_at": _iso(finished),
        }

    def write(self) -> list[Path]:
        """Write one manifest beside each output (same content, paths relative to it)."""
        finished = time.time()
        written = []
        for out in self.outputs:
            target = manifest_path(out)
            doc = self._doc(target.parent, finished)
            atomic_write_text(target, json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
            written.append(target)
        return written


def load_manifest(path: str | Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"manifest not found: {path}", code="IO_ERROR") from None


def verify_chain(output: str | Path) -> list[str]:
    """Check an output and everything upstream of it; returns the manifests visited.

    Raises ``MANIFEST_MISMATCH`` on the first file or manifest whose hash
    differs from what a downstream manifest recorded.
    """
    visited: list[str] = []
    todo = [Path(output)]
    seen: set[Path] = set()
    while todo:
        out = todo.pop()
        mpath = manifest_path(out)
        if mpath in seen:
            continue
        seen.add(mpath)
        doc = load_manifest(mpath)
        visited.append(str(mpath))
        base = mpath.parent
        for entry in doc["outputs"]:
            if sha256_file(base / entry["path"]) != entry["sha256"]:
                raise ValidationError(f"{base / entry['path']} changed since {mpath} was written", code="MANIFEST_MISMATCH")
        for entry in doc["inputs"]:
            path = base / entry["path"]
            if sha256_file(path) != entry["sha256"]:
                raise ValidationError(f"input {path} changed since {mpath} was written", code="MANIFEST_MISMATCH")
            if "manifest_hash" in entry:
                upstream = load_manifest(manifest_path(path))
                if manifest_hash(upstream) != entry["manifest_hash"]:
                    raise ValidationError(f"manifest of {path} differs from the one {mpath} recorded", code="MANIFEST_MISMATCH")
                todo.append(path)
    return visited
