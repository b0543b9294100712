"""Provenance records written next to every command's outputs."""

from __future__ import annotations

import json
import subprocess
import time
from pathlib import Path

from agediff import __version__


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_json(out_dir: Path, command: str, config: dict, seeds: dict, started: float, extra=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "version": __version__,
        "git": git_describe(),
        "config": config,
        "seeds": seeds,
        "wall_clock_seconds": round(time.time() - started, 3),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
    }
    if extra:
        record.update(extra)
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
