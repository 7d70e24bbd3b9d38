"""Atomic file writes and run manifests."""
from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def versions() -> Dict[str, str]:
    import numpy
    import scipy

    from . import __version__
    return {"emodial": __version__, "python": platform.python_version(),
            "numpy": numpy.__version__, "scipy": scipy.__version__}


def write_manifest(out_dir, command: str, config: Any, seeds: Dict[str, Any],
                   outputs: Optional[list] = None, timing: Optional[Dict[str, float]] = None) -> Path:
    """Record what produced ``out_dir``.  Wall-clock data lives here only, so every
    other output of a run is byte-reproducible."""
    path = Path(out_dir) / "manifest.json"
    write_json(path, {
        "timing": timing or {},
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seeds": seeds,
        "outputs": sorted(outputs or []),
        "versions": versions(),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    })
    return path
