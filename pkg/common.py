"""
common.py — shared plumbing for the xclusters tools.

Console logging, the exception hierarchy, and atomic file writes.
"""

import json
import os
from pathlib import Path

import pandas as pd
from rich.console import Console

# ─────────────────────────────────────────────
#  Console
# ─────────────────────────────────────────────
# stderr keeps stdout free for piping DOT / JSON
console = Console(stderr=True, highlight=False)


def log(tag: str, msg: str) -> None:
    console.print(f"[{tag}] {msg}", markup=False)


def info(msg: str) -> None:
    log("INFO", msg)


def warn(msg: str) -> None:
    log("WARN", msg)


def error(msg: str) -> None:
    log("ERROR", msg)


# ─────────────────────────────────────────────
#  Exceptions
# ─────────────────────────────────────────────
class XClustersError(Exception):
    """Base class for every failure raised by the library."""


class DataError(XClustersError):
    pass


class DistanceError(XClustersError):
    pass


class ClusteringError(XClustersError):
    pass


class TreeError(XClustersError):
    pass


class EvaluationError(XClustersError):
    def __init__(self, k, alpha, cause):
        super().__init__(f"evaluation failed at k={k} alpha={alpha:.6f}: {cause}")
        self.k = k
        self.alpha = alpha


class OptimizerError(XClustersError):
    pass


class ConfigError(XClustersError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ─────────────────────────────────────────────
#  Atomic writes
# ─────────────────────────────────────────────
def atomic_write_text(path, text: str, mode: int = 0o644) -> Path:
    """Write text via a temp file + fsync + os.replace so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = str(path) + ".tmp"
    fd = os.open(tmp_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
        f.flush()
        os.fsync(fd)
    os.replace(tmp_path, path)
    return path


def write_json(path, data) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=False) + "\n")


def write_csv(path, header, rows) -> Path:
    """Write rows under a header row; column order is kept as given."""
    frame = pd.DataFrame(list(rows), columns=list(header))
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))
