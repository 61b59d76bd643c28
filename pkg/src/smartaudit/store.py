"""Durable persistence: append-only JSONL files plus binary index snapshots.

The JSONL files are the source of truth; loading replays them. A snapshot
(magic "AFIX1") captures the derived state so startup can skip re-embedding,
and records how many lines of each file it consumed so the tail can be
replayed on top. A truncated final line (crash mid-append) is ignored with
a warning; a corrupt line anywhere else is a hard error naming file and line.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Optional

SNAPSHOT_MAGIC = b"AFIX1"

JSONL_FILES = ("checklists", "history", "records", "quarantine")


class StoreCorruptionError(Exception):
    pass


@dataclass(frozen=True)
class LoadedFile:
    entries: list[dict]
    line_count: int  # lines consumed, excluding an ignored truncated tail
    warnings: list[str]


class DataDir:
    """Layout of one data directory; creates subdirectories on demand."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def checklists(self) -> Path:
        return self.root / "checklists.jsonl"

    @property
    def history(self) -> Path:
        return self.root / "history.jsonl"

    @property
    def records(self) -> Path:
        return self.root / "records.jsonl"

    @property
    def quarantine(self) -> Path:
        return self.root / "quarantine.jsonl"

    @property
    def sessions_dir(self) -> Path:
        return self.root / "sessions"

    @property
    def snapshots_dir(self) -> Path:
        return self.root / "snapshots"

    @property
    def config_path(self) -> Path:
        return self.root / "config.toml"

    def file(self, name: str) -> Path:
        return {"checklists": self.checklists, "history": self.history,
                "records": self.records, "quarantine": self.quarantine}[name]

    def ensure(self) -> "DataDir":
        self.root.mkdir(parents=True, exist_ok=True)
        self.sessions_dir.mkdir(exist_ok=True)
        self.snapshots_dir.mkdir(exist_ok=True)
        return self

    def session_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.jsonl"


def append_jsonl(path: Path, obj: dict) -> int:
    """Append one record durably; returns the byte offset it was written at."""
    line = json.dumps(obj, ensure_ascii=False) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "ab") as fh:
        offset = fh.tell()
        fh.write(line.encode("utf-8"))
        fh.flush()
        os.fsync(fh.fileno())
    return offset


def load_jsonl(path: Path, skip_lines: int = 0) -> LoadedFile:
    """Replay a JSONL file.

    A final line without a trailing newline that fails to parse is treated
    as a crash-truncated append: skipped with a warning. Any other bad line
    raises StoreCorruptionError("<name>:<lineno> malformed ...").
    """
    if not path.exists():
        return LoadedFile([], 0, [])
    data = path.read_bytes()
    if not data:
        return LoadedFile([], 0, [])
    complete = data.endswith(b"\n")
    lines = data.decode("utf-8", errors="replace").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    entries: list[dict] = []
    warnings: list[str] = []
    consumed = 0
    for lineno, raw in enumerate(lines, start=1):
        is_last = lineno == len(lines)
        if not raw.strip():
            consumed = lineno
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            if is_last and not complete:
                warnings.append(
                    f"{path.name}:{lineno} truncated final line ignored")
                break
            raise StoreCorruptionError(
                f"{path.name}:{lineno} malformed: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise StoreCorruptionError(
                f"{path.name}:{lineno} malformed: expected an object")
        if lineno <= skip_lines:
            consumed = lineno
            continue
        entries.append(obj)
        consumed = lineno
    return LoadedFile(entries, consumed, warnings)


# ---------------------------------------------------------------------------
# Snapshots

@dataclass(frozen=True)
class Snapshot:
    sequence: int
    path: Path
    record_count: int
    consumed: dict[str, int]


def _snapshot_paths(data_dir: DataDir) -> list[tuple[int, Path]]:
    if not data_dir.snapshots_dir.exists():
        return []
    found = []
    for path in data_dir.snapshots_dir.glob("*.afix"):
        try:
            found.append((int(path.stem), path))
        except ValueError:
            continue
    return sorted(found)


def latest_snapshot_sequence(data_dir: DataDir) -> int:
    paths = _snapshot_paths(data_dir)
    return paths[-1][0] if paths else 0


def write_snapshot(data_dir: DataDir, consumed: dict[str, int], dimension: int,
                   record_count: int, body: dict, retention: int = 2) -> Snapshot:
    """Write the next snapshot atomically (temp file + rename) and prune old ones."""
    data_dir.ensure()
    sequence = latest_snapshot_sequence(data_dir) + 1
    header = {
        "sequence": sequence,
        "dimension": dimension,
        "doc_count": record_count,
        "consumed": dict(consumed),
    }
    final_path = data_dir.snapshots_dir / f"{sequence:06d}.afix"
    tmp_path = data_dir.snapshots_dir / f".{sequence:06d}.afix.tmp"
    payload = b"\n".join([
        SNAPSHOT_MAGIC,
        json.dumps(header, sort_keys=True).encode("utf-8"),
        json.dumps(body, sort_keys=True).encode("utf-8"),
    ]) + b"\n"
    with open(tmp_path, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp_path, final_path)

    for seq, path in _snapshot_paths(data_dir)[:-retention or None]:
        if seq != sequence:
            path.unlink(missing_ok=True)
    return Snapshot(sequence, final_path, record_count, dict(consumed))


def read_latest_snapshot(data_dir: DataDir) -> Optional[tuple[dict, dict]]:
    """Returns (header, body) of the newest readable snapshot, or None."""
    for seq, path in reversed(_snapshot_paths(data_dir)):
        try:
            raw = path.read_bytes()
            magic, header_line, body_line = raw.split(b"\n", 2)
            if magic != SNAPSHOT_MAGIC:
                raise StoreCorruptionError(f"{path.name}: bad magic {magic!r}")
            header = json.loads(header_line)
            body = json.loads(body_line)
            return header, body
        except (ValueError, StoreCorruptionError):
            continue  # fall back to an older snapshot, then to full replay
    return None
