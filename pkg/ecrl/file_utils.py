"""
Atomic file operations, CSV logs and run-directory locking.

Checkpoints, manifests and reports are written through a temp file plus an
atomic replace so a crash never leaves a half-written artifact behind.
"""

import atexit
import csv
import fcntl
import json
import os
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np


@contextmanager
def _atomic_target(filepath: Path, mode: str) -> Iterator[Any]:
    """Yield a temp file next to filepath; replace filepath with it on success."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)

    temp_path = None
    try:
        with tempfile.NamedTemporaryFile(
            mode=mode,
            dir=filepath.parent,
            prefix=f".{filepath.name}.",
            suffix=".tmp",
            delete=False,
        ) as tmp_file:
            temp_path = Path(tmp_file.name)
            yield tmp_file
            tmp_file.flush()
            os.fsync(tmp_file.fileno())

        os.replace(temp_path, filepath)

    except BaseException:
        if temp_path and temp_path.exists():
            try:
                temp_path.unlink()
            except OSError:
                pass
        raise


class AtomicFileWriter:
    """
    Atomic file writer using temp file + atomic replace.

    Writes go to a temporary file in the target directory which then
    replaces the target with os.replace().
    """

    @staticmethod
    def write_json(filepath: Path, data: Any, indent: int = 2) -> None:
        """
        Atomically write JSON data to a file.

        Args:
            filepath: Target file path
            data: Data to serialize as JSON
            indent: JSON indentation level
        """
        with _atomic_target(filepath, "w") as tmp_file:
            json.dump(data, tmp_file, indent=indent, default=str)

    @staticmethod
    def write_npz(filepath: Path, arrays: Dict[str, np.ndarray]) -> None:
        """Atomically write named arrays as an uncompressed NPZ archive."""
        with _atomic_target(filepath, "wb") as tmp_file:
            np.savez(tmp_file, **arrays)

    @staticmethod
    def read_json(filepath: Path, default: Any = None) -> Any:
        """
        Read JSON file with safe defaults.

        Args:
            filepath: File to read
            default: Value returned if the file doesn't exist or is invalid
        """
        filepath = Path(filepath)

        if not filepath.exists():
            return default

        try:
            with open(filepath, "r") as f:
                return json.load(f)
        except (json.JSONDecodeError, IOError):
            return default


def format_cell(value: Any) -> str:
    """Render a CSV cell; floats use repr so reruns produce identical bytes."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


class CsvLog:
    """
    Append-only CSV with a fixed header.

    The header is written when the file is created; resuming a run appends to
    the existing file. Only one writer per file.
    """

    def __init__(self, filepath: Path, columns: Sequence[str]):
        self.filepath = Path(filepath)
        self.columns = list(columns)
        self.filepath.parent.mkdir(parents=True, exist_ok=True)
        if not self.filepath.exists() or self.filepath.stat().st_size == 0:
            with open(self.filepath, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(self.columns)

    def append(self, row: Dict[str, Any]) -> None:
        with open(self.filepath, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(
                [format_cell(row.get(column, "")) for column in self.columns]
            )


def write_csv(filepath: Path, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> None:
    """Write a complete CSV atomically."""
    with _atomic_target(filepath, "w") as tmp_file:
        writer = csv.writer(tmp_file, lineterminator="\n")
        writer.writerow(list(columns))
        for row in rows:
            writer.writerow([format_cell(row.get(column, "")) for column in columns])


def read_csv(filepath: Path) -> List[Dict[str, str]]:
    with open(filepath, newline="") as f:
        return list(csv.DictReader(f))


class FileLock:
    """
    File-based lock using fcntl, held by the process that owns a run directory.

    Usage:
        with FileLock(run_dir / ".run.lock"):
            ...
    """

    def __init__(self, lockfile: Path):
        self.lockfile = Path(lockfile)
        self.lockfile.parent.mkdir(parents=True, exist_ok=True)
        self.fd: Optional[Any] = None

    def acquire(self, timeout: float = 10.0) -> bool:
        """
        Acquire exclusive lock with timeout.

        Returns:
            True if lock acquired, False if timeout
        """
        start_time = time.time()

        while True:
            try:
                self.fd = open(self.lockfile, "w")
                fcntl.flock(self.fd.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
                self.fd.write(f"{os.getpid()}:{time.time()}\n")
                self.fd.flush()
                atexit.register(self.release)
                return True

            except (IOError, BlockingIOError):
                if self.fd:
                    self.fd.close()
                    self.fd = None
                if time.time() - start_time >= timeout:
                    return False
                time.sleep(0.1)

    def release(self) -> None:
        """Release the lock."""
        if self.fd:
            try:
                fcntl.flock(self.fd.fileno(), fcntl.LOCK_UN)
                self.fd.close()
            except OSError:
                pass
            finally:
                self.fd = None

        if self.lockfile.exists():
            try:
                self.lockfile.unlink()
            except OSError:
                pass

    def __enter__(self):
        if not self.acquire():
            raise RuntimeError(f"Could not acquire lock: {self.lockfile}")
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.release()
        return False
