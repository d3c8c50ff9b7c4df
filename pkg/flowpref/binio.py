"""File helpers shared by the binary codecs and the run logs."""

import os
import struct
from typing import Any, Tuple

from .errors import PersistenceError


def ensure_parent(path: str) -> None:
    """Create the directory holding `path` if it is missing."""
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
    except (OSError, ValueError):
        # bare file name, nothing to create
        pass


def atomic_write(path: str, blob: bytes) -> None:
    """Write `blob` to a sibling temp file, then rename it over `path`."""
    ensure_parent(path)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(blob)
    os.replace(tmp_path, path)


def append_line(path: str, line: str) -> None:
    """Append one newline-terminated line, creating the file if needed."""
    ensure_parent(path)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")


class ByteReader:
    """Sequential reader that reports truncation as a PersistenceError."""

    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.offset = 0
        self.path = path

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.offset

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise PersistenceError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.blob[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> Tuple[Any, ...]:
        return fmt.unpack(self.take(fmt.size))
