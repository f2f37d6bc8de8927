"""Logical-to-physical map for image stub files.

Stub layout: a magic line, ``KEY = value`` header lines, ``END``, then the
synthetic payload bytes.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ._sync import LockState
from .errors import ChecksumMismatch, DuplicateLogicalPath, PermanentFile, UnknownLogicalPath

MAGIC = b"SKYSTUB1\n"
RAW_PREFIX = "raw/"


def logical_path_from_header(header: dict) -> str:
    try:
        return f"raw/{int(header['NIGHT'])}/{int(header['VISIT'])}/{int(header['CCD'])}.img"
    except KeyError as exc:
        raise ValueError(f"header lacks {exc.args[0]}") from None


def write_stub(path, header: dict, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}\n" for k, v in header.items()]
    path.write_bytes(MAGIC + "".join(lines).encode() + b"END\n" + payload)
    return path


def read_stub_header(path) -> dict[str, str]:
    header = {}
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path} is not an image stub")
        for raw in fh:
            line = raw.decode().rstrip("\n")
            if line == "END":
                return header
            key, _, value = line.partition(" = ")
            header[key] = value
    raise ValueError(f"{path}: header not terminated")


def file_checksum(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class FileMapEntry:
    logical_path: str
    physical_path: str
    header: dict = field(default_factory=dict)
    checksum: str = ""
    immutable: bool = True


class FileMap(LockState):
    _lock_factories = {"_lock": threading.Lock}

    def __init__(self):
        self.entries: dict[str, FileMapEntry] = {}
        self._lock = threading.Lock()

    def register_file(self, header: dict, physical_path) -> FileMapEntry:
        logical = logical_path_from_header(header)
        physical = os.fspath(physical_path)
        entry = FileMapEntry(logical, physical, {k: str(v) for k, v in header.items()}, file_checksum(physical))
        with self._lock:
            if logical in self.entries:
                raise DuplicateLogicalPath(f"{logical} already registered")
            self.entries[logical] = entry
        return entry

    def _entry(self, logical_path: str) -> FileMapEntry:
        try:
            return self.entries[logical_path]
        except KeyError:
            raise UnknownLogicalPath(f"no file registered as {logical_path}") from None

    def resolve(self, logical_path: str) -> str:
        return self._entry(logical_path).physical_path

    def relocate(self, logical_path: str, new_physical, move: bool = False) -> FileMapEntry:
        """Point a logical path at a new location, verifying the content first."""
        entry = self._entry(logical_path)
        new_physical = os.fspath(new_physical)
        if move:
            Path(new_physical).parent.mkdir(parents=True, exist_ok=True)
            shutil.move(entry.physical_path, new_physical)
        if file_checksum(new_physical) != entry.checksum:
            raise ChecksumMismatch(f"{new_physical} does not match {logical_path}")
        with self._lock:
            entry.physical_path = new_physical
        return entry

    def remove(self, logical_path: str) -> None:
        if logical_path.startswith(RAW_PREFIX):
            raise PermanentFile(f"raw file {logical_path} can never be removed")
        with self._lock:
            self._entry(logical_path)
            del self.entries[logical_path]

    def mapping(self) -> dict[str, str]:
        return {k: e.physical_path for k, e in sorted(self.entries.items())}

    def verify(self, logical_path: str) -> bool:
        entry = self._entry(logical_path)
        return file_checksum(entry.physical_path) == entry.checksum


def rebuild_from_headers(paths: Iterable) -> dict[str, str]:
    """Reconstruct logical -> physical purely from stub headers."""
    out = {}
    for p in paths:
        out[logical_path_from_header(read_stub_header(p))] = os.fspath(p)
    return dict(sorted(out.items()))


def scan_tree(root) -> dict[str, str]:
    return rebuild_from_headers(sorted(p for p in Path(root).rglob("*") if p.is_file() and _is_stub(p)))


def _is_stub(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(MAGIC)) == MAGIC
