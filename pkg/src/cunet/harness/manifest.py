"""Run manifests: flat ``key: value`` text with config echo and content hashes."""

from __future__ import annotations

import hashlib
from pathlib import Path

from .config import RunConfig


def git_blob_sha1(data: bytes) -> str:
    """Hash as ``git hash-object`` computes it for a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class Manifest:
    def __init__(self, command: str):
        self.items = [("command", command)]

    def add(self, key: str, value) -> "Manifest":
        text = str(value)
        if "\n" in text or ": " in key:
            raise ValueError(f"manifest entries must be single-line, got {key!r}")
        self.items.append((key, text))
        return self

    def add_config(self, cfg: RunConfig) -> "Manifest":
        for k, v in cfg.flat_items():
            self.add(f"config.{k}", v)
        return self

    def add_block(self, prefix: str, text: str) -> "Manifest":
        """Embed another ``key: value`` document under ``prefix``."""
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition(": ")
                self.add(f"{prefix}.{k}", v)
        return self

    def to_text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in self.items)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition(": ")
            out[k] = v
    return out
