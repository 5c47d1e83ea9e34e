"""Manifest parsing: one item per line, `item_id<TAB>image_path<TAB>title`.

Empty image_path or title fields mean "not available". Line order defines
the row order of every output table.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    item_id: str
    image_path: str | None
    title: str | None


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw:
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ManifestError(
                f"{path}:{line_no}: expected item_id<TAB>image_path<TAB>title, "
                f"got {len(parts)} fields")
        item_id, image_path, title = parts
        if not item_id:
            raise ManifestError(f"{path}:{line_no}: empty item id")
        if item_id in seen:
            raise ManifestError(f"{path}:{line_no}: duplicate item id {item_id!r}")
        seen.add(item_id)
        entries.append(ManifestEntry(item_id, image_path or None, title or None))
    if not entries:
        raise ManifestError(f"{path}: empty manifest")
    return entries
