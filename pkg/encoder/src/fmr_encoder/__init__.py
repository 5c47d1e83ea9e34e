"""Offline batch encoder: item images and titles to FMR1 modality tables.

Consumes a manifest TSV (item_id, image_path, title), runs a visual and a
textual encoder, and writes the binary tables plus sidecar files that the
training package reads. The training side is only coupled through those
files; nothing here imports it.
"""

from .manifest import ManifestEntry, load_manifest
from .backends import FILL_TEXT, resolve_backend
from .writer import write_fmr1, write_sidecar

__all__ = [
    "FILL_TEXT",
    "ManifestEntry",
    "load_manifest",
    "resolve_backend",
    "write_fmr1",
    "write_sidecar",
]
