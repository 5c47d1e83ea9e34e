"""The `encode` command: manifest in, five files out.

    encode --manifest items.tsv --model testhash:32 --out out/ku

writes `<out>.v.fmr` (visual, absent or undecodable images masked),
`<out>.c.fmr` (textual, never masked: missing titles are encoded as the
fill sentence), `<out>.items.tsv` (row order), `<out>.fill.fmr` (the fill
sentence's row, for designated-fill downstream), and `<out>.meta.json`
(model id, dim, counts).

Rows are encoded value-by-value and cached, so identical inputs are
bitwise-identical rows and a missing title equals the fill row exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backends import (
    FILL_TEXT,
    EncoderError,
    ImageDecodeError,
    resolve_backend,
)
from .manifest import ManifestError, load_manifest
from .writer import write_fmr1, write_sidecar

log = logging.getLogger("fmr_encoder")


def run_encode(manifest_path: str, model_id: str, out_prefix: str) -> dict:
    entries = load_manifest(manifest_path)
    backend = resolve_backend(model_id)
    n, dim = len(entries), backend.dim

    visual = np.zeros((n, dim))
    v_missing = np.zeros(n, dtype=bool)
    image_cache: dict[str, np.ndarray | None] = {}
    for row, entry in enumerate(entries):
        if entry.image_path is None:
            v_missing[row] = True
            continue
        if entry.image_path not in image_cache:
            try:
                image_cache[entry.image_path] = backend.encode_image(entry.image_path)
            except ImageDecodeError as exc:
                log.warning("%s: marked missing (%s)", entry.item_id, exc)
                image_cache[entry.image_path] = None
        cached = image_cache[entry.image_path]
        if cached is None:
            v_missing[row] = True
        else:
            visual[row] = cached

    text_cache: dict[str, np.ndarray] = {}

    def text_row(text: str) -> np.ndarray:
        if text not in text_cache:
            text_cache[text] = backend.encode_text(text)
        return text_cache[text]

    fill_row = text_row(FILL_TEXT)
    textual = np.zeros((n, dim))
    for row, entry in enumerate(entries):
        textual[row] = text_row(entry.title if entry.title is not None else FILL_TEXT)

    out = Path(out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_fmr1(f"{out}.v.fmr", visual, v_missing)
    write_fmr1(f"{out}.c.fmr", textual)
    write_fmr1(f"{out}.fill.fmr", fill_row[None, :])
    write_sidecar(f"{out}.items.tsv", [e.item_id for e in entries])
    meta = {
        "model": model_id,
        "dim": dim,
        "items": n,
        "visual_missing": int(v_missing.sum()),
        "fill_text": FILL_TEXT,
    }
    Path(f"{out}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="encode",
        description="batch-encode item images and titles into FMR1 tables")
    parser.add_argument("--manifest", required=True,
                        help="TSV of item_id<TAB>image_path<TAB>title")
    parser.add_argument("--model", required=True,
                        help="testhash:<dim> or clip:<model-id>")
    parser.add_argument("--out", required=True, help="output path prefix")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    try:
        meta = run_encode(args.manifest, args.model, args.out)
    except (EncoderError, ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{meta['items']} items encoded at dim {meta['dim']} "
          f"({meta['visual_missing']} images missing)")
    return 0


def console() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console()
