"""Encoder backends.

`testhash:<dim>` is the deterministic stand-in used by the test suite: it
projects decoded pixels and title byte trigrams through fixed random
matrices derived from the model string, so outputs are reproducible on any
machine with no weights to download. `clip:<model-id>` loads a pretrained
dual encoder through `transformers`; a checkpoint that cannot be resolved
is a fatal error, never a silent fallback.
"""

from __future__ import annotations

import hashlib

import numpy as np

FILL_TEXT = "The title is missing."

_IMAGE_SIDE = 32
_IMAGE_DIM = _IMAGE_SIDE * _IMAGE_SIDE * 3
_TEXT_BUCKETS = 4096


class EncoderError(Exception):
    pass


class ModelLoadError(EncoderError):
    pass


class ImageDecodeError(EncoderError):
    pass


def _seed_from(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def _splitmix(seed: int, n: int) -> np.ndarray:
    """First n outputs of the splitmix64 sequence, vectorized."""
    with np.errstate(over="ignore"):
        x = np.uint64(seed) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(
            0x9E3779B97F4A7C15)
        z = x
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _projection(label: str, rows: int, cols: int) -> np.ndarray:
    u = _splitmix(_seed_from(label), rows * cols)
    uniform = (u >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return (2.0 * uniform - 1.0).reshape(rows, cols) / np.sqrt(rows)


class TesthashBackend:
    """Pixel statistics and byte trigrams through fixed projections."""

    def __init__(self, model_id: str, dim: int):
        if dim < 1:
            raise ModelLoadError(f"testhash dim must be positive, got {dim}")
        self.model_id = model_id
        self.dim = dim
        self._proj_v = _projection(f"{model_id}|visual", _IMAGE_DIM, dim)
        self._proj_c = _projection(f"{model_id}|text", _TEXT_BUCKETS, dim)

    def encode_image(self, path: str) -> np.ndarray:
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(path) as img:
                small = img.convert("RGB").resize(
                    (_IMAGE_SIDE, _IMAGE_SIDE), Image.Resampling.BILINEAR)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
        flat = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0
        return np.tanh(flat @ self._proj_v)

    def encode_text(self, text: str) -> np.ndarray:
        data = text.encode("utf-8")
        counts = np.zeros(_TEXT_BUCKETS)
        grams = ([data[i:i + 3] for i in range(len(data) - 2)]
                 if len(data) >= 3 else [data])
        for gram in grams:
            counts[_seed_from(gram.hex()) % _TEXT_BUCKETS] += 1.0
        return np.tanh((counts / len(grams)) @ self._proj_c)


class ClipBackend:
    """Pretrained dual encoder; joint-embedding outputs, eval mode."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor

            self._torch = torch
            self._model = CLIPModel.from_pretrained(model_id)
            self._model.eval()
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise ModelLoadError(
                f"failed to load model {model_id!r}: {exc}") from exc
        self.model_id = model_id
        self.dim = int(self._model.config.projection_dim)

    def encode_image(self, path: str) -> np.ndarray:
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(path) as img:
                rgb = img.convert("RGB")
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
        inputs = self._processor(images=rgb, return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return feats[0].double().numpy()

    def encode_text(self, text: str) -> np.ndarray:
        inputs = self._processor(text=[text], return_tensors="pt",
                                 padding=True, truncation=True)
        with self._torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return feats[0].double().numpy()


def resolve_backend(model_id: str):
    family, _, rest = model_id.partition(":")
    if family == "testhash" and rest:
        try:
            return TesthashBackend(model_id, int(rest))
        except ValueError:
            raise ModelLoadError(f"bad testhash dim in {model_id!r}") from None
    if family == "clip" and rest:
        return ClipBackend(rest)
    raise ModelLoadError(
        f"unknown model {model_id!r}; expected testhash:<dim> or clip:<model-id>")
