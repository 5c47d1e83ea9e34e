"""Scoring backbones and the reconstruction loss.

Two client heads: "dot" scores an item row by inner product with a learned
user vector; "mlp" concatenates the user vector with the item row and runs a
3-layer network down to one logit. Both are strictly user-local.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .kernel import Node, Param, Tape
from .rng import stream


class DotHead:
    backbone = "dot"

    def __init__(self, d: int, seed: int, user: int):
        self.d = d
        flat = stream(seed, "init", "client", user, "head.user_vec").normals(d)
        self.user_vec = Param("head.user_vec", 0.1 * flat.reshape(d, 1))

    def named_params(self) -> dict[str, Param]:
        return {"head.user_vec": self.user_vec}

    def build_scores(self, tape: Tape, item_rows: Node) -> Node:
        n = item_rows.value.shape[0]
        return tape.reshape(tape.matmul(item_rows, tape.param(self.user_vec)), (n,))

    def forward_np(self, item_rows: np.ndarray) -> np.ndarray:
        return (item_rows @ self.user_vec.value).reshape(-1)


class MlpHead:
    backbone = "mlp"

    def __init__(self, d: int, seed: int, user: int):
        self.d = d

        def init(name, shape, scale):
            flat = stream(seed, "init", "client", user, name).normals(int(np.prod(shape)))
            return Param(name, scale * flat.reshape(shape))

        self.user_vec = init("head.user_vec", (1, d), 0.1)
        self.w1 = init("head.w1", (2 * d, d), 1.0 / np.sqrt(2 * d))
        self.b1 = Param("head.b1", np.zeros(d))
        self.w2 = init("head.w2", (d, d), 1.0 / np.sqrt(d))
        self.b2 = Param("head.b2", np.zeros(d))
        self.w3 = init("head.w3", (d, 1), 1.0 / np.sqrt(d))
        self.b3 = Param("head.b3", np.zeros(1))

    def named_params(self) -> dict[str, Param]:
        return {
            "head.user_vec": self.user_vec,
            "head.w1": self.w1, "head.b1": self.b1,
            "head.w2": self.w2, "head.b2": self.b2,
            "head.w3": self.w3, "head.b3": self.b3,
        }

    def build_scores(self, tape: Tape, item_rows: Node) -> Node:
        n = item_rows.value.shape[0]
        user = tape.repeat_rows(tape.param(self.user_vec), n)
        h = tape.concat_cols([user, item_rows])
        h = tape.relu(tape.add_bias(tape.matmul(h, tape.param(self.w1)), tape.param(self.b1)))
        h = tape.relu(tape.add_bias(tape.matmul(h, tape.param(self.w2)), tape.param(self.b2)))
        h = tape.add_bias(tape.matmul(h, tape.param(self.w3)), tape.param(self.b3))
        return tape.reshape(h, (n,))

    def forward_np(self, item_rows: np.ndarray) -> np.ndarray:
        n = item_rows.shape[0]
        user = np.repeat(self.user_vec.value, n, axis=0)
        h = np.concatenate([user, item_rows], axis=1)
        h = np.maximum((h @ self.w1.value) + self.b1.value, 0.0)
        h = np.maximum((h @ self.w2.value) + self.b2.value, 0.0)
        h = (h @ self.w3.value) + self.b3.value
        return h.reshape(-1)


def make_head(backbone: str, d: int, seed: int, user: int):
    if backbone == "dot":
        return DotHead(d, seed, user)
    if backbone == "mlp":
        return MlpHead(d, seed, user)
    raise ValidationError(f"unknown backbone {backbone!r}")


def predict_scores(head, fused_items: np.ndarray,
                   item_subset: np.ndarray | None = None) -> np.ndarray:
    """Scores for a subset of the fused catalog (all items when subset=None)."""
    rows = fused_items if item_subset is None else fused_items[np.asarray(item_subset, dtype=np.int64)]
    return head.forward_np(rows)


def recon_loss(tape: Tape, scores: Node, labels: np.ndarray) -> Node:
    """Mean BCE-with-logits over a batch of positives and sampled negatives."""
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise ValidationError("recon_loss: empty batch")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("recon_loss: labels must be 0 or 1")
    return tape.bce_with_logits_mean(scores, y)
