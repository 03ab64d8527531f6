"""Classification and masked pseudo-label heads and their losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import linear
from .numerics import Tensor
from .seeding import substream

HEAD_INIT_STD = 0.02


def init_head_params(dim: int, num_classes: int, codebook_size: int, seed: int) -> dict[str, np.ndarray]:
    rng = substream(seed, "init.heads")
    return {
        "cls.w": (rng.standard_normal((dim, num_classes)) * HEAD_INIT_STD).astype(np.float32),
        "cls.b": np.zeros(num_classes, np.float32),
        "mlm.w": (rng.standard_normal((dim, codebook_size)) * HEAD_INIT_STD).astype(np.float32),
        "mlm.b": np.zeros(codebook_size, np.float32),
    }


@dataclass
class LossBreakdown:
    supervised: float
    unsupervised: float
    total: float
    lam: float
    masked_count: int
    empty_items: int = 0

    def as_dict(self) -> dict:
        return {
            "L_s": self.supervised,
            "L_u": self.unsupervised,
            "L": self.total,
            "lambda": self.lam,
            "masked_count": self.masked_count,
        }


def pooled(final: Tensor) -> Tensor:
    """Average over time: (B, U, d) -> (B, d)."""
    return nx.mean(final, axis=1)


def class_logits(final: Tensor, p) -> Tensor:
    return linear(pooled(final), p["cls.w"], p["cls.b"])


def classify(final: Tensor, p) -> Tensor:
    """Language posteriors (B, N)."""
    if final.shape[1] < 1:
        raise nx.ShapeError("classify", final.shape, detail="need at least one frame")
    return nx.softmax(class_logits(final, p), axis=-1)


def one_hot(labels, n: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n), dtype=dtype or nx.get_dtype())
    out[np.arange(labels.size), labels] = 1
    return out


def supervised_loss(logits: Tensor, labels) -> Tensor:
    """Batch mean of -sum_i y_i log p_i with p = softmax(logits)."""
    B, N = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,) or (labels < 0).any() or (labels >= N).any():
        raise ValueError(f"labels must be {B} integers in [0, {N})")
    y = Tensor(one_hot(labels, N))
    return nx.mul(nx.sum(nx.mul(y, nx.log_softmax(logits, axis=-1))), -1.0 / B)


def mlm_logits(tapped_rows: Tensor, p) -> Tensor:
    return linear(tapped_rows, p["mlm.w"], p["mlm.b"])


def mlm_head(tapped: Tensor, p) -> Tensor:
    """Per-position pseudo-label posteriors (B, U, M)."""
    B, U, d = tapped.shape
    q = nx.softmax(mlm_logits(nx.reshape(tapped, (B * U, d)), p), axis=-1)
    return nx.reshape(q, (B, U, q.shape[-1]))


@dataclass
class MaskedTargets:
    """Flattened masked positions of a batch and their loss weights."""

    rows: np.ndarray  # bool over B*U
    labels: np.ndarray  # pseudo-label per selected row
    weights: np.ndarray  # per selected row
    item_counts: np.ndarray  # |T| per utterance

    @property
    def total(self) -> int:
        return int(self.item_counts.sum())


def masked_targets(positions: list[np.ndarray], pseudo_labels: np.ndarray) -> MaskedTargets:
    """Each utterance's masked positions weigh 1/|T_b|, averaged over non-empty items."""
    B, U = pseudo_labels.shape
    rows = np.zeros((B, U), dtype=bool)
    weights = np.zeros((B, U), dtype=np.float64)
    counts = np.array([len(p) for p in positions], dtype=np.int64)
    nonempty = int((counts > 0).sum())
    for b, pos in enumerate(positions):
        pos = np.asarray(pos, dtype=np.int64)
        if pos.size and (pos.min() < 0 or pos.max() >= U):
            raise IndexError(f"masked position out of range [0, {U}) in item {b}")
        rows[b, pos] = True
        if pos.size:
            weights[b, pos] = 1.0 / (pos.size * nonempty)
    flat = rows.reshape(-1)
    return MaskedTargets(
        rows=flat,
        labels=pseudo_labels.reshape(-1)[flat],
        weights=weights.reshape(-1)[flat],
        item_counts=counts,
    )


def unsupervised_loss(tapped: Tensor, p, targets: MaskedTargets) -> tuple[Tensor, Tensor | None]:
    """Masked pseudo-label cross-entropy.

    Returns the loss and the masked-row logits (``None`` when nothing is
    masked, in which case the loss is a constant zero).
    """
    if targets.total == 0:
        return Tensor(0.0), None
    B, U, d = tapped.shape
    rows = nx.masked_select(nx.reshape(tapped, (B * U, d)), targets.rows)
    logits = mlm_logits(rows, p)
    z = Tensor(one_hot(targets.labels, logits.shape[1]) * targets.weights[:, None])
    return nx.mul(nx.sum(nx.mul(z, nx.log_softmax(logits, axis=-1))), -1.0), logits


def unsupervised_loss_from_probs(q: np.ndarray, z: np.ndarray, positions) -> float | None:
    """Per-utterance loss on explicit probabilities (U, M); ``None`` for empty T."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return None
    if positions.min() < 0 or positions.max() >= q.shape[0]:
        raise IndexError("masked position out of range")
    picked = q[positions, z[positions]]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def joint_loss(l_s: Tensor, l_u: Tensor, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return l_s
    if lam == 1.0:
        return l_u
    return nx.add(nx.mul(l_s, 1.0 - lam), nx.mul(l_u, lam))


def breakdown(l_s: float, l_u: float, lam: float, masked_count: int, empty_items: int = 0) -> LossBreakdown:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return LossBreakdown(l_s, l_u, (1.0 - lam) * l_s + lam * l_u, lam, masked_count, empty_items)


def pseudo_label_accuracy(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Fraction of rows whose argmax matches the pseudo-label; ``None`` if no rows."""
    if len(labels) == 0:
        return None
    return float(np.mean(np.argmax(scores, axis=-1) == labels))
