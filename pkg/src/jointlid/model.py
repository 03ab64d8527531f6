"""Encoder plus both heads, and the batch-level joint loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, encode, init_encoder_params
from .numerics import Tensor
from .objectives import (
    LossBreakdown,
    MaskedTargets,
    breakdown,
    class_logits,
    init_head_params,
    joint_loss,
    pseudo_label_accuracy,
    supervised_loss,
    unsupervised_loss,
)


def init_model_params(cfg: EncoderConfig, num_classes: int, codebook_size: int, seed: int) -> dict[str, np.ndarray]:
    params = init_encoder_params(cfg, seed)
    params.update(init_head_params(cfg.dim, num_classes, codebook_size, seed))
    return params


def as_leaves(params: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


@dataclass
class StepResult:
    loss: Tensor
    losses: LossBreakdown
    pseudo_acc: float | None


def batch_loss(
    p: dict[str, Tensor],
    x: np.ndarray,
    labels: np.ndarray,
    cfg: EncoderConfig,
    lam: float,
    targets: MaskedTargets | None = None,
) -> StepResult:
    """Joint loss for a (B, T, F) batch of (already masked) features.

    ``targets`` may be ``None`` only when ``lam == 0``; the MLM head is then
    skipped entirely.
    """
    if lam > 0 and targets is None:
        raise ValueError("masked pseudo-label targets are required when lambda > 0")
    out = encode(Tensor(x), cfg, p)
    l_s = supervised_loss(class_logits(out.final, p), labels)
    if lam == 0:
        return StepResult(l_s, breakdown(l_s.item(), 0.0, 0.0, 0), None)
    l_u, logits = unsupervised_loss(out.tapped, p, targets)
    loss = joint_loss(l_s, l_u, lam)
    acc = pseudo_label_accuracy(logits.data, targets.labels) if logits is not None else None
    empty = int((targets.item_counts == 0).sum())
    return StepResult(loss, breakdown(l_s.item(), l_u.item(), lam, targets.total, empty), acc)


def predict_proba(params: dict[str, np.ndarray], x: np.ndarray, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Class posteriors and pooled embeddings for an unmasked batch."""
    p = as_leaves(params, requires_grad=False)
    out = encode(Tensor(x), cfg, p)
    emb = nx.mean(out.final, axis=1)
    probs = nx.softmax(class_logits(out.final, p), axis=-1)
    return probs.data, emb.data


def gradcheck_model(
    cfg: EncoderConfig,
    num_classes: int,
    codebook_size: int,
    batch: int = 2,
    frames: int = 32,
    seed: int = 0,
    lam: float = 0.5,
    span_ms: int = 80,
    max_per_param: int | None = None,
    tolerance: float = 1e-4,
    step: float = 1e-4,
):
    """Finite-difference check of the full joint loss in float64.

    Inputs, quantizer pseudo-labels and the mask are drawn once; only the
    model parameters are perturbed.
    """
    from .masking import MaskConfig, mask_frames, sample_mask
    from .objectives import masked_targets
    from .rpq import init_quantizer, quantize, stack_frames
    from .seeding import substream

    s = cfg.sub_sampling_factor
    with nx.precision("float64"):
        rng = substream(seed, "gradcheck.input")
        x = rng.standard_normal((batch, frames, cfg.input_dim))
        labels = rng.integers(0, num_classes, size=batch)
        q = init_quantizer(16, codebook_size, cfg.input_dim * s, seed)
        pseudo = quantize(np.stack([stack_frames(xi, s) for xi in x]), q)
        mcfg = MaskConfig(span_ms=span_ms, sub_sampling_factor=s)
        mrng = substream(seed, "gradcheck.mask")
        plans = [sample_mask(frames, mcfg, mrng) for _ in range(batch)]
        xm = np.stack([mask_frames(xi, pl.raw_masked, mcfg, mrng) for xi, pl in zip(x, plans)])
        targets = masked_targets([pl.masked_positions for pl in plans], pseudo)
        params = init_model_params(cfg, num_classes, codebook_size, seed)
        # move biases and norms off their symmetric init so every path is exercised
        prng = substream(seed, "gradcheck.params")
        for k, v in params.items():
            if v.ndim == 1:
                params[k] = v + 0.1 * prng.standard_normal(v.shape)

        def f(p):
            return batch_loss(p, xm, labels, cfg, lam, targets).loss

        return nx.finite_difference_check(
            f, params, step=step, tolerance=tolerance, max_per_param=max_per_param, seed=seed
        )
