"""Time-axis span masking with coverage-calibrated start probability."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .features import FeatureSequence

SPANS_MS = (80, 160, 240, 320, 400, 480)


@dataclass(frozen=True)
class MaskConfig:
    span_ms: int = 240
    target_coverage: float = 0.35
    frame_hop_ms: int = 10
    sub_sampling_factor: int = 4
    fill: str = "noise"  # or "zero"
    noise_std: float = 0.1
    position_rule: str = "any"  # or "all"

    def __post_init__(self):
        if self.span_ms < 0 or self.span_ms % self.frame_hop_ms:
            raise ValueError(f"span_ms={self.span_ms} must be a non-negative multiple of {self.frame_hop_ms}")
        if not 0.0 < self.target_coverage < 1.0:
            raise ValueError(f"target_coverage must lie in (0, 1), got {self.target_coverage}")
        if self.sub_sampling_factor < 1:
            raise ValueError("sub_sampling_factor must be >= 1")
        if self.fill not in ("noise", "zero"):
            raise ValueError(f"fill must be 'noise' or 'zero', got {self.fill!r}")
        if self.position_rule not in ("any", "all"):
            raise ValueError(f"position_rule must be 'any' or 'all', got {self.position_rule!r}")

    @property
    def span_frames(self) -> int:
        return self.span_ms // self.frame_hop_ms


@dataclass
class MaskPlan:
    raw_masked: np.ndarray  # bool, (T,)
    masked_positions: np.ndarray  # sorted int indices into the sub-sampled axis
    start_prob: float
    num_positions: int

    @property
    def coverage(self) -> float:
        return float(self.raw_masked.mean()) if self.raw_masked.size else 0.0

    @property
    def position_mask(self) -> np.ndarray:
        m = np.zeros(self.num_positions, dtype=bool)
        m[self.masked_positions] = True
        return m


def start_probability(cfg: MaskConfig, num_frames: int | None = None) -> float:
    """Per-frame span start probability giving ``target_coverage`` per frame.

    A frame stays unmasked only if none of the ``m`` frames that could start
    a span covering it does so: (1 - p) ** m = 1 - coverage.

    With ``num_frames`` given, the probability is lowered so that coverage
    stays on target once an all-empty draw is redrawn (see
    :func:`sample_mask`): q(p) * (1 + P_empty(p)) = coverage.
    """
    m = cfg.span_frames
    if m < 1:
        raise ValueError(f"span of {cfg.span_ms} ms is shorter than one frame")
    c = cfg.target_coverage
    p = 1.0 - (1.0 - c) ** (1.0 / m)
    if num_frames is None:
        return p
    n_starts = num_frames + m - 1

    def excess(r):
        keep = 1.0 - r
        return (1.0 - keep**m) * (1.0 + keep**n_starts) - c

    if excess(p) <= 1e-15:
        return p
    return float(brentq(excess, 0.0, p, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def positions_from_frames(raw_masked: np.ndarray, s: int, rule: str = "any") -> np.ndarray:
    """Sub-sampled indices u whose frames [u*s, (u+1)*s) satisfy ``rule``."""
    T = raw_masked.shape[0]
    U = -(-T // s)
    padded = np.full(U * s, rule == "all", dtype=bool)
    padded[:T] = raw_masked
    groups = padded.reshape(U, s)
    hit = groups.any(axis=1) if rule == "any" else groups.all(axis=1)
    return np.flatnonzero(hit)


def _draw(T: int, m: int, p: float, rng: np.random.Generator) -> np.ndarray:
    # starts range over [-(m-1), T) so frames near t=0 see as many
    # candidate spans as interior frames do
    starts = rng.random(T + m - 1) < p
    covered = np.convolve(starts.astype(np.int32), np.ones(m, dtype=np.int32))
    return covered[m - 1:m - 1 + T] > 0


def sample_mask(T: int, cfg: MaskConfig, rng: np.random.Generator) -> MaskPlan:
    if T < 1:
        raise ValueError("T must be >= 1")
    s = cfg.sub_sampling_factor
    U = -(-T // s)
    if cfg.span_ms == 0:
        return MaskPlan(np.zeros(T, dtype=bool), np.zeros(0, dtype=np.int64), 0.0, U)
    p = start_probability(cfg, T)
    m = cfg.span_frames
    raw = _draw(T, m, p, rng)
    pos = positions_from_frames(raw, s, cfg.position_rule)
    if pos.size == 0:
        raw = _draw(T, m, p, rng)
        pos = positions_from_frames(raw, s, cfg.position_rule)
    return MaskPlan(raw, pos, p, U)


def mask_frames(
    frames: np.ndarray, raw_masked: np.ndarray, cfg: MaskConfig, rng: np.random.Generator
) -> np.ndarray:
    if raw_masked.shape != (frames.shape[0],):
        raise ValueError(f"mask length {raw_masked.shape[0]} != {frames.shape[0]} frames")
    out = frames.copy()
    k = int(raw_masked.sum())
    if k == 0:
        return out
    if cfg.fill == "noise":
        out[raw_masked] = rng.normal(0.0, cfg.noise_std, size=(k, frames.shape[1]))
    else:
        out[raw_masked] = 0.0
    return out


def apply_mask(
    f: FeatureSequence, plan: MaskPlan, rng: np.random.Generator, cfg: MaskConfig = MaskConfig()
) -> FeatureSequence:
    return FeatureSequence(mask_frames(f.frames, plan.raw_masked, cfg, rng), f.frame_hop_s, f.source_id)
