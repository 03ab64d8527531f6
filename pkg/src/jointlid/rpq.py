"""Random-projection quantizer producing frame-level pseudo-labels.

A fixed Xavier-uniform projection maps each stacked feature frame to a
small space; after L2 normalization the frame is labelled with the index of
the nearest fixed unit-norm codebook vector.  Nothing here is trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import substream


@dataclass(frozen=True)
class QuantizerState:
    projection: np.ndarray  # (D, F')
    codebook: np.ndarray  # (M, D), unit rows
    seed: int = 0
    calls: list = field(default_factory=lambda: [0], compare=False, repr=False)

    def __post_init__(self):
        for arr in (self.projection, self.codebook):
            arr.setflags(write=False)
        if self.projection.shape[0] != self.codebook.shape[1]:
            raise ValueError(
                f"projection dim {self.projection.shape[0]} != codebook dim {self.codebook.shape[1]}"
            )

    @property
    def dim(self) -> int:
        return self.codebook.shape[1]

    @property
    def size(self) -> int:
        return self.codebook.shape[0]

    @property
    def input_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def call_count(self) -> int:
        return self.calls[0]


def init_quantizer(dim: int, size: int, input_dim: int, seed: int, dtype=np.float32) -> QuantizerState:
    if min(dim, size, input_dim) < 1:
        raise ValueError(f"quantizer dims must be >= 1, got D={dim}, M={size}, F'={input_dim}")
    bound = np.sqrt(6.0 / (dim + input_dim))
    proj = substream(seed, "rpq.projection").uniform(-bound, bound, size=(dim, input_dim))
    cb = substream(seed, "rpq.codebook").standard_normal((size, dim))
    cb /= np.linalg.norm(cb, axis=1, keepdims=True)
    # uniform(-b, b) is half-open in float64 but rounding to float32 may hit b
    proj = np.clip(proj.astype(dtype), -dtype(bound), dtype(bound))
    return QuantizerState(projection=proj, codebook=cb.astype(dtype), seed=seed)


def stack_frames(frames: np.ndarray, s: int) -> np.ndarray:
    """(T, F) -> (ceil(T/s), F*s); the final group is zero-padded."""
    if s < 1:
        raise ValueError("stacking factor must be >= 1")
    T, F = frames.shape
    U = -(-T // s)
    if U * s != T:
        frames = np.concatenate([frames, np.zeros((U * s - T, F), dtype=frames.dtype)])
    return frames.reshape(U, s * F)


def project(stacked: np.ndarray, q: QuantizerState) -> np.ndarray:
    """L2-normalized projections; rows with near-zero norm come back as zeros."""
    if stacked.shape[-1] != q.input_dim:
        raise ValueError(f"stacked width {stacked.shape[-1]} != quantizer input dim {q.input_dim}")
    v = stacked @ q.projection.T
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n < 1e-12, 0.0, v / np.maximum(n, 1e-12)).astype(v.dtype)


def quantize(stacked: np.ndarray, q: QuantizerState) -> np.ndarray:
    """Nearest-codebook index per row; ties go to the lowest index.

    Works on (U, F') or (B, U, F'); degenerate (zero) projections get label 0.
    """
    q.calls[0] += 1
    vhat = project(stacked, q).astype(np.float64)
    cb = q.codebook.astype(np.float64)
    # squared Euclidean distance, expanded; float64 keeps near-ties ordered
    dist = (vhat * vhat).sum(-1, keepdims=True) - 2.0 * vhat @ cb.T + (cb * cb).sum(-1)
    labels = np.argmin(dist, axis=-1)
    zero = ~vhat.any(axis=-1)
    labels[zero] = 0
    return labels.astype(np.int64)


def state_arrays(q: QuantizerState) -> dict[str, np.ndarray]:
    return {"quantizer.projection": q.projection, "quantizer.codebook": q.codebook}


def from_arrays(arrays: dict[str, np.ndarray], seed: int = 0) -> QuantizerState:
    return QuantizerState(
        projection=np.array(arrays["quantizer.projection"]),
        codebook=np.array(arrays["quantizer.codebook"]),
        seed=seed,
    )
