"""Adam with warmup, the joint training loop, and the checkpoint format.

A step draws a batch in a seed-defined order, crops and normalizes the
features, labels the *unmasked* stacked frames with the fixed quantizer,
masks, runs the encoder and both heads, and applies one Adam update.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .datasets import Dataset, batch_indices
from .encoder import EncoderConfig
from .features import FeatureConfig, FeatureSequence, FeatureStats, normalize_features, random_crop
from .masking import MaskConfig, apply_mask, sample_mask
from .model import as_leaves, batch_loss, init_model_params
from .objectives import masked_targets
from .rpq import QuantizerState, from_arrays, init_quantizer, quantize, stack_frames, state_arrays
from .seeding import substream

CHECKPOINT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 500  # full scale: 5000
    batch_size: int = 32  # full scale: 256
    total_steps: int = 2000
    lam: float = 0.5
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.total_steps < self.warmup_steps:
            raise ValueError("total_steps must be >= warmup_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then inverse-square-root decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = cfg.warmup_steps
    return cfg.peak_lr * min(step / w, math.sqrt(w / step))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads.values()))


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> AdamState:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place.

    All gradients are checked before anything is modified, so a non-finite
    gradient leaves parameters and moments untouched.
    """
    for name in params:
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        if grads[name].shape != params[name].shape:
            raise nx.ShapeError("adam_step", params[name].shape, grads[name].shape, detail=name)
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    scale = 1.0
    if cfg.grad_clip is not None:
        norm = global_norm(grads)
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name] * scale if scale != 1.0 else grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    quantizer: QuantizerState
    stats: FeatureStats
    step: int
    languages: list[str]
    config: dict = field(default_factory=dict)

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.config["encoder"])

    @property
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(**self.config.get("features", {}))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        out.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        out.update(state_arrays(self.quantizer))
        out["norm.mean"] = self.stats.mean
        out["norm.std"] = self.stats.std
        return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """8-byte little-endian header length, UTF-8 JSON header, float32 LE body."""
    arrays = ckpt.arrays()
    entries, offset = [], 0
    for name, arr in arrays.items():
        nbytes = int(np.prod(arr.shape, dtype=np.int64)) * 4
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset})
        offset += nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "step": ckpt.step,
        "adam_t": ckpt.adam.t,
        "quantizer_seed": ckpt.quantizer.seed,
        "languages": ckpt.languages,
        "config": ckpt.config,
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = memoryview(raw)[8 + n:]
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + 4 * count > len(body):
            raise ValueError(f"{path}: array {e['name']} runs past end of file")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    return Checkpoint(
        params=group("param."),
        adam=AdamState(group("adam.m."), group("adam.v."), header["adam_t"]),
        quantizer=from_arrays(arrays, header["quantizer_seed"]),
        stats=FeatureStats(arrays["norm.mean"], arrays["norm.std"]),
        step=header["step"],
        languages=header["languages"],
        config=header["config"],
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class QuantizerConfig:
    dim: int = 16
    size: int = 256  # 64 and 1024 are also supported


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]

    def final_epoch_pseudo_acc(self, steps_per_epoch: int) -> float | None:
        vals = [r["pseudo_acc"] for r in self.log[-steps_per_epoch:] if r.get("pseudo_acc") is not None]
        return float(np.mean(vals)) if vals else None


def config_echo(enc: EncoderConfig, mask: MaskConfig, train: TrainConfig, quant: QuantizerConfig, feat: FeatureConfig) -> dict:
    return {
        "encoder": asdict(enc),
        "masking": asdict(mask),
        "train": asdict(train),
        "quantizer": asdict(quant),
        "features": asdict(feat),
    }


def build_batch(
    feats: list[FeatureSequence],
    idx: Iterable[int],
    stats: FeatureStats,
    crop_frames: int,
    rng: np.random.Generator,
) -> np.ndarray:
    hop = feats[0].frame_hop_s
    return np.stack([
        normalize_features(random_crop(feats[i], rng, crop_frames * hop), stats).frames for i in idx
    ])


def train(
    dataset: Dataset,
    enc_cfg: EncoderConfig,
    mask_cfg: MaskConfig,
    train_cfg: TrainConfig,
    quant_cfg: QuantizerConfig = QuantizerConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    features: list[FeatureSequence] | None = None,
    quantizer: QuantizerState | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch; ``features`` may carry precomputed log-mels for ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if train_cfg.lam > 0 and mask_cfg.span_ms == 0:
        raise ValueError("joint training needs a non-empty mask; use span_ms > 0 or lambda = 0")
    if mask_cfg.sub_sampling_factor != enc_cfg.sub_sampling_factor:
        raise ValueError("mask and encoder sub-sampling factors differ")
    if features is None:
        features = dataset.features(feat_cfg)
    labels_all = dataset.labels
    seed = train_cfg.seed
    s = enc_cfg.sub_sampling_factor
    if quantizer is None:
        quantizer = init_quantizer(quant_cfg.dim, quant_cfg.size, enc_cfg.input_dim * s, seed)
    if feat_cfg.normalize:
        stats = FeatureStats.from_sequences(features)
    else:  # identity statistics keep the checkpoint layout unchanged
        n = features[0].num_bins
        stats = FeatureStats(np.zeros(n, np.float32), np.ones(n, np.float32))
    params = init_model_params(enc_cfg, len(dataset.languages), quantizer.size, seed)
    adam = AdamState.zeros_like(params)
    order = batch_indices(len(dataset), train_cfg.batch_size, seed)
    T = feat_cfg.crop_frames
    log: list[dict] = []

    for step in range(1, train_cfg.total_steps + 1):
        idx = order(step)
        x = build_batch(features, idx, stats, T, substream(seed, "train.crop", step))
        targets = None
        mask_rng = substream(seed, "train.mask", step)
        plans = [sample_mask(T, mask_cfg, mask_rng) for _ in idx]
        if train_cfg.lam > 0:
            pseudo = quantize(np.stack([stack_frames(xi, s) for xi in x]), quantizer)
            targets = masked_targets([p.masked_positions for p in plans], pseudo)
        if mask_cfg.span_ms > 0:
            x = np.stack([apply_mask(FeatureSequence(xi), pl, mask_rng, mask_cfg).frames for xi, pl in zip(x, plans)])

        leaves = as_leaves(params)
        res = batch_loss(leaves, x, labels_all[idx], enc_cfg, train_cfg.lam, targets)
        grads = nx.backward(res.loss)
        for k in params.keys() - grads.keys():  # e.g. the MLM head when lambda == 0
            grads[k] = np.zeros_like(params[k])
        lr = lr_schedule(step, train_cfg)
        adam_step(params, grads, adam, lr, train_cfg)

        rec = {"step": step, "lr": lr, "L_s": res.losses.supervised}
        if train_cfg.lam > 0:
            rec["L_u"] = res.losses.unsupervised
        rec["L"] = res.losses.total
        if train_cfg.lam > 0:
            rec["pseudo_acc"] = res.pseudo_acc
            rec["masked_count"] = res.losses.masked_count
        rec["time"] = time.time()
        log.append(rec)
        if on_step is not None:
            on_step(rec)

    ckpt = Checkpoint(
        params=params,
        adam=adam,
        quantizer=quantizer,
        stats=stats,
        step=train_cfg.total_steps,
        languages=list(dataset.languages),
        config=config_echo(enc_cfg, mask_cfg, train_cfg, quant_cfg, feat_cfg),
    )
    return TrainResult(ckpt, log)


def write_log(path: str | Path, records: list[dict]) -> None:
    """JSON-lines training log; wall-clock time lives only in the ``time`` field."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
