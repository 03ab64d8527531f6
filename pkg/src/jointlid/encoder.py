"""Convolutional sub-sampling front end and Conformer-style encoder blocks.

Parameters live in a flat ``dict[str, np.ndarray]``; forward functions take
the same mapping with :class:`~jointlid.numerics.Tensor` values so the
trainer can mark them differentiable.  Activations are (batch, time, dim).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .seeding import substream


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4  # Conformer(S): 16
    dim: int = 64  # Conformer(S): 144
    num_heads: int = 4
    conv_kernel: int = 15
    sub_sampling_factor: int = 4
    tap_layer: int | None = None  # defaults to num_layers - 1
    ffn_mult: int = 4
    input_dim: int = 80

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError(f"dim={self.dim} is not divisible by num_heads={self.num_heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        s = self.sub_sampling_factor
        if s < 1 or s & (s - 1):
            raise ValueError(f"sub_sampling_factor must be a power of two, got {s}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 1 <= self.tap <= self.num_layers:
            raise ValueError(f"tap_layer must lie in [1, {self.num_layers}], got {self.tap_layer}")

    @property
    def tap(self) -> int:
        if self.tap_layer is not None:
            return self.tap_layer
        return max(self.num_layers - 1, 1)

    @property
    def num_strided_convs(self) -> int:
        return int(math.log2(self.sub_sampling_factor))


@dataclass
class EncoderOutput:
    final: Tensor  # (B, U, dim)
    tapped: Tensor  # (B, U, dim)


def _xavier(rng, fan_in, fan_out, shape):
    b = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-b, b, size=shape)


def encoder_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.dim, cfg.dim * cfg.ffn_mult
    shapes: dict[str, tuple[int, ...]] = {}
    cin = cfg.input_dim
    for i in range(cfg.num_strided_convs):
        shapes[f"sub.conv{i}.w"] = (3, cin, d)
        shapes[f"sub.conv{i}.b"] = (d,)
        cin = d
    shapes["sub.proj.w"] = (cin, d)
    shapes["sub.proj.b"] = (d,)
    for layer in range(cfg.num_layers):
        p = f"blocks.{layer}."
        for ff in ("ff1", "ff2"):
            shapes.update({
                p + ff + ".ln.g": (d,), p + ff + ".ln.b": (d,),
                p + ff + ".w1": (d, f), p + ff + ".b1": (f,),
                p + ff + ".w2": (f, d), p + ff + ".b2": (d,),
            })
        shapes.update({
            p + "att.ln.g": (d,), p + "att.ln.b": (d,),
            p + "att.wqkv": (d, 3 * d), p + "att.bqkv": (3 * d,),
            p + "att.wo": (d, d), p + "att.bo": (d,),
            p + "conv.ln.g": (d,), p + "conv.ln.b": (d,),
            p + "conv.pw1.w": (d, 2 * d), p + "conv.pw1.b": (2 * d,),
            p + "conv.dw.w": (cfg.conv_kernel, d), p + "conv.dw.b": (d,),
            p + "conv.pw2.w": (d, d), p + "conv.pw2.b": (d,),
            p + "out.ln.g": (d,), p + "out.ln.b": (d,),
        })
    return shapes


def init_encoder_params(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = substream(seed, "init.encoder")
    params = {}
    for name, shape in encoder_param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        elif name.endswith("dw.w"):
            b = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-b, b, size=shape)
        elif len(shape) == 3:
            k, cin, cout = shape
            arr = _xavier(rng, k * cin, cout, shape)
        else:
            arr = _xavier(rng, shape[0], shape[1], shape)
        params[name] = arr.astype(np.float32)
    return params


def check_params(cfg: EncoderConfig, params) -> None:
    expected = encoder_param_shapes(cfg)
    missing = [k for k in expected if k not in params]
    if missing:
        raise ValueError(f"parameters missing for encoder config: {missing[:5]}")
    bad = [(k, tuple(params[k].shape), v) for k, v in expected.items() if tuple(params[k].shape) != v]
    if bad:
        raise ValueError(f"parameter shapes do not match encoder config: {bad[:5]}")


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis for a 2-D input (rows, in)."""
    return nx.affine(x, w, b)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    return nx.add(x, nx.expand(nx.reshape(b, (1, 1, b.shape[0])), x.shape))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    inv = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * inv)
    pe[:, 1::2] = np.cos(pos * inv[: dim // 2])
    return pe


def sub_sample(x: Tensor, cfg: EncoderConfig, p) -> Tensor:
    """(B, T, F) -> (B, ceil(T/s), dim) via stride-2 convolutions and a projection."""
    if x.shape[1] < cfg.sub_sampling_factor:
        raise ValueError(f"T={x.shape[1]} is shorter than the sub-sampling factor {cfg.sub_sampling_factor}")
    h = x
    for i in range(cfg.num_strided_convs):
        h = nx.swish(add_channel_bias(nx.conv1d(h, p[f"sub.conv{i}.w"], stride=2, padding=1), p[f"sub.conv{i}.b"]))
    B, U, C = h.shape
    h = linear(nx.reshape(h, (B * U, C)), p["sub.proj.w"], p["sub.proj.b"])
    return nx.reshape(h, (B, U, cfg.dim))


def _feed_forward(x2: Tensor, p, pre: str) -> Tensor:
    h = nx.layer_norm(x2, p[pre + ".ln.g"], p[pre + ".ln.b"])
    h = nx.swish(linear(h, p[pre + ".w1"], p[pre + ".b1"]))
    return linear(h, p[pre + ".w2"], p[pre + ".b2"])


def _self_attention(x2: Tensor, B: int, U: int, cfg: EncoderConfig, p, pre: str) -> Tensor:
    d, H = cfg.dim, cfg.num_heads
    dh = d // H
    h = nx.layer_norm(x2, p[pre + ".ln.g"], p[pre + ".ln.b"])
    qkv = linear(h, p[pre + ".wqkv"], p[pre + ".bqkv"])

    def heads(i):
        t = nx.reshape(nx.slice(qkv, 1, i * d, (i + 1) * d), (B, U, H, dh))
        return nx.transpose(t, (0, 2, 1, 3))

    q, k, v = heads(0), heads(1), heads(2)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = nx.matmul(nx.softmax(scores, axis=-1), v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B * U, d))
    return linear(ctx, p[pre + ".wo"], p[pre + ".bo"])


def _conv_module(x2: Tensor, B: int, U: int, cfg: EncoderConfig, p, pre: str) -> Tensor:
    d = cfg.dim
    h = nx.layer_norm(x2, p[pre + ".ln.g"], p[pre + ".ln.b"])
    h = linear(h, p[pre + ".pw1.w"], p[pre + ".pw1.b"])
    h = nx.mul(nx.slice(h, 1, 0, d), nx.sigmoid(nx.slice(h, 1, d, 2 * d)))  # GLU
    h = nx.depthwise_conv1d(nx.reshape(h, (B, U, d)), p[pre + ".dw.w"])
    h = nx.swish(add_channel_bias(h, p[pre + ".dw.b"]))
    return linear(nx.reshape(h, (B * U, d)), p[pre + ".pw2.w"], p[pre + ".pw2.b"])


def conformer_block(x: Tensor, layer: int, cfg: EncoderConfig, p) -> Tensor:
    """Half-step FFN, self-attention, convolution, half-step FFN, then layer norm."""
    B, U, d = x.shape
    pre = f"blocks.{layer}."
    h = nx.reshape(x, (B * U, d))
    h = nx.add(h, nx.mul(_feed_forward(h, p, pre + "ff1"), 0.5))
    h = nx.add(h, _self_attention(h, B, U, cfg, p, pre + "att"))
    h = nx.add(h, _conv_module(h, B, U, cfg, p, pre + "conv"))
    h = nx.add(h, nx.mul(_feed_forward(h, p, pre + "ff2"), 0.5))
    h = nx.layer_norm(h, p[pre + "out.ln.g"], p[pre + "out.ln.b"])
    return nx.reshape(h, (B, U, d))


def encode(x: Tensor, cfg: EncoderConfig, p) -> EncoderOutput:
    """Run the front end and all blocks on (B, T, F) features."""
    check_params(cfg, p)
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise nx.ShapeError("encode", x.shape, detail=f"expected (B, T, {cfg.input_dim})")
    h = sub_sample(x, cfg, p)
    B, U, d = h.shape
    pe = Tensor(sinusoidal_positions(U, d)[None])
    h = nx.add(h, nx.expand(pe, (B, U, d)))
    tapped = None
    for layer in range(cfg.num_layers):
        h = conformer_block(h, layer, cfg, p)
        if layer + 1 == cfg.tap:
            tapped = h
    return EncoderOutput(final=h, tapped=tapped)
