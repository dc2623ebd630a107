"""Multichannel masking separator: shared encoder, triple-path transformer
masking network, masked reference channel, shared decoder.

The masking network chunks the frame axis into 50%-overlapped segments and
alternates attention along three axes per block: across microphones, within
a chunk, and across chunks.  Region estimates come from masking the encoded
reference channel and decoding with kernels shared across regions.

Channel handling keeps the parameter count independent of the microphone
count: the region projection is a per-channel linear summed over channels,
and microphones are distinguished by a fixed (parameter-free) sinusoidal
channel encoding added to the features.  Output slots are region-ordered:
output 1 = D, 2 = C, 3 = B.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import (
    ConfigError,
    ShapeError,
    Tensor,
    chunk,
    chunk_count,
    concat,
    conv1d,
    conv1d_transpose,
    layer_norm,
    linear,
    matmul,
    multi_head_attention,
    no_grad,
    overlap_add,
    prelu,
    relu,
    sigmoid,
    stack,
    ttanh,
    transpose,
)

CHECKPOINT_MAGIC = b"RGNSEP01"

_PATHS = ("inter_channel", "intra_chunk", "inter_chunk")


@dataclass(frozen=True)
class ModelConfig:
    num_mics: int
    num_regions: int
    features: int
    window: int = 16
    hop: int = 8
    chunk_size: int = 250
    num_blocks: int = 4
    heads: int = 8
    feedforward_dim: int = 1024

    def __post_init__(self):
        if min(self.num_mics, self.num_regions, self.features, self.window,
               self.chunk_size, self.num_blocks, self.heads, self.feedforward_dim) < 1:
            raise ConfigError(f"all model dimensions must be positive: {self}")
        if self.features % self.heads != 0:
            raise ConfigError(
                f"features {self.features} not divisible by {self.heads} heads")
        if self.hop * 2 != self.window:
            raise ConfigError(f"hop must be window/2, got hop={self.hop} window={self.window}")
        if self.chunk_size % 2 != 0:
            raise ConfigError(f"chunk size must be even, got {self.chunk_size}")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Reference instance: 3 mics, 3 regions, ~4.1M parameters."""
        return cls(num_mics=3, num_regions=3, features=128, window=16, hop=8,
                   chunk_size=250, num_blocks=4, heads=8, feedforward_dim=1024)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Smallest config that exercises every code path; used by tests."""
        return cls(num_mics=2, num_regions=2, features=8, window=16, hop=8,
                   chunk_size=4, num_blocks=1, heads=2, feedforward_dim=16)


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Named parameter map in checkpoint order."""
    f, dff = config.features, config.feedforward_dim
    shapes: Dict[str, tuple] = {
        "encoder.kernels": (f, 1, config.window),
        "decoder.kernels": (f, 1, config.window),
        "input_norm.gain": (f,),
        "input_norm.bias": (f,),
        "input_proj.w": (f, f),
        "input_proj.b": (f,),
    }
    for b in range(config.num_blocks):
        for path in _PATHS:
            pre = f"block{b}.{path}"
            for name in ("wq", "wk", "wv", "wo"):
                shapes[f"{pre}.attn.{name}"] = (f, f)
                shapes[f"{pre}.attn.b{name[1]}"] = (f,)
            shapes[f"{pre}.ln1.gain"] = (f,)
            shapes[f"{pre}.ln1.bias"] = (f,)
            shapes[f"{pre}.ff1.w"] = (f, dff)
            shapes[f"{pre}.ff1.b"] = (dff,)
            shapes[f"{pre}.ff2.w"] = (dff, f)
            shapes[f"{pre}.ff2.b"] = (f,)
            shapes[f"{pre}.ln2.gain"] = (f,)
            shapes[f"{pre}.ln2.bias"] = (f,)
    shapes.update({
        "prelu.slope": (),
        "region_proj.w": (f, config.num_regions * f),
        "region_proj.b": (config.num_regions * f,),
        "gate_tanh.w": (f, f),
        "gate_tanh.b": (f,),
        "gate_sigmoid.w": (f, f),
        "gate_sigmoid.b": (f,),
        "mask_out.w": (f, f),
        "mask_out.b": (f,),
    })
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config: ModelConfig, seed: int = 0,
                dtype=np.float64) -> Dict[str, Tensor]:
    """Fan-in scaled normal weights, unit norm gains, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([0x1417, seed]))
    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gain",):
            data = np.ones(shape)
        elif leaf in ("bias", "b") or leaf.startswith("b"):
            data = np.zeros(shape)
        elif name == "prelu.slope":
            data = np.array(0.25)
        elif leaf == "kernels":
            data = rng.standard_normal(shape) / math.sqrt(config.window)
        else:
            fan_in = shape[0]
            data = rng.standard_normal(shape) / math.sqrt(fan_in)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def channel_encoding(num_mics: int, features: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal code distinguishing microphones, (M, F).

    Parameter-free by design so the model size stays independent of the
    channel count while inter-channel attention can still tell mics apart.
    """
    pos = np.arange(num_mics, dtype=np.float64)[:, None]
    idx = np.arange(features, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (idx // 2) * 2.0 / features)
    enc = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return enc.astype(dtype)


@dataclass
class SeparationOutput:
    estimates: Tensor            # (R, T), slot order D, C, B
    masks: Tensor                # (R, N, F), nonnegative
    attention: Optional[list] = None  # per block: (heads, M, M) ndarray


def encode(y, params: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Shared-kernel strided conv per channel plus ReLU: (M,T) -> (M,N,F)."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y))
    if y.ndim != 2:
        raise ShapeError(f"encode expects (mics, samples), got {y.shape}")
    if y.shape[0] != config.num_mics:
        raise ShapeError(f"input has {y.shape[0]} channels, config says {config.num_mics}")
    kernels = params["encoder.kernels"]
    frames = [transpose(conv1d(y[m:m + 1], kernels, stride=config.hop), (1, 0))
              for m in range(config.num_mics)]
    return relu(stack(frames))


def _transformer_layer(x: Tensor, params, prefix: str, heads: int):
    """Post-norm encoder layer; returns (output, attention weights)."""
    p = lambda s: params[f"{prefix}.{s}"]
    attn_out, attn = multi_head_attention(
        x, x, x,
        p("attn.wq"), p("attn.bq"), p("attn.wk"), p("attn.bk"),
        p("attn.wv"), p("attn.bv"), p("attn.wo"), p("attn.bo"), heads)
    x = layer_norm(x + attn_out, p("ln1.gain"), p("ln1.bias"))
    hidden = relu(linear(x, p("ff1.w"), p("ff1.b")))
    x = layer_norm(x + linear(hidden, p("ff2.w"), p("ff2.b")),
                   p("ln2.gain"), p("ln2.bias"))
    return x, attn


def masking_network(encoded: Tensor, params: Dict[str, Tensor],
                    config: ModelConfig) -> Tuple[Tensor, list]:
    """(M,N,F) -> nonnegative masks (R,N,F) plus per-block channel attention."""
    m, n, f = encoded.shape
    if m != config.num_mics or f != config.features:
        raise ShapeError(f"encoded shape {encoded.shape} does not match config "
                         f"(M={config.num_mics}, F={config.features})")

    x = layer_norm(encoded, params["input_norm.gain"], params["input_norm.bias"])
    x = linear(x, params["input_proj.w"], params["input_proj.b"])
    x = x + Tensor(channel_encoding(m, f, x.data.dtype)[:, None, :])

    x = chunk(x, config.chunk_size)               # (M, Q, K, F)

    channel_attention = []
    for b in range(config.num_blocks):
        # mics attend to each other at every (chunk, position)
        x = transpose(x, (1, 2, 0, 3))            # (Q, K, M, F)
        x, attn = _transformer_layer(x, params, f"block{b}.inter_channel", config.heads)
        channel_attention.append(attn.data.mean(axis=(0, 1)))
        x = transpose(x, (2, 0, 1, 3))            # (M, Q, K, F)

        x, _ = _transformer_layer(x, params, f"block{b}.intra_chunk", config.heads)

        x = transpose(x, (0, 2, 1, 3))            # (M, K, Q, F)
        x, _ = _transformer_layer(x, params, f"block{b}.inter_chunk", config.heads)
        x = transpose(x, (0, 2, 1, 3))            # (M, Q, K, F)

    x = prelu(x, params["prelu.slope"])

    # per-channel projection to R*F, summed over channels: size stays
    # independent of M, each extra region adds (F+1)*F parameters
    proj = matmul(x, params["region_proj.w"]).sum(axis=0)   # (Q, K, R*F)
    proj = proj + params["region_proj.b"]
    q, k = proj.shape[0], proj.shape[1]
    proj = proj.reshape((q, k, config.num_regions, f))
    proj = transpose(proj, (2, 0, 1, 3))                     # (R, Q, K, F)

    frames = overlap_add(proj, n)                            # (R, N, F)
    gated = (ttanh(linear(frames, params["gate_tanh.w"], params["gate_tanh.b"]))
             * sigmoid(linear(frames, params["gate_sigmoid.w"], params["gate_sigmoid.b"])))
    masks = relu(linear(gated, params["mask_out.w"], params["mask_out.b"]))
    return masks, channel_attention


def separate(y, params: Dict[str, Tensor], config: ModelConfig,
             reference_index: Optional[int] = None) -> SeparationOutput:
    """Full pipeline: estimates[r] = decode(mask_r * encoded reference)."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y))
    t = y.shape[-1]
    if reference_index is None:
        reference_index = config.num_mics // 2
    if not 0 <= reference_index < config.num_mics:
        raise ConfigError(f"reference index {reference_index} out of range")

    encoded = encode(y, params, config)
    masks, attention = masking_network(encoded, params, config)
    reference = encoded[reference_index]                     # (N, F)

    estimates = []
    for r in range(config.num_regions):
        masked = transpose(masks[r] * reference, (1, 0))     # (F, N)
        wave = conv1d_transpose(masked, params["decoder.kernels"], stride=config.hop)[0]
        if wave.shape[0] < t:
            pad = Tensor(np.zeros(t - wave.shape[0], dtype=wave.data.dtype))
            wave = concat([wave, pad], axis=0)
        estimates.append(wave)
    return SeparationOutput(estimates=stack(estimates), masks=masks,
                            attention=attention)


def attention_probe(y, params: Dict[str, Tensor], config: ModelConfig,
                    block_index: int, layer: str = "inter_channel") -> np.ndarray:
    """Inter-channel attention of one block averaged over all time positions.

    Returns (heads, M, M); every row sums to one.
    """
    if layer != "inter_channel":
        raise ConfigError(f"attention probe supports only the inter_channel layer, got {layer!r}")
    if not 0 <= block_index < config.num_blocks:
        raise ConfigError(f"block index {block_index} out of range "
                          f"(model has {config.num_blocks} blocks)")
    with no_grad():
        out = separate(y, params, config)
    return out.attention[block_index]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Dict[str, Tensor], config: ModelConfig) -> None:
    """Versioned magic + JSON header + little-endian float32 payload."""
    names = list(param_shapes(config))
    missing = [n for n in names if n not in params]
    if missing:
        raise ConfigError(f"cannot checkpoint, params missing {missing}")
    header = {
        "config": asdict(config),
        "params": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
        "dtype": "<f4",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes()
                       for n in names)
    from .fileio import atomic_write_bytes
    atomic_write_bytes(path, CHECKPOINT_MAGIC + len(blob).to_bytes(8, "little")
                       + blob + payload)


def load_checkpoint(path, dtype=np.float64) -> Tuple[Dict[str, Tensor], ModelConfig]:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(raw[off:off + 8], "little")
    header = json.loads(raw[off + 8:off + 8 + header_len].decode("utf-8"))
    config = ModelConfig(**header["config"])

    params: Dict[str, Tensor] = {}
    cursor = off + 8 + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 4
        chunk_bytes = raw[cursor:cursor + size]
        if len(chunk_bytes) != size:
            raise ValueError(f"{path} truncated at parameter {entry['name']}")
        data = np.frombuffer(chunk_bytes, dtype="<f4").reshape(shape).astype(dtype)
        params[entry["name"]] = Tensor(data, requires_grad=True)
        cursor += size
    if cursor != len(raw):
        raise ValueError(f"{path} has {len(raw) - cursor} trailing bytes")
    return params, config
