"""Temporal transformer classifier on single-pixel multivariate timeseries.

The model is functional: parameters live in an ordered ``dict`` of named
tensors (``ModelParams``) and ``forward`` is a pure function of params,
batch, the train flag and the dropout generator.

Pipeline::

    layer norm -> [conv1d + ReLU] x 2 -> layer norm -> + sinusoidal PE
    -> post-norm encoder x L -> layer norm -> max over time (features)
    -> linear head (logits)
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from . import numerics as nx
from .errors import ConfigError, DataError, ShapeError

ModelParams = dict  # name -> torch.Tensor, insertion ordered

CHECKPOINT_MAGIC = b"ARCDOGCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 28
    timepoints: int = 8
    feature_dim: int = 64
    encoder_layers: int = 2
    heads: int = 2
    feedforward_dim: int = 256
    dropout_rate: float = 0.1
    num_classes: int = 25
    conv_kernel: int = 3

    def __post_init__(self):
        if self.feature_dim % self.heads:
            raise ConfigError(
                f"feature_dim {self.feature_dim} not divisible by heads {self.heads}"
            )
        if self.timepoints < 1:
            raise ConfigError("timepoints must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_channels < 1 or self.encoder_layers < 0:
            raise ConfigError("input_channels must be >= 1 and encoder_layers >= 0")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.heads


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, d, k = config.input_channels, config.feature_dim, config.conv_kernel
    shapes = {
        "in_norm.gain": (c,),
        "in_norm.bias": (c,),
        "conv1.weight": (d, c, k),
        "conv1.bias": (d,),
        "conv2.weight": (d, d, k),
        "conv2.bias": (d,),
        "mid_norm.gain": (d,),
        "mid_norm.bias": (d,),
    }
    for i in range(config.encoder_layers):
        p = f"enc{i}."
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (d, d)
            shapes[p + f"attn.b{w}"] = (d,)
        shapes[p + "norm1.gain"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "ff1.weight"] = (config.feedforward_dim, d)
        shapes[p + "ff1.bias"] = (config.feedforward_dim,)
        shapes[p + "ff2.weight"] = (d, config.feedforward_dim)
        shapes[p + "ff2.bias"] = (d,)
        shapes[p + "norm2.gain"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
    shapes["out_norm.gain"] = (d,)
    shapes["out_norm.bias"] = (d,)
    shapes["head.weight"] = (config.num_classes, d)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform weights, unit norm gains, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            t = torch.ones(shape, dtype=nx.DTYPE)
        elif name.endswith(".weight") or ".attn.w" in name:
            fan_in = math.prod(shape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            t = (torch.rand(shape, generator=gen, dtype=nx.DTYPE) * 2 - 1) * bound
        else:
            t = torch.zeros(shape, dtype=nx.DTYPE)
        params[name] = t
    return params


def positional_encoding(timepoints: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal encoding, shape (timepoints, dim)."""
    pos = torch.arange(timepoints, dtype=nx.DTYPE)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=nx.DTYPE) * (-math.log(10000.0) / dim))
    pe = torch.zeros(timepoints, dim, dtype=nx.DTYPE)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe


def _linear(x, w, b):
    return nx.add(nx.matmul(x, w.T), b)


def _self_attention(x, params, prefix, config, train, generator, trace):
    m, t, d = x.shape
    h, dh = config.heads, config.head_dim

    def split(z):
        return z.reshape(m, t, h, dh).transpose(1, 2)

    q = split(_linear(x, params[prefix + "wq"], params[prefix + "bq"]))
    k = split(_linear(x, params[prefix + "wk"], params[prefix + "bk"]))
    v = split(_linear(x, params[prefix + "wv"], params[prefix + "bv"]))
    weights = nx.softmax(nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh), axis=-1)
    if trace is not None:
        trace.setdefault("attention", []).append(weights.detach())
    weights = nx.dropout(weights, config.dropout_rate, train, generator)
    out = nx.matmul(weights, v).transpose(1, 2).reshape(m, t, d)
    return _linear(out, params[prefix + "wo"], params[prefix + "bo"])


def forward(
    params: ModelParams,
    batch: torch.Tensor,
    config: ModelConfig,
    train: bool = False,
    generator: torch.Generator | None = None,
    trace: dict | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (logits m x K, features m x feature_dim) for an m x T x C batch."""
    if batch.dim() != 3 or tuple(batch.shape[1:]) != (config.timepoints, config.input_channels):
        raise ShapeError(
            f"forward: batch shape {tuple(batch.shape)} vs expected "
            f"(m, {config.timepoints}, {config.input_channels})"
        )
    with nx.finite_checks(False):
        logits, features = _forward(params, batch, config, train, generator, trace)
    nx.check_finite(features, "forward features")
    nx.check_finite(logits, "forward logits")
    return logits, features


def _forward(p, batch, config, train, generator, trace):
    rate = config.dropout_rate
    x = nx.layer_norm(batch, p["in_norm.gain"], p["in_norm.bias"])
    x = x.transpose(1, 2)  # m, C, T
    x = nx.relu(nx.conv1d(x, p["conv1.weight"], p["conv1.bias"]))
    x = nx.relu(nx.conv1d(x, p["conv2.weight"], p["conv2.bias"]))
    x = x.transpose(1, 2)  # m, T, D
    x = nx.layer_norm(x, p["mid_norm.gain"], p["mid_norm.bias"])
    x = nx.add(x, positional_encoding(config.timepoints, config.feature_dim).to(x.dtype))

    for i in range(config.encoder_layers):
        pre = f"enc{i}."
        a = _self_attention(x, p, pre + "attn.", config, train, generator, trace)
        x = nx.layer_norm(nx.add(x, nx.dropout(a, rate, train, generator)),
                          p[pre + "norm1.gain"], p[pre + "norm1.bias"])
        ff = nx.relu(_linear(x, p[pre + "ff1.weight"], p[pre + "ff1.bias"]))
        ff = nx.dropout(ff, rate, train, generator)
        ff = _linear(ff, p[pre + "ff2.weight"], p[pre + "ff2.bias"])
        x = nx.layer_norm(nx.add(x, nx.dropout(ff, rate, train, generator)),
                          p[pre + "norm2.gain"], p[pre + "norm2.bias"])

    x = nx.layer_norm(x, p["out_norm.gain"], p["out_norm.bias"])
    features = nx.max_over_axis(x, axis=1)
    logits = _linear(features, p["head.weight"], p["head.bias"])
    return logits, features


def num_parameters(params: ModelParams) -> int:
    return sum(t.numel() for t in params.values())


# ---------------------------------------------------------------------------
# checkpoint files
#
#   magic "ARCDOGCK" | u32 version | u32 config length | config JSON (utf-8)
#   | u32 tensor count | per tensor: u32 name length, name (utf-8),
#   u32 rank, rank x u32 dims, raw little-endian float64 data


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig,
                    extra: dict | None = None) -> None:
    header = json.dumps({"model": asdict(config), "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{t.dim()}I", t.dim(), *t.shape))
            fh.write(t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig, dict]:
    import numpy as np

    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    version, hlen = take("<II")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[off:off + hlen])
    off += hlen
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = data[off:off + nlen].decode()
        off += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n = math.prod(dims)
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        params[name] = torch.from_numpy(arr.astype(np.float64))
    config = ModelConfig(**header["model"])
    expected = param_shapes(config)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise DataError(f"{path}: tensor shapes do not match the stored config")
    return params, config, header.get("extra", {})
