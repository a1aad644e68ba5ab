"""Parameterised building blocks and parameter initialisation."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import N_BLOCKS, ModelConfig, scale_key
from .errors import ConfigError, DimensionError
from .tensor import Tensor

FROZEN_PREFIX = "backbone."
BACKBONE_STAGES = 3


class ParamStore:
    """Named parameters, iterated in lexicographic order.

    Everything under ``backbone.`` is frozen: stored and checkpointed, never
    trained.
    """

    def __init__(self, params: dict[str, Tensor], config: ModelConfig, seed: int = 0):
        self.params = {name: params[name] for name in sorted(params)}
        self.config = config
        self.seed = int(seed)
        for name, p in self.params.items():
            p.requires_grad = not name.startswith(FROZEN_PREFIX)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if not n.startswith(FROZEN_PREFIX)}

    def frozen(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n.startswith(FROZEN_PREFIX)}

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n.startswith(prefix)}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self, trainable_only: bool = True) -> int:
        src = self.trainable() if trainable_only else self.params
        return sum(p.size for p in src.values())

    def state_bytes(self, prefix: str = "") -> bytes:
        """Concatenated raw bytes of all parameters under ``prefix``, for exact comparisons."""
        return b"".join(p.data.tobytes() for n, p in self.params.items() if n.startswith(prefix))

    def copy(self) -> "ParamStore":
        return ParamStore({n: Tensor(p.data.copy()) for n, p in self.params.items()}, self.config, self.seed)

    # typed views -----------------------------------------------------------
    def linear(self, prefix: str) -> "LinearLayer":
        return LinearLayer(self[f"{prefix}.weight"], self[f"{prefix}.bias"])

    def mha(self, prefix: str) -> "MultiHeadAttention":
        return MultiHeadAttention(
            self.config.n_heads,
            self[f"{prefix}.W_q"], self[f"{prefix}.W_k"], self[f"{prefix}.W_v"], self[f"{prefix}.W_o"],
        )

    def mlp(self, prefix: str) -> "MlpBlock":
        return MlpBlock(self.linear(f"{prefix}.fc1"), self.linear(f"{prefix}.fc2"), self.config.mlp_activation)

    def layer_norm(self, prefix: str) -> tuple[Tensor, Tensor]:
        return self[f"{prefix}.gamma"], self[f"{prefix}.beta"]


@dataclass
class LinearLayer:
    weight: Tensor  # D_out x D_in
    bias: Tensor    # D_out


@dataclass
class MultiHeadAttention:
    num_heads: int
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor


@dataclass
class MlpBlock:
    fc1: LinearLayer
    fc2: LinearLayer
    activation: str = "relu"


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    d_out, d_in = layer.weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"linear expects trailing dim {d_in}, got {x.shape}")
    y = T.matmul(x if x.ndim >= 2 else T.reshape(x, (1, d_in)), T.transpose(layer.weight))
    y = y + T.broadcast_to(layer.bias, y.shape)
    return y if x.ndim >= 2 else T.reshape(y, (d_out,))


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, s, d = x.shape
    n = len(lead)
    x = T.reshape(x, (*lead, s, h, d // h))
    return T.transpose(x, list(range(n)) + [n + 1, n, n + 2])


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    n = len(lead)
    x = T.transpose(x, list(range(n)) + [n + 1, n, n + 2])
    return T.reshape(x, (*lead, s, h * dh))


def mha_forward(mha: MultiHeadAttention, q: Tensor, k: Tensor, v: Tensor,
                return_weights: bool = False):
    """Unmasked scaled dot-product attention over ``num_heads`` heads.

    Inputs are (..., S, D); ``k`` and ``v`` share their sequence length.
    """
    D = mha.W_q.shape[0]
    h = mha.num_heads
    if D % h:
        raise DimensionError(f"D={D} not divisible by {h} heads")
    if q.shape[-1] != D or k.shape[-1] != D or v.shape[-1] != D:
        raise DimensionError(f"attention inputs must have width {D}")
    if k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"key/value shapes differ: {k.shape} vs {v.shape}")
    if q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"query/key batch dims differ: {q.shape} vs {k.shape}")

    qh = _split_heads(T.matmul(q, mha.W_q), h)
    kh = _split_heads(T.matmul(k, mha.W_k), h)
    vh = _split_heads(T.matmul(v, mha.W_v), h)
    scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(D // h))
    weights = T.softmax(scores)
    out = T.matmul(_merge_heads(T.matmul(weights, vh)), mha.W_o)
    return (out, weights) if return_weights else out


def mlp_forward(mlp: MlpBlock, x: Tensor) -> Tensor:
    if mlp.activation != "relu":
        raise ConfigError(f"unsupported activation {mlp.activation!r}")
    return linear_forward(mlp.fc2, T.relu(linear_forward(mlp.fc1, x)))


# ---------------------------------------------------------------------------
# initialisation


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name with its shape for ``cfg``."""
    D, C, c2 = cfg.d_model, cfg.channels, 2 * cfg.block_channels
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = 3
    for i in range(BACKBONE_STAGES):
        shapes[f"backbone.stage{i}.weight"] = (c2, in_ch, 3, 3)
        in_ch = c2

    def linear(prefix, d_out, d_in):
        shapes[f"{prefix}.weight"] = (d_out, d_in)
        shapes[f"{prefix}.bias"] = (d_out,)

    def ln(prefix):
        shapes[f"{prefix}.gamma"] = (D,)
        shapes[f"{prefix}.beta"] = (D,)

    def attn(prefix):
        for w in ("W_q", "W_k", "W_v", "W_o"):
            shapes[f"{prefix}.{w}"] = (D, D)

    def mlp(prefix):
        linear(f"{prefix}.fc1", cfg.d_mlp, D)
        linear(f"{prefix}.fc2", D, cfg.d_mlp)

    for s in cfg.scales:
        p = scale_key(s)
        for stream in ("encoder", "decoder"):
            shapes[f"{p}.{stream}.embed.reduce"] = (D, C, 1, 1)
            shapes[f"{p}.{stream}.embed.quality"] = (1, D)
            shapes[f"{p}.{stream}.embed.pos"] = (cfg.n_tokens, D)
        for i in range(cfg.n_layers):
            e = f"{p}.encoder.layer{i}"
            attn(f"{e}.mha")
            ln(f"{e}.ln1")
            mlp(f"{e}.mlp")
            ln(f"{e}.ln2")
            d = f"{p}.decoder.layer{i}"
            attn(f"{d}.self_mha")
            ln(f"{d}.ln1")
            attn(f"{d}.cross_mha")
            ln(f"{d}.ln2")
            mlp(f"{d}.mlp")
            ln(f"{d}.ln3")
        linear(f"{p}.head.fc1", cfg.hidden, D)
        linear(f"{p}.head.fc2", 1, cfg.hidden)
    assert N_BLOCKS == 2 * BACKBONE_STAGES
    return shapes


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Philox stream keyed by (seed, crc32(name)); independent of creation order."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(ss))


def glorot_bound(shape: tuple[int, ...]) -> float:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


EMBED_STD = 0.02


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Initialise every parameter as a pure function of ``(cfg, seed)``.

    Matrices and kernels: Uniform(+-sqrt(6/(fan_in+fan_out))).  Biases and
    LayerNorm shifts: 0.  LayerNorm scales: 1.  Quality and positional
    embeddings: Normal(0, 0.02).
    """
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            arr = np.zeros(shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("quality", "pos"):
            arr = param_rng(seed, name).normal(0.0, EMBED_STD, size=shape)
        else:
            b = glorot_bound(shape)
            arr = param_rng(seed, name).uniform(-b, b, size=shape)
        params[name] = Tensor(arr.astype(dtype))
    return ParamStore(params, cfg, seed)
