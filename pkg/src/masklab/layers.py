"""Network layers built on the autodiff Tensor.

Every layer owns its parameters as Tensors, checks its input shape, and
reports errors under its own name. Initialization follows Xavier-uniform
for dense/conv/attention weights and uniform(-1/sqrt(H), 1/sqrt(H)) for
GRU recurrent weights; all randomness comes from an explicit Generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base for parameterized blocks; walks attributes to collect params."""

    name: str = "module"

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr, value in vars(self).items():
            key = f"{prefix}{attr}" if not prefix else f"{prefix}.{attr}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_params(key))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{key}.{i}"))
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


class Dense(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, name: str = "dense"):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        self.weight = Tensor(xavier_uniform(rng, (d_in, d_out), d_in, d_out, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.name}: expected last dim {self.d_in}, got {x.shape}")
        if x.ndim > 2:
            # one large gemm instead of a stack of small ones
            flat = ad.reshape(x, (-1, self.d_in))
            y = ad.add(ad.matmul(flat, self.weight), self.bias)
            return ad.reshape(y, (*x.shape[:-1], self.d_out))
        return ad.add(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, name: str = "layer_norm"):
        self.name = name
        self.dim = dim
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected last dim {self.dim}, got {x.shape}")
        return ad.layer_norm(x, self.gamma, self.beta)


class PReLU(Module):
    def __init__(self, dim: int, dtype=np.float64, init: float = 0.25, name: str = "prelu"):
        self.name = name
        self.dim = dim
        self.slope = Tensor(np.full(dim, init, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected last dim {self.dim}, got {x.shape}")
        return ad.prelu(x, self.slope)


class Sigmoid(Module):
    def __init__(self, name: str = "sigmoid"):
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        return ad.sigmoid(x)


class Conv1d(Module):
    """1-D convolution with dilation over the second-to-last axis.

    Input (..., L, C_in) -> output (..., L, C_out); zero padding keeps the
    length (odd kernels only).
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        dilation: int = 1,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
        name: str = "conv1d",
    ):
        if kernel % 2 != 1:
            raise DataError(f"{name}: kernel must be odd, got {kernel}")
        if kernel < 1 or dilation < 1 or c_in < 1 or c_out < 1:
            raise DataError(f"{name}: hyperparameters must be positive")
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.dilation = kernel, dilation
        rng = rng or np.random.default_rng(0)
        fan_in, fan_out = kernel * c_in, kernel * c_out
        self.weight = Tensor(
            xavier_uniform(rng, (kernel, c_in, c_out), fan_in, fan_out, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"{self.name}: expected {self.c_in} input channels, got {x.shape}")
        return ad.conv1d_same(x, self.weight, self.bias, self.dilation)


class GRU(Module):
    """Unidirectional GRU over (N, L, D_in) -> (N, L, H), h0 = 0."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64, name: str = "gru"):
        self.name = name
        self.d_in, self.hidden = d_in, hidden
        self.w_in = Tensor(xavier_uniform(rng, (d_in, 3 * hidden), d_in, 3 * hidden, dtype), requires_grad=True)
        self.b_in = Tensor(np.zeros(3 * hidden, dtype=dtype), requires_grad=True)
        bound = 1.0 / np.sqrt(hidden)
        self.w_rec = Tensor(rng.uniform(-bound, bound, size=(hidden, 3 * hidden)).astype(dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.name}: expected (N, L, {self.d_in}), got {x.shape}")
        xg = ad.add(ad.matmul(x, self.w_in), self.b_in)
        return ad.gru_recurrence(xg, self.w_rec)


class MultiHeadAttention(Module):
    """Self-attention over (N, L, D); heads must divide D.

    Q, K, V come from one fused projection; heads are folded into the
    batch axis for the attention core.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64, name: str = "mha"):
        if dim % heads != 0:
            raise DataError(f"{name}: heads {heads} must divide width {dim}")
        self.name = name
        self.dim, self.heads = dim, heads
        self.w_qkv = Dense(dim, 3 * dim, rng, dtype, name=f"{name}.w_qkv")
        self.w_o = Dense(dim, dim, rng, dtype, name=f"{name}.w_o")

    def forward(self, x: Tensor, return_weights: bool = False):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected (N, L, {self.dim}), got {x.shape}")
        n, length, _ = x.shape
        dh = self.dim // self.heads
        qkv = self.w_qkv.forward(x)  # (N, L, 3D)
        # -> (N, L, 3, heads, dh) -> (3, N, heads, L, dh) -> (3, N*heads, L, dh)
        qkv = ad.reshape(qkv, (n, length, 3, self.heads, dh))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))
        qkv = ad.reshape(qkv, (3, n * self.heads, length, dh))
        q = ad.reshape(ad.slice_axis(qkv, 0, 0, 1), (n * self.heads, length, dh))
        k = ad.reshape(ad.slice_axis(qkv, 0, 1, 2), (n * self.heads, length, dh))
        v = ad.reshape(ad.slice_axis(qkv, 0, 2, 3), (n * self.heads, length, dh))
        att = ad.attention_core(q, k, v)
        weights = att.attn_weights
        merged = ad.reshape(att, (n, self.heads, length, dh))
        merged = ad.transpose(merged, (0, 2, 1, 3))
        merged = ad.reshape(merged, (n, length, self.dim))
        out = self.w_o.forward(merged)
        if return_weights:
            return out, weights.reshape(n, self.heads, length, length)
        return out


class PositionalEncoding(Module):
    """Embedding-free sinusoidal position codes added to the input."""

    def __init__(self, dim: int, dtype=np.float64, name: str = "pos_enc"):
        self.name = name
        self.dim = dim
        self._dtype = dtype
        self._cache: dict[int, np.ndarray] = {}

    def table(self, length: int) -> np.ndarray:
        if length not in self._cache:
            pos = np.arange(length, dtype=np.float64)[:, None]
            i = np.arange(self.dim, dtype=np.float64)[None, :]
            angles = pos / np.power(10000.0, 2.0 * (i // 2) / self.dim)
            table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
            self._cache[length] = table.astype(self._dtype)
        return self._cache[length]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected last dim {self.dim}, got {x.shape}")
        return ad.add(x, Tensor(self.table(x.shape[-2])))


class Sequential(Module):
    def __init__(self, modules: list[Module], name: str = "sequential"):
        self.name = name
        self.steps = list(modules)

    def forward(self, x: Tensor) -> Tensor:
        for step in self.steps:
            x = step.forward(x)
        return x


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; `make_layer` turns it into a Module."""

    kind: str
    hyperparams: dict[str, Any] = field(default_factory=dict)

    _KINDS = (
        "dense",
        "conv1d",
        "gru_cell",
        "multi_head_attention",
        "layer_norm",
        "prelu",
        "sigmoid",
        "positional_encoding",
    )

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise DataError(f"unknown layer kind {self.kind!r}; known: {self._KINDS}")
        for key, value in self.hyperparams.items():
            if isinstance(value, (int, float)) and value <= 0:
                raise DataError(f"layer {self.kind}: hyperparameter {key} must be positive, got {value}")
        if self.kind == "multi_head_attention":
            width = self.hyperparams.get("dim", 0)
            heads = self.hyperparams.get("heads", 1)
            if width % heads != 0:
                raise DataError(f"multi_head_attention: heads {heads} must divide width {width}")


def make_layer(spec: LayerSpec, rng: np.random.Generator, dtype=np.float64) -> Module:
    hp = spec.hyperparams
    if spec.kind == "dense":
        return Dense(hp["d_in"], hp["d_out"], rng, dtype)
    if spec.kind == "conv1d":
        return Conv1d(hp["c_in"], hp["c_out"], hp.get("kernel", 3), hp.get("dilation", 1), rng, dtype)
    if spec.kind == "gru_cell":
        return GRU(hp["d_in"], hp["hidden"], rng, dtype)
    if spec.kind == "multi_head_attention":
        return MultiHeadAttention(hp["dim"], hp.get("heads", 2), rng, dtype)
    if spec.kind == "layer_norm":
        return LayerNorm(hp["dim"], dtype)
    if spec.kind == "prelu":
        return PReLU(hp["dim"], dtype)
    if spec.kind == "sigmoid":
        return Sigmoid()
    if spec.kind == "positional_encoding":
        return PositionalEncoding(hp["dim"], dtype)
    raise DataError(f"unknown layer kind {spec.kind!r}")


def forward(graph: list[LayerSpec] | Sequential, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
    """Run a composed layer stack on an input tensor."""
    if isinstance(graph, Sequential):
        return graph.forward(x)
    rng = rng or np.random.default_rng(0)
    return Sequential([make_layer(s, rng, x.dtype) for s in graph]).forward(x)
