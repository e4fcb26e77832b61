"""Small dense-tensor layer kit on top of torch.

Provides the building blocks used by the tracker (MLPs, multi-head attention,
sinusoidal encoders), a named parameter store with a portable checkpoint format,
reverse-mode gradients with non-finite detection, and a central-difference
gradient checker.
"""

from __future__ import annotations

import math
import struct
import zlib
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_MAGIC = b"LSFCKPT\0"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1}
_TAG_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": F.relu,
    "gelu": F.gelu,
    "linear": lambda x: x,
}


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


class MLP(nn.Module):
    """Stack of affine layers with an activation between them.

    ``widths`` lists every layer width including the input, e.g. ``[4, 32, 64]``.
    The final layer is left linear unless ``final_activation`` is set.
    """

    def __init__(self, widths: Sequence[int], activation: str = "relu", final_activation: bool = False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.final_activation = final_activation
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dense_block(x, self.layers, self.activation, self.final_activation)


def dense_block(
    x: torch.Tensor,
    layers: Sequence[nn.Linear],
    activation: str = "relu",
    final_activation: bool = False,
) -> torch.Tensor:
    """Apply affine layers in sequence, activating all but (optionally) the last."""
    if x.shape[-1] != layers[0].in_features:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer width {layers[0].in_features}")
    act = ACTIVATIONS[activation]
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1 or final_activation:
            x = act(x)
    return x


class MultiHeadAttention(nn.Module):
    """Scaled dot-product self-attention over the second-to-last axis."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return multi_head_attention(tokens, self.heads, self.qkv, self.proj)


def multi_head_attention(
    tokens: torch.Tensor, heads: int, qkv: nn.Linear, proj: nn.Linear
) -> torch.Tensor:
    """Self-attention on tokens shaped (..., L, D)."""
    *batch, length, dim = tokens.shape
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    hd = dim // heads
    q, k, v = qkv(tokens).reshape(*batch, length, 3, heads, hd).unbind(-3)
    q, k, v = (t.transpose(-3, -2) for t in (q, k, v))  # (..., H, L, hd)
    # softmax(q k^T / sqrt(hd)) v; the fused kernel avoids storing the score matrix for backward
    out = F.scaled_dot_product_attention(q, k, v)
    return proj(out.transpose(-3, -2).reshape(*batch, length, dim))


def sinusoidal_frequencies(n_freq: int, dtype=torch.float32) -> torch.Tensor:
    if n_freq == 1:
        return torch.ones(1, dtype=dtype)
    expo = torch.arange(n_freq, dtype=torch.float64) / (n_freq - 1)
    return (10000.0 ** -expo).to(dtype)


def sinusoidal_encode(values: torch.Tensor, out_dim: int) -> torch.Tensor:
    """Encode every scalar as interleaved [sin(v w_i), cos(v w_i)] pairs.

    Frequencies w_i run geometrically from 1 down to 1/10000. Output shape is
    ``(..., V * out_dim)`` for input ``(..., V)``.
    """
    if out_dim <= 0 or out_dim % 2:
        raise ValueError(f"out_dim must be a positive even number, got {out_dim}")
    freqs = sinusoidal_frequencies(out_dim // 2, values.dtype).to(values.device)
    angles = values[..., None] * freqs  # (..., V, F)
    enc = torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1)  # (..., V, F, 2)
    return enc.reshape(*values.shape[:-1], values.shape[-1] * out_dim)


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class InitRecord:
    seed: int
    scheme: str


def _param_seed(base_seed: int, name: str) -> int:
    return (base_seed * 1_000_003 + zlib.crc32(name.encode())) % (2**63)


class ParamStore:
    """Named view over a module's parameters with stable (registration) order."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.init_records: dict[str, InitRecord] = {}

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self.names())

    def __getitem__(self, name: str) -> torch.Tensor:
        return dict(self.module.named_parameters())[name]

    def names(self) -> list[str]:
        return [n for n, _ in self.module.named_parameters()]

    def items(self) -> list[tuple[str, torch.Tensor]]:
        return list(self.module.named_parameters())

    def slice(self, prefix: str) -> OrderedDict[str, torch.Tensor]:
        return OrderedDict((n, p) for n, p in self.items() if n.startswith(prefix))

    def numel(self) -> int:
        return sum(p.numel() for _, p in self.items())

    def initialize(self, seed: int, zero: Sequence[str] = (), random_bias: bool = False) -> None:
        """Uniform fan-in init for weights, zeros for biases and for names in ``zero``.

        Norm-layer gains start at one. Each tensor draws from its own generator
        seeded from ``seed`` and the parameter name, so adding a parameter never
        shifts the others. ``random_bias`` draws biases like weights instead,
        which moves ReLU units off their kinks for finite-difference probing.
        """
        with torch.no_grad():
            for name, p in self.items():
                s = _param_seed(seed, name)
                if any(name.startswith(z) for z in zero):
                    p.zero_()
                    scheme = "zeros"
                elif ".norm" in name or name.startswith("norm"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                    scheme = "ones" if name.endswith("weight") else "zeros"
                elif name.endswith("bias") and not random_bias:
                    p.zero_()
                    scheme = "zeros"
                else:
                    bound = 1.0 / math.sqrt(p.shape[-1]) if p.dim() > 1 else 0.1
                    g = torch.Generator().manual_seed(s)
                    vals = torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1
                    p.copy_((vals * bound).to(p.dtype))
                    scheme = "uniform_fan_in"
                self.init_records[name] = InitRecord(seed=s, scheme=scheme)

    def state(self) -> OrderedDict[str, torch.Tensor]:
        return OrderedDict((n, p.detach().clone()) for n, p in self.items())

    def load_state(self, state: dict[str, torch.Tensor]) -> None:
        own = dict(self.items())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        with torch.no_grad():
            for name, p in own.items():
                src = state[name]
                if tuple(src.shape) != tuple(p.shape):
                    raise CheckpointError(f"{name}: shape {tuple(src.shape)} != {tuple(p.shape)}")
                p.copy_(src.to(p.dtype))

    def save(self, path) -> None:
        save_checkpoint(path, self.state())

    def load(self, path) -> None:
        self.load_state(load_checkpoint(path))


def save_checkpoint(path, tensors: dict[str, torch.Tensor]) -> None:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<HI", CHECKPOINT_VERSION, len(tensors))
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        tag = _DTYPE_TAGS[t.dtype]
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", tag, t.dim())
        out += struct.pack(f"<{t.dim()}Q", *t.shape)
        out += t.numpy().astype(_TAG_DTYPES[tag][1], copy=False).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> OrderedDict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} at byte {pos - 2}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype, np_dtype = _TAG_DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * np.dtype(np_dtype).itemsize), dtype=np_dtype).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy()).to(dtype)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after byte {pos}")
    return tensors


# ----------------------------------------------------------------- gradients


@contextmanager
def nonfinite_guard(module: nn.Module):
    """Raise NumericError naming the first submodule whose output is NaN/Inf."""

    def hook(mod, _inp, out):
        tensors = out if isinstance(out, (tuple, list)) else (out,)
        for t in tensors:
            if isinstance(t, torch.Tensor) and t.is_floating_point() and not torch.isfinite(t).all():
                raise NumericError(f"non-finite output from {names[id(mod)] or type(mod).__name__}")

    names = {id(m): n for n, m in module.named_modules()}
    handles = [m.register_forward_hook(hook) for m in module.modules()]
    try:
        yield
    finally:
        for h in handles:
            h.remove()


def gradient(loss_fn: Callable[[ParamStore], torch.Tensor], params: ParamStore) -> OrderedDict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar loss with respect to every parameter.

    Parameters the loss does not touch get an explicit zero tensor.
    """
    with nonfinite_guard(params.module):
        loss = loss_fn(params)
    if loss.dim() != 0:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NumericError(f"loss is {loss.item()}")
    items = params.items()
    grads = torch.autograd.grad(loss, [p for _, p in items], allow_unused=True)
    return OrderedDict(
        (n, torch.zeros_like(p) if g is None else g.detach()) for (n, p), g in zip(items, grads)
    )


@dataclass
class GradReport:
    per_param: dict[str, float] = field(default_factory=dict)
    probes: dict[str, int] = field(default_factory=dict)

    @property
    def overall_max(self) -> float:
        return max(self.per_param.values(), default=0.0)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    params: ParamStore,
    h: float = 1e-5,
    cap: int = 2000,
    seed: int = 0,
) -> GradReport:
    """Compare analytic gradients with central differences, parameter by parameter.

    Above ``cap`` scalars in total a seeded subset is probed; every parameter
    gets at least one probe.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    items = params.items()
    if any(p.dtype != torch.float64 for _, p in items):
        raise ValueError("grad_check requires float64 parameters")
    analytic = gradient(loss_fn, params)
    total = sum(p.numel() for _, p in items)
    rng = np.random.default_rng(seed)
    report = GradReport()
    for name, p in items:
        n = p.numel()
        if total <= cap:
            picks = np.arange(n)
        else:
            quota = max(1, int(round(cap * n / total)))
            picks = np.sort(rng.choice(n, size=min(n, quota), replace=False))
        flat = p.data.view(-1)
        worst = 0.0
        with torch.no_grad():
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn(params).item()
                flat[i] = orig - h
                down = loss_fn(params).item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                worst = max(worst, relative_error(analytic[name].view(-1)[i].item(), numeric))
        report.per_param[name] = worst
        report.probes[name] = len(picks)
    return report
