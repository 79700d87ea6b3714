"""Encoder backbones mapping (B, L, m) windows to (B, L, d) representations.

All three encoders start with a linear embedding of the input features.
The TCN and LSTM keep a narrow internal width and widen to ``hidden_dim`` in
their last layer; this is what keeps the default 320-dim representations
inside the published parameter budgets (~637K TCN, ~660K LSTM).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidSpec, ShapeMismatch

ENCODER_KINDS = ("LSTM", "TCN", "Transformer")
ATTENTION_KINDS = ("full", "probsparse")


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "TCN"
    input_dim: int = 7
    hidden_dim: int = 320
    num_layers: int = 10
    width: int = 64
    kernel_size: int = 3
    num_heads: int = 8
    ff_dim: int = 256
    attention: str = "probsparse"
    sparsity_factor: float = 5.0
    dropout: float = 0.0

    @classmethod
    def default(cls, kind: str, input_dim: int = 7, **overrides) -> "EncoderSpec":
        base = {
            "LSTM": dict(hidden_dim=320, num_layers=5, width=70),
            "TCN": dict(hidden_dim=320, num_layers=10, width=64, kernel_size=3),
            "Transformer": dict(hidden_dim=128, num_layers=5, width=128, num_heads=8, ff_dim=256),
        }
        if kind not in base:
            raise InvalidSpec(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")
        fields = dict(base[kind], kind=kind, input_dim=input_dim)
        fields.update(overrides)
        return cls(**fields)

    def validate(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise InvalidSpec(f"unknown encoder kind {self.kind!r}")
        for name in ("input_dim", "hidden_dim", "num_layers", "width"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kind == "TCN" and self.kernel_size < 1:
            raise InvalidSpec("kernel_size must be >= 1")
        if self.kind == "Transformer":
            if self.hidden_dim % self.num_heads:
                raise InvalidSpec(
                    f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
            if self.attention not in ATTENTION_KINDS:
                raise InvalidSpec(f"attention must be one of {ATTENTION_KINDS}")
            if self.sparsity_factor <= 0:
                raise InvalidSpec("sparsity_factor must be > 0")
            if self.ff_dim < 1:
                raise InvalidSpec("ff_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidSpec("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Encoder(nn.Module):
    """Common surface: ``forward(x, keep=None)`` with an optional (B, L) keep-mask
    applied to the embedded sequence (latent timestamp masking)."""

    spec: EncoderSpec

    def embed(self, x, keep):
        if x.shape[-1] != self.spec.input_dim:
            raise ShapeMismatch(
                f"expected {self.spec.input_dim} input features, got {x.shape[-1]}")
        h = self.embedding(x)
        if keep is not None:
            h = h * keep.unsqueeze(-1).to(h.dtype)
        return h


# --------------------------------------------------------------------- TCN
class CausalConv1d(nn.Conv1d):
    def __init__(self, in_channels, out_channels, kernel_size, dilation=1):
        super().__init__(in_channels, out_channels, kernel_size, dilation=dilation)
        self.left_pad = (kernel_size - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left_pad, 0)))


class ConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, dilation, dropout=0.0):
        super().__init__()
        self.conv1 = CausalConv1d(in_channels, out_channels, kernel_size, dilation)
        self.conv2 = CausalConv1d(out_channels, out_channels, kernel_size, dilation)
        self.projector = nn.Conv1d(in_channels, out_channels, 1) if in_channels != out_channels else None
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        residual = x if self.projector is None else self.projector(x)
        x = self.conv1(F.gelu(x))
        x = self.conv2(self.dropout(F.gelu(x)))
        return x + residual


class TCNEncoder(Encoder):
    """Causal dilated convolutions; block i uses dilation 2**i and the final
    block widens ``width`` channels to ``hidden_dim``."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.embedding = nn.Linear(spec.input_dim, spec.width)
        channels = [spec.width] * spec.num_layers + [spec.hidden_dim]
        blocks, in_ch = [], spec.width
        for i, out_ch in enumerate(channels):
            blocks.append(ConvBlock(in_ch, out_ch, spec.kernel_size, 2 ** i, spec.dropout))
            in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x, keep=None):
        h = self.embed(x, keep).transpose(1, 2)
        return self.blocks(h).transpose(1, 2)

    def dilations(self) -> list[int]:
        return [blk.conv1.dilation[0] for blk in self.blocks]


def tcn_receptive_field(spec: EncoderSpec) -> int:
    """Number of input steps that can influence one output step."""
    dilations = [2 ** i for i in range(spec.num_layers + 1)]
    return 1 + sum((spec.kernel_size - 1) * d * 2 for d in dilations)


# -------------------------------------------------------------------- LSTM
class LSTMEncoder(Encoder):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.embedding = nn.Linear(spec.input_dim, spec.width)
        self.body = (nn.LSTM(spec.width, spec.width, spec.num_layers - 1, batch_first=True,
                             dropout=spec.dropout if spec.num_layers > 2 else 0.0)
                     if spec.num_layers > 1 else None)
        self.head = nn.LSTM(spec.width, spec.hidden_dim, 1, batch_first=True)

    def forward(self, x, keep=None):
        h = self.embed(x, keep)
        if self.body is not None:
            h, _ = self.body(h)
        h, _ = self.head(h)
        return h


# ------------------------------------------------------------- Transformer
def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=device)
                    * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64, device=device)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table.to(dtype)


def full_attention(q, k, v):
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


def num_active_queries(length: int, factor: float) -> int:
    return min(length, int(math.ceil(factor * math.log(length)))) if length > 1 else 0


def probsparse_attention(q, k, v, factor: float = 5.0):
    """ProbSparse self-attention on (B, H, L, E) tensors.

    Only the u = ceil(factor * ln L) queries with the largest max-minus-mean
    score spread attend; the remaining positions output the temporal mean of V.
    The spread is computed over all keys, so the selection is deterministic.
    """
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise ShapeMismatch(f"q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    if factor <= 0:
        raise ValueError("factor must be > 0")
    B, H, L, _ = q.shape
    out = v.mean(dim=-2, keepdim=True).expand(B, H, L, v.shape[-1]).clone()
    u = num_active_queries(L, factor)
    if u == 0:
        return out
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    spread = scores.max(dim=-1).values - scores.mean(dim=-1)
    top = spread.topk(u, dim=-1, sorted=False).indices  # (B, H, u)
    picked = scores.gather(2, top.unsqueeze(-1).expand(B, H, u, L))
    attended = torch.softmax(picked, dim=-1) @ v
    return out.scatter(2, top.unsqueeze(-1).expand(B, H, u, v.shape[-1]), attended)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, kind="probsparse", factor=5.0):
        super().__init__()
        self.heads, self.kind, self.factor = heads, kind, factor
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, D = x.shape

        def split_heads(t):
            return t.view(B, L, self.heads, D // self.heads).transpose(1, 2)

        q, k, v = split_heads(self.query(x)), split_heads(self.key(x)), split_heads(self.value(x))
        if self.kind == "full":
            ctx = full_attention(q, k, v)
        else:
            ctx = probsparse_attention(q, k, v, self.factor)
        return self.out(ctx.transpose(1, 2).reshape(B, L, D))


class InformerLayer(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        d = spec.hidden_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, spec.num_heads, spec.attention, spec.sparsity_factor)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, spec.ff_dim), nn.GELU(), nn.Dropout(spec.dropout),
                                nn.Linear(spec.ff_dim, d))
        self.dropout = nn.Dropout(spec.dropout)

    def forward(self, x):
        x = x + self.dropout(self.attn(self.norm1(x)))
        return x + self.dropout(self.ff(self.norm2(x)))


class TransformerEncoder(Encoder):
    """Informer-style encoder stack without distilling, so length is preserved."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.embedding = nn.Linear(spec.input_dim, spec.hidden_dim)
        self.layers = nn.ModuleList(InformerLayer(spec) for _ in range(spec.num_layers))
        self.norm = nn.LayerNorm(spec.hidden_dim)

    def forward(self, x, keep=None):
        h = self.embed(x, keep)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype, h.device)
        for layer in self.layers:
            h = layer(h)
        return self.norm(h)


_ENCODERS = {"LSTM": LSTMEncoder, "TCN": TCNEncoder, "Transformer": TransformerEncoder}


def build_encoder(spec: EncoderSpec, seed: int = 0) -> Encoder:
    """Construct an encoder with parameters drawn deterministically from ``seed``.

    PyTorch's default initializers (uniform, scaled by fan-in) are used; the
    global RNG state is left untouched.
    """
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _ENCODERS[spec.kind](spec)


def encode(encoder: Encoder, inputs: torch.Tensor, keep=None) -> torch.Tensor:
    if inputs.dim() != 3:
        raise ShapeMismatch(f"expected (B, L, m) input, got shape {tuple(inputs.shape)}")
    return encoder(inputs, keep)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
