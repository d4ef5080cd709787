"""Noise-prediction network.

Per frame, joint rotations go through a stack of kinematic-tree message
passing layers and expression coefficients through token-augmented MLP
layers; both streams are gated by the text and timestep condition after
every layer. Pooled per-frame features are decoded across frames by an
LSTM (or one of the ablation decoders) and projected back to the state.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .kinematics import KinematicTree
from .params import StateLayout

DECODERS = ("recurrent", "attention", "frame-positional", "none")
ENCODERS = ("gnn", "mlp")
TEXT_MODES = ("fixed", "wordbag")


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512)
    embed_width: int = 32
    hidden: int = 512
    decoder_layers: int = 4
    text_dim: int = 768
    time_dim: int = 128
    decoder: str = "recurrent"
    encoder: str = "gnn"
    tokens: bool = True
    text: str = "fixed"
    wordbag_buckets: int = 2048
    wordbag_dim: int = 256
    attention_heads: int = 4
    attention_ff: int = 2048
    frame_skip: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}")
        if self.text not in TEXT_MODES:
            raise ValueError(f"text must be one of {TEXT_MODES}")
        if not self.widths:
            raise ValueError("need at least one encoder layer")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small widths that train in minutes on one CPU core."""
        base = dict(widths=(16, 16, 32, 32), embed_width=16, hidden=128)
        base.update(overrides)
        return cls(**base)

    @property
    def text_input_dim(self) -> int:
        return self.wordbag_buckets if self.text == "wordbag" else self.text_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = positions.double().unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class GNNLayer(nn.Module):
    """``f'_i = act(sum_{j in N(i)} g_ij(f_j - f_i) + P_i)`` with one linear kernel per directed edge."""

    def __init__(
        self,
        src,
        dst,
        n_nodes: int,
        c_in: int,
        c_out: int,
        tokens: bool = True,
        shared_kernels: bool = False,
        activation: nn.Module | None = None,
    ):
        super().__init__()
        self.register_buffer("src", torch.as_tensor(np.asarray(src), dtype=torch.long))
        self.register_buffer("dst", torch.as_tensor(np.asarray(dst), dtype=torch.long))
        self.n_nodes = n_nodes
        self.c_in = c_in
        n_kernels = 1 if shared_kernels else len(self.src)
        self.kernels = nn.Parameter(torch.randn(n_kernels, c_in, c_out) / math.sqrt(c_in))
        if tokens:
            self.tokens = nn.Parameter(0.1 * torch.randn(n_nodes, c_out))
        else:
            self.register_buffer("tokens", torch.zeros(n_nodes, c_out))
        self.act = activation if activation is not None else nn.Identity()

    @classmethod
    def from_tree(cls, tree: KinematicTree, c_in: int, c_out: int, **kw) -> "GNNLayer":
        src, dst = tree.edges
        return cls(src, dst, tree.joint_count, c_in, c_out, **kw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.c_in or x.shape[-2] != self.n_nodes:
            raise ValueError(f"expected (..., {self.n_nodes}, {self.c_in}) features, got {tuple(x.shape)}")
        diff = x[..., self.src, :] - x[..., self.dst, :]
        msg = torch.einsum("...ec,eco->...eo", diff, self.kernels.expand(len(self.src), -1, -1))
        agg = torch.zeros(x.shape[:-1] + (msg.shape[-1],), dtype=msg.dtype, device=msg.device)
        agg = agg.index_add(-2, self.dst, msg)
        return self.act(agg + self.tokens.to(msg.dtype))


class TokenMLPLayer(nn.Module):
    """``g'_i = act(MLP(g_i + E_i))`` with one MLP shared by all items."""

    def __init__(
        self,
        n_items: int,
        c_in: int,
        c_out: int,
        tokens: bool = True,
        mlp: nn.Module | None = None,
        activation: nn.Module | None = None,
    ):
        super().__init__()
        self.n_items = n_items
        self.c_in = c_in
        if tokens:
            self.tokens = nn.Parameter(0.1 * torch.randn(n_items, c_in))
        else:
            self.register_buffer("tokens", torch.zeros(n_items, c_in))
        self.mlp = mlp if mlp is not None else nn.Sequential(nn.Linear(c_in, c_out), nn.SiLU(), nn.Linear(c_out, c_out))
        self.act = activation if activation is not None else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.c_in or x.shape[-2] != self.n_items:
            raise ValueError(f"expected (..., {self.n_items}, {self.c_in}) features, got {tuple(x.shape)}")
        return self.act(self.mlp(x + self.tokens.to(x.dtype)))


ExpressionLayer = TokenMLPLayer


class FeatureGate(nn.Module):
    """``h * sigmoid(G c) + B c`` with ``c`` the concatenated text and timestep condition."""

    def __init__(self, cond_dim: int, width: int):
        super().__init__()
        self.gate = nn.Linear(cond_dim, width)
        self.shift = nn.Linear(cond_dim, width)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(cond))
        b = self.shift(cond)
        extra = h.dim() - g.dim()
        shape = g.shape[:-1] + (1,) * extra + g.shape[-1:]
        return h * g.reshape(shape) + b.reshape(shape)


class ItemLinear(nn.Module):
    """Separate affine map per item (joint or expression coefficient)."""

    def __init__(self, n_items: int, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_items, c_in, c_out) / math.sqrt(c_in))
        self.bias = nn.Parameter(torch.zeros(n_items, c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.einsum("...nc,nco->...no", x, self.weight) + self.bias


class _RecurrentDecoder(nn.Module):
    def __init__(self, c_in, hidden, layers):
        super().__init__()
        self.lstm = nn.LSTM(c_in, hidden, num_layers=layers, batch_first=True)

    def forward(self, x, mask):
        out, _ = self.lstm(x)
        return out


class _AttentionDecoder(nn.Module):
    def __init__(self, c_in, hidden, layers, heads, ff):
        super().__init__()
        self.proj = nn.Linear(c_in, hidden)
        layer = nn.TransformerEncoderLayer(hidden, heads, ff, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.hidden = hidden

    def forward(self, x, mask):
        h = self.proj(x)
        pe = sinusoidal_embedding(torch.arange(x.shape[1]), self.hidden).to(h.dtype)
        pad = None if mask is None else ~mask
        return self.encoder(h + pe, src_key_padding_mask=pad)


class _FrameDecoder(nn.Module):
    """Per-frame MLP with no temporal mixing, optionally given the frame index."""

    def __init__(self, c_in, hidden, layers, positional: bool):
        super().__init__()
        self.proj = nn.Linear(c_in, hidden)
        self.layers = nn.Sequential(*[m for _ in range(layers) for m in (nn.SiLU(), nn.Linear(hidden, hidden))])
        self.positional = positional
        self.hidden = hidden

    def forward(self, x, mask):
        h = self.proj(x)
        if self.positional:
            h = h + sinusoidal_embedding(torch.arange(x.shape[1]), self.hidden).to(h.dtype)
        return self.layers(h)


class SignDenoiser(nn.Module):
    """Predicts the added noise for a ``B x F x D`` noisy state sequence."""

    def __init__(self, tree: KinematicTree, layout: StateLayout, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.layout = layout
        if layout.n_joints != tree.joint_count:
            raise ValueError("layout and tree disagree on the joint count")
        order = np.asarray(tree.state_joint_order)
        self.register_buffer("to_tree", torch.as_tensor(np.argsort(order), dtype=torch.long))
        J, E = tree.joint_count, layout.n_expression
        C0 = cfg.embed_width

        if cfg.tokens:
            self.pose_embed = ItemLinear(J, 3, C0)
            self.expr_embed = ItemLinear(E, 1, C0)
        else:
            self.pose_embed = nn.Linear(3, C0)
            self.expr_embed = nn.Linear(1, C0)

        if cfg.text == "wordbag":
            self.text_proj = nn.Linear(cfg.wordbag_buckets, cfg.wordbag_dim, bias=False)
            text_out = cfg.wordbag_dim
        else:
            self.text_proj = nn.Identity()
            text_out = cfg.text_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU())
        cond_dim = text_out + cfg.time_dim

        widths = (C0,) + cfg.widths
        self.pose_layers = nn.ModuleList()
        self.expr_layers = nn.ModuleList()
        self.pose_gates = nn.ModuleList()
        self.expr_gates = nn.ModuleList()
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            if cfg.encoder == "gnn":
                self.pose_layers.append(GNNLayer.from_tree(tree, c_in, c_out, tokens=cfg.tokens, activation=nn.SiLU()))
            else:
                self.pose_layers.append(TokenMLPLayer(J, c_in, c_out, tokens=cfg.tokens, activation=nn.SiLU()))
            self.expr_layers.append(TokenMLPLayer(E, c_in, c_out, tokens=cfg.tokens, activation=nn.SiLU()))
            self.pose_gates.append(FeatureGate(cond_dim, c_out))
            self.expr_gates.append(FeatureGate(cond_dim, c_out))

        pooled = (J + E) * widths[-1]
        H = cfg.hidden
        if cfg.decoder == "recurrent":
            self.decoder = _RecurrentDecoder(pooled, H, cfg.decoder_layers)
        elif cfg.decoder == "attention":
            self.decoder = _AttentionDecoder(pooled, H, cfg.decoder_layers, cfg.attention_heads, cfg.attention_ff)
        else:
            self.decoder = _FrameDecoder(pooled, H, cfg.decoder_layers, positional=cfg.decoder == "frame-positional")
        # per-frame bypass around the decoder; keeps early training from stalling on the recurrence
        self.skip = nn.Linear(pooled, H) if cfg.frame_skip else None
        self.head = nn.Sequential(nn.Linear(H, H), nn.SiLU(), nn.Linear(H, layout.dim))

    def condition(self, t: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(sinusoidal_embedding(t, self.config.time_dim).to(text.dtype))
        return torch.cat([self.text_proj(text), temb], dim=-1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, text: torch.Tensor, mask: torch.Tensor | None = None):
        if x.dim() != 3 or x.shape[-1] != self.layout.dim:
            raise ValueError(f"expected (B, F, {self.layout.dim}) states, got {tuple(x.shape)}")
        B, F, _ = x.shape
        t = torch.as_tensor(t).reshape(-1).expand(B)
        text = text.to(x.dtype).reshape(B, -1)
        if text.shape[-1] != self.config.text_input_dim:
            raise ValueError(f"text conditioning must have {self.config.text_input_dim} channels")
        cond = self.condition(t, text)

        lay = self.layout
        rot = x[..., : lay.pose_dim].reshape(B, F, lay.n_joints, 3)[:, :, self.to_tree]
        expr = x[..., lay.pose_dim :].reshape(B, F, lay.n_expression, 1)
        h = self.pose_embed(rot)
        e = self.expr_embed(expr)
        for layer, gate in zip(self.pose_layers, self.pose_gates):
            h = gate(layer(h), cond)
        for layer, gate in zip(self.expr_layers, self.expr_gates):
            e = gate(layer(e), cond)
        pooled = torch.cat([h.flatten(-2), e.flatten(-2)], dim=-1)
        out = self.decoder(pooled, mask)
        if self.skip is not None:
            out = out + self.skip(pooled)
        return self.head(out)


PARAM_GROUPS = {
    "embeddings": ("pose_embed", "expr_embed"),
    "kernels": ("pose_layers.", "expr_layers."),
    "tokens": ("tokens",),
    "gates": ("pose_gates", "expr_gates"),
    "condition": ("time_mlp", "text_proj"),
    "recurrence": ("decoder",),
    "head": ("head", "skip"),
}


def parameter_group(name: str) -> str:
    if name.endswith("tokens"):
        return "tokens"
    for group, prefixes in PARAM_GROUPS.items():
        if group != "tokens" and name.startswith(prefixes):
            return group
    return "other"


def parameter_summary(model: nn.Module) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        g = parameter_group(name)
        counts[g] = counts.get(g, 0) + p.numel()
    counts["total"] = sum(p.numel() for p in model.parameters())
    return counts
