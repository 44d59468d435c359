"""One transformer trunk with text embeddings and image patch codecs.

Text positions go through a token embedding, patch positions through either a
linear layer or a small U-Net. A single pre-norm trunk (RMSNorm, RoPE
attention, SwiGLU) processes the whole sequence, then the unembedding produces
logits everywhere and the codec decodes noise predictions at patch positions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seqcore import (DEFAULT_VOCAB, ImageSpan, MixedSequence, Vocabulary, build_attention_mask,
                      causal_only_mask)


@dataclass
class ModelConfig:
    layers: int = 4
    embed_dim: int = 128
    heads: int = 4
    vocab_size: int = DEFAULT_VOCAB.size
    patch_window: int = 2
    patch_channels: int = 3
    codec_kind: str = "linear"
    unet_channels: tuple[int, ...] = (32, 64)
    rope_base: float = 10000.0
    max_seq_len: int = 512

    def __post_init__(self):
        self.unet_channels = tuple(self.unet_channels)
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if (self.embed_dim // self.heads) % 2:
            raise ValueError("head dim must be even for rotary embeddings")
        if self.codec_kind not in ("linear", "unet"):
            raise ValueError(f"unknown codec {self.codec_kind!r}")
        if self.codec_kind == "unet" and len(self.unet_channels) != 2:
            raise ValueError("unet codec needs exactly two channel widths")

    @property
    def latent_patch_dim(self) -> int:
        return self.patch_window ** 2 * self.patch_channels

    @property
    def ffn_hidden(self) -> int:
        return swiglu_hidden(self.embed_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_channels"] = list(self.unet_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def swiglu_hidden(dim: int) -> int:
    return int(8 * round(8 * dim / 3 / 8))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope_tables(positions: torch.Tensor, head_dim: int, base: float):
    inv = 1.0 / base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = positions.to(torch.float64)[:, None] * inv[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive (even, odd) channel pairs of ``x`` (..., L, head_dim)."""
    cos, sin = cos.to(x.dtype), sin.to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.embed_dim // cfg.heads
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim, bias=False)
        self.out = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)

    def scores(self, x, cos, sin):
        b, n, _ = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        return q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), v

    def forward(self, x, mask, cos, sin):
        b, n, d = x.shape
        att, v = self.scores(x, cos, sin)
        att = att.masked_fill(~mask[:, None], float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.embed_dim)
        self.attn = Attention(cfg)
        self.ffn_norm = RMSNorm(cfg.embed_dim)
        self.ffn = SwiGLU(cfg.embed_dim, cfg.ffn_hidden)

    def forward(self, x, mask, cos, sin):
        x = x + self.attn(self.attn_norm(x), mask, cos, sin)
        return x + self.ffn(self.ffn_norm(x))


# ----------------------------------------------------------------------------
# Patch codecs


def _to_grid(patches: torch.Tensor, gh: int, gw: int, k: int, c: int) -> torch.Tensor:
    """(n, gh*gw, k*k*c) -> (n, c, gh*k, gw*k)."""
    n = patches.shape[0]
    x = patches.reshape(n, gh, gw, k, k, c).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(n, c, gh * k, gw * k)


def _from_grid(x: torch.Tensor, k: int) -> torch.Tensor:
    """(n, c, H, W) -> (n, (H/k)*(W/k), k*k*c)."""
    n, c, h, w = x.shape
    gh, gw = h // k, w // k
    x = x.reshape(n, c, gh, k, gw, k).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(n, gh * gw, k * k * c)


class LinearCodec(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_dim = cfg.latent_patch_dim
        self.inp = nn.Linear(self.patch_dim, cfg.embed_dim)
        self.outp = nn.Linear(cfg.embed_dim, self.patch_dim)

    def encode(self, patches, t, images):
        temb = timestep_embedding(t, self.patch_dim).to(patches.dtype)
        return self.inp(patches + temb), None

    def decode(self, h, skips, images):
        return self.outp(h)


class ChannelNorm(nn.Module):
    """Plain LayerNorm over the channel axis of an (n, c, h, w) map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class UNetCodec(nn.Module):
    """Two down blocks to one vector per k x k window, mirrored up blocks.

    Skip activations bypass the trunk and are added back on the way up.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, k = cfg.patch_channels, cfg.patch_window
        c1, c2 = cfg.unet_channels
        self.k, self.c, self.patch_dim = k, c, cfg.latent_patch_dim
        self.down1 = nn.Conv2d(c, c1, 3, padding=1)
        self.norm_d1 = ChannelNorm(c1)
        self.temb_d1 = nn.Linear(self.patch_dim, c1)
        self.down2 = nn.Conv2d(c1, c2, k, stride=k)
        self.norm_d2 = ChannelNorm(c2)
        self.temb_d2 = nn.Linear(self.patch_dim, c2)
        self.proj_in = nn.Linear(c2, cfg.embed_dim)
        self.proj_out = nn.Linear(cfg.embed_dim, c2)
        self.norm_u2 = ChannelNorm(c2)
        self.temb_u2 = nn.Linear(self.patch_dim, c2)
        self.up2 = nn.ConvTranspose2d(c2, c1, k, stride=k)
        self.norm_u1 = ChannelNorm(c1)
        self.temb_u1 = nn.Linear(self.patch_dim, c1)
        self.up1 = nn.Conv2d(c1, c, 3, padding=1)

    @staticmethod
    def _inject(x, temb_layer, temb):
        return x + temb_layer(temb)[:, :, None, None]

    def _groups(self, images):
        groups: dict[tuple[int, int], list[int]] = {}
        for n, img in enumerate(images):
            groups.setdefault((img.grid_h, img.grid_w), []).append(n)
        return groups

    def encode(self, patches, t, images):
        out = patches.new_zeros(patches.shape[0], self.proj_in.out_features)
        skips = {}
        for grid, members in self._groups(images).items():
            rows = torch.cat([images[m].rows for m in members])
            gh, gw = grid
            x = _to_grid(patches[rows].reshape(len(members), gh * gw, -1), gh, gw, self.k, self.c)
            temb = timestep_embedding(torch.tensor([images[m].t for m in members]),
                                      self.patch_dim).to(patches.dtype)
            h1 = F.silu(self._inject(self.norm_d1(self.down1(x)), self.temb_d1, temb))
            h2 = F.silu(self._inject(self.norm_d2(self.down2(h1)), self.temb_d2, temb))
            vec = self.proj_in(h2.permute(0, 2, 3, 1).reshape(len(members), gh * gw, -1))
            out = out.index_put((rows,), vec.reshape(-1, vec.shape[-1]))
            skips[grid] = (h1, h2, temb)
        return out, skips

    def decode(self, h, skips, images):
        if skips is None:
            raise ValueError("unet decode requires the skip activations from encode")
        out = h.new_zeros(h.shape[0], self.patch_dim)
        for grid, members in self._groups(images).items():
            if grid not in skips:
                raise ValueError(f"missing skip activations for grid {grid}")
            h1, h2, temb = skips[grid]
            rows = torch.cat([images[m].rows for m in members])
            gh, gw = grid
            u = self.proj_out(h[rows]).reshape(len(members), gh, gw, -1).permute(0, 3, 1, 2)
            u = F.silu(self._inject(self.norm_u2(u + h2), self.temb_u2, temb))
            u = self.up2(u)
            u = F.silu(self._inject(self.norm_u1(u + h1), self.temb_u1, temb))
            eps = _from_grid(self.up1(u), self.k)
            out = out.index_put((rows,), eps.reshape(-1, self.patch_dim))
        return out


# ----------------------------------------------------------------------------
# Batching


@dataclass
class ImageRef:
    """One image inside a batch; ``rows`` index the packed patch tensor."""

    batch: int
    span: ImageSpan
    t: int
    rows: torch.Tensor

    @property
    def grid_h(self) -> int:
        return self.span.grid_h

    @property
    def grid_w(self) -> int:
        return self.span.grid_w


@dataclass
class Batch:
    ids: torch.Tensor  # (B, L) long; PAD at patch and padding positions
    is_patch: torch.Tensor  # (B, L) bool
    patches: torch.Tensor  # (N, patch_dim), row order = is_patch.nonzero()
    patch_t: torch.Tensor  # (N,) long
    mask: torch.Tensor  # (B, L, L) bool
    lengths: torch.Tensor  # (B,)
    images: list[ImageRef] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.ids, self.is_patch, self.patches.to(dtype), self.patch_t, self.mask,
                     self.lengths, self.images)


def collate(seqs: Sequence[MixedSequence], timesteps: Sequence[Sequence[int]] | None = None,
            mask_kind: str = "transfusion", include_markers: bool = False,
            vocab: Vocabulary = DEFAULT_VOCAB, dtype: torch.dtype = torch.float32) -> Batch:
    """Right-pad sequences into one batch.

    ``timesteps[b][n]`` is the noise level of the n-th image of sequence b
    (defaults to 0, i.e. clean).
    """
    B = len(seqs)
    L = max(len(s) for s in seqs)
    ids = torch.full((B, L), vocab.pad, dtype=torch.long)
    is_patch = torch.zeros((B, L), dtype=torch.bool)
    mask = torch.zeros((B, L, L), dtype=torch.bool)
    # padding rows see themselves only so softmax stays finite
    mask[:] = torch.eye(L, dtype=torch.bool)
    patch_rows, patch_t, images = [], [], []
    t_of_pos: list[dict[int, int]] = []
    for b, seq in enumerate(seqs):
        n = len(seq)
        ids[b, :n] = torch.tensor(seq.token_ids(vocab.pad), dtype=torch.long)
        is_patch[b, :n] = torch.from_numpy(seq.is_patch())
        m = build_attention_mask(seq, include_markers) if mask_kind == "transfusion" else causal_only_mask(seq)
        mask[b, :n, :n] = torch.from_numpy(m)
        ts = list(timesteps[b]) if timesteps is not None else [0] * len(seq.image_spans)
        if len(ts) != len(seq.image_spans):
            raise ValueError(f"sequence {b} has {len(seq.image_spans)} images but {len(ts)} timesteps")
        pos_t = {}
        for span, t in zip(seq.image_spans, ts):
            for p in span.positions:
                pos_t[p] = int(t)
        t_of_pos.append(pos_t)
    row = 0
    row_of: dict[tuple[int, int], int] = {}
    for b, seq in enumerate(seqs):
        for p, e in enumerate(seq.elements):
            if is_patch[b, p]:
                patch_rows.append(np.asarray(e.vector))
                patch_t.append(t_of_pos[b][p])
                row_of[(b, p)] = row
                row += 1
    for b, seq in enumerate(seqs):
        ts = list(timesteps[b]) if timesteps is not None else [0] * len(seq.image_spans)
        for span, t in zip(seq.image_spans, ts):
            rows = torch.tensor([row_of[(b, p)] for p in span.positions], dtype=torch.long)
            images.append(ImageRef(b, span, int(t), rows))
    if patch_rows:
        patches = torch.from_numpy(np.stack(patch_rows).astype(np.float64)).to(dtype)
    else:
        patches = torch.zeros((0, 0), dtype=dtype)
    return Batch(ids, is_patch, patches, torch.tensor(patch_t, dtype=torch.long), mask,
                 torch.tensor([len(s) for s in seqs]), images)


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, L, V)
    eps_pred: torch.Tensor  # (N, patch_dim), aligned with Batch.patches


class TransfusionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.codec = UNetCodec(cfg) if cfg.codec_kind == "unet" else LinearCodec(cfg)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = RMSNorm(cfg.embed_dim)
        self.unembed = nn.Linear(cfg.embed_dim, cfg.vocab_size, bias=False)

    def embed(self, batch: Batch):
        h = self.tok_emb(batch.ids)
        skips = None
        if batch.patches.shape[0]:
            enc, skips = self.codec.encode(batch.patches.to(h.dtype), batch.patch_t, batch.images)
            h = h.index_put(tuple(batch.is_patch.nonzero().T), enc)
        return h, skips

    def trunk(self, h: torch.Tensor, mask: torch.Tensor, offset: int = 0) -> torch.Tensor:
        L = h.shape[1]
        cos, sin = rope_tables(torch.arange(L) + offset, self.cfg.embed_dim // self.cfg.heads,
                               self.cfg.rope_base)
        for block in self.blocks:
            h = block(h, mask, cos, sin)
        return self.norm(h)

    def forward(self, batch: Batch, mask: torch.Tensor | None = None) -> ForwardOutput:
        mask = batch.mask if mask is None else mask
        if mask.shape[-1] != batch.ids.shape[1]:
            raise ValueError("mask does not match sequence length")
        h, skips = self.embed(batch)
        h = self.trunk(h, mask)
        logits = self.unembed(h)
        if batch.patches.shape[0]:
            eps = self.codec.decode(h[batch.is_patch], skips, batch.images)
        else:
            eps = h.new_zeros((0, self.cfg.latent_patch_dim))
        return ForwardOutput(logits, eps)


def init_params(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> TransfusionModel:
    """Build a model with N(0, 0.02^2) weights, residual projections scaled down by sqrt(2 * layers)."""
    gen = torch.Generator().manual_seed(seed)
    model = TransfusionModel(cfg)
    out_std = 0.02 / math.sqrt(2 * cfg.layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            elif name.endswith("attn.out.weight") or name.endswith("ffn.down.weight"):
                p.normal_(0.0, out_std, generator=gen)
            else:
                p.normal_(0.0, 0.02, generator=gen)
    return model.to(dtype)


def count_params(model_or_cfg) -> int:
    if isinstance(model_or_cfg, nn.Module):
        return sum(p.numel() for p in model_or_cfg.parameters())
    return count_params(TransfusionModel(model_or_cfg))


def count_flops(cfg_or_params, tokens: int) -> float:
    """Training compute estimate 6 * N * D."""
    n = cfg_or_params if isinstance(cfg_or_params, (int, float)) else count_params(cfg_or_params)
    return 6.0 * n * tokens
