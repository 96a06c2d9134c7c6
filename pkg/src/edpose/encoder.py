"""Backbone, tokenization and the deformable-attention Transformer encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ShapeError(ValueError):
    pass


@dataclass
class DeformableAttnConfig:
    n_heads: int = 8
    n_points: int = 4
    n_levels: int = 3

    def validate(self, d_model: int) -> None:
        if min(self.n_heads, self.n_points, self.n_levels) <= 0:
            raise ValueError("deformable attention sizes must be positive")
        if d_model % self.n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={self.n_heads}")


@dataclass
class TokenizedFeatures:
    """Flattened multi-scale tokens.

    ``tokens`` is [B, T, D]; ``positions`` is [B, T, 4] reference boxes;
    ``padding_mask`` is [B, T] and True where a token covers padding.
    """

    tokens: Tensor
    level_shapes: list[tuple[int, int]]
    level_start_index: list[int]
    positions: Tensor
    padding_mask: Tensor | None = None

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    def replace_tokens(self, tokens: Tensor) -> "TokenizedFeatures":
        return TokenizedFeatures(tokens, self.level_shapes, self.level_start_index,
                                 self.positions, self.padding_mask)

    def level_ids(self) -> Tensor:
        ids = [torch.full((h * w,), lvl, dtype=torch.long)
               for lvl, (h, w) in enumerate(self.level_shapes)]
        return torch.cat(ids).to(self.tokens.device)

    def level_map(self, level: int) -> Tensor:
        """Recover the [B, D, h, w] map of one level from the flat token axis."""
        h, w = self.level_shapes[level]
        start = self.level_start_index[level]
        flat = self.tokens[:, start:start + h * w]
        return flat.transpose(1, 2).reshape(flat.shape[0], -1, h, w)


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.GroupNorm(min(8, cout // 4) or 1, cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Strided conv pyramid with 1x1 projections to ``d_model`` channels.

    Emits levels at strides 8, 16, 32 (and 64 when ``n_levels == 4``).  Any
    module with the same call signature can stand in for it.
    """

    def __init__(self, d_model: int = 256, n_levels: int = 3,
                 channels: tuple[int, ...] = (16, 24, 48, 64, 96)):
        super().__init__()
        if not 1 <= n_levels <= 4:
            raise ValueError("n_levels must be in 1..4")
        self.n_levels = n_levels
        c = channels
        self.stem = _conv_block(3, c[0], 2)                       # stride 2
        self.stage1 = nn.Sequential(_conv_block(c[0], c[1], 2),   # stride 4
                                    _conv_block(c[1], c[1], 1))
        self.stage2 = nn.Sequential(_conv_block(c[1], c[2], 2),   # stride 8
                                    _conv_block(c[2], c[2], 1))
        self.stage3 = nn.Sequential(_conv_block(c[2], c[3], 2),   # stride 16
                                    _conv_block(c[3], c[3], 1))
        self.stage4 = nn.Sequential(_conv_block(c[3], c[4], 2),   # stride 32
                                    _conv_block(c[4], c[4], 1))
        in_chs = [c[2], c[3], c[4]][:n_levels]
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch, d_model, 1), nn.GroupNorm(min(32, d_model // 2), d_model))
            for ch in in_chs)
        if n_levels == 4:
            self.proj.append(nn.Sequential(
                nn.Conv2d(c[4], d_model, 3, 2, 1), nn.GroupNorm(min(32, d_model // 2), d_model)))

    @property
    def total_stride(self) -> int:
        return 2 ** (self.n_levels + 2)

    def forward(self, images: Tensor) -> list[Tensor]:
        _, _, H, W = images.shape
        s = self.total_stride
        if H < 32 or W < 32 or H % s or W % s:
            raise ShapeError(f"image {H}x{W} must be >= 32 and divisible by {s}")
        x = self.stem(images - 0.5)
        x = self.stage1(x)
        c3 = self.stage2(x)
        c4 = self.stage3(c3)
        c5 = self.stage4(c4)
        feats = [c3, c4, c5][:self.n_levels]
        outs = [proj(f) for proj, f in zip(self.proj, feats)]
        if self.n_levels == 4:
            outs.append(self.proj[3](c5))
        return outs


def sine_positional_embedding(positions: Tensor, d_model: int,
                              temperature: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of 4D boxes: d_model/4 channels per coordinate.

    Each coordinate uses d_model/8 frequencies with interleaved (sin, cos)
    pairs, so the embedding norm is sqrt(d_model/2) everywhere.
    """
    if d_model % 8:
        raise ValueError("d_model must be divisible by 8")
    per = d_model // 4
    idx = torch.arange(per, dtype=positions.dtype, device=positions.device)
    dim_t = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / per)
    emb = positions[..., :, None] * (2 * math.pi) / dim_t    # [..., 4, per]
    emb = torch.stack([emb[..., 0::2].sin(), emb[..., 1::2].cos()], dim=-1)
    return emb.flatten(-3)


def ms_deform_attn_core(value: Tensor, level_shapes: list[tuple[int, int]],
                        sampling_locations: Tensor, attention_weights: Tensor) -> Tensor:
    """Bilinear multi-scale sampling followed by the attention-weighted sum.

    value: [B, T, H, Dh]; sampling_locations: [B, Lq, H, L, P, 2] in [0,1]
    image fractions; attention_weights: [B, Lq, H, L, P].  Out-of-range
    samples read zeros.  Returns [B, Lq, H*Dh].
    """
    B, _, n_heads, dh = value.shape
    _, Lq, _, n_levels, n_points, _ = sampling_locations.shape
    sizes = [h * w for h, w in level_shapes]
    value_list = value.split(sizes, dim=1)
    grids = 2 * sampling_locations - 1
    sampled = []
    for lvl, (h, w) in enumerate(level_shapes):
        v = value_list[lvl].flatten(2).transpose(1, 2).reshape(B * n_heads, dh, h, w)
        g = grids[:, :, :, lvl].transpose(1, 2).flatten(0, 1)   # [B*H, Lq, P, 2]
        sampled.append(F.grid_sample(v, g, mode="bilinear", padding_mode="zeros",
                                     align_corners=False))    # [B*H, Dh, Lq, P]
    attn = attention_weights.transpose(1, 2).reshape(B * n_heads, 1, Lq, n_levels * n_points)
    out = (torch.stack(sampled, dim=-2).flatten(-2) * attn).sum(-1)
    return out.view(B, n_heads * dh, Lq).transpose(1, 2)


class MSDeformAttn(nn.Module):
    """Multi-scale deformable attention around 4D reference boxes.

    Sampling location = box center + offset * (w, h) / 2; the attention
    weights of each head are a softmax over its levels x points.
    """

    def __init__(self, d_model: int, cfg: DeformableAttnConfig):
        super().__init__()
        cfg.validate(d_model)
        self.d_model = d_model
        self.cfg = cfg
        H, L, P = cfg.n_heads, cfg.n_levels, cfg.n_points
        self.sampling_offsets = nn.Linear(d_model, H * L * P * 2)
        self.attention_weights = nn.Linear(d_model, H * L * P)
        self.value_proj = nn.Linear(d_model, d_model)
        self.output_proj = nn.Linear(d_model, d_model)
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        H, L, P = self.cfg.n_heads, self.cfg.n_levels, self.cfg.n_points
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(H, dtype=torch.float32) * (2.0 * math.pi / H)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(H, 1, 1, 2).repeat(1, L, P, 1)
        for i in range(P):
            grid[:, :, i, :] *= (i + 1) / P
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.flatten())
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def sampling(self, query: Tensor, ref_boxes: Tensor) -> tuple[Tensor, Tensor]:
        """Sampling locations [B,Lq,H,L,P,2] and softmaxed weights [B,Lq,H,L,P]."""
        B, Lq, _ = query.shape
        H, L, P = self.cfg.n_heads, self.cfg.n_levels, self.cfg.n_points
        offsets = self.sampling_offsets(query).view(B, Lq, H, L, P, 2)
        logits = self.attention_weights(query).view(B, Lq, H, L * P)
        weights = logits.softmax(-1).view(B, Lq, H, L, P)
        return locations_from_offsets(ref_boxes, offsets), weights

    def project_value(self, tokens: Tensor, padding_mask: Tensor | None) -> Tensor:
        B, T, _ = tokens.shape
        value = self.value_proj(tokens)
        if padding_mask is not None:
            value = value.masked_fill(padding_mask[..., None], 0.0)
        return value.view(B, T, self.cfg.n_heads, self.d_model // self.cfg.n_heads)

    def forward(self, query: Tensor, ref_boxes: Tensor, feats: TokenizedFeatures,
                value_tokens: Tensor | None = None) -> Tensor:
        if len(feats.level_shapes) != self.cfg.n_levels:
            raise ShapeError(f"expected {self.cfg.n_levels} levels, got {len(feats.level_shapes)}")
        tokens = feats.tokens if value_tokens is None else value_tokens
        value = self.project_value(tokens, feats.padding_mask)
        locs, weights = self.sampling(query, ref_boxes)
        out = ms_deform_attn_core(value, feats.level_shapes, locs, weights)
        return self.output_proj(out)


def locations_from_offsets(ref_boxes: Tensor, offsets: Tensor) -> Tensor:
    """ref_boxes [B,Lq,4], offsets [B,Lq,H,L,P,2] -> locations of the same shape as offsets."""
    center = ref_boxes[:, :, None, None, None, :2]
    half = ref_boxes[:, :, None, None, None, 2:] * 0.5
    return center + offsets * half


class FFN(nn.Module):
    def __init__(self, d_model: int, d_ffn: int, dropout: float = 0.0):
        super().__init__()
        self.linear1 = nn.Linear(d_model, d_ffn)
        self.linear2 = nn.Linear(d_ffn, d_model)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x: Tensor) -> Tensor:
        y = self.linear2(self.dropout(F.relu(self.linear1(x))))
        return self.norm(x + self.dropout(y))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, d_ffn: int, cfg: DeformableAttnConfig, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MSDeformAttn(d_model, cfg)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, d_ffn, dropout)

    def forward(self, src: Tensor, pos: Tensor, feats: TokenizedFeatures) -> Tensor:
        src2 = self.self_attn(src + pos, feats.positions, feats, value_tokens=src)
        src = self.norm(src + self.dropout(src2))
        return self.ffn(src)


class DeformableEncoder(nn.Module):
    """Stack of deformable self-attention layers; zero layers is the identity."""

    def __init__(self, d_model: int = 256, num_layers: int = 2, d_ffn: int = 1024,
                 cfg: DeformableAttnConfig | None = None, dropout: float = 0.0,
                 pe_temperature: float = 10000.0):
        super().__init__()
        cfg = cfg or DeformableAttnConfig()
        self.d_model = d_model
        self.pe_temperature = pe_temperature
        self.level_embed = nn.Parameter(torch.empty(cfg.n_levels, d_model))
        nn.init.normal_(self.level_embed, std=0.02)
        self.layers = nn.ModuleList(EncoderLayer(d_model, d_ffn, cfg, dropout)
                                    for _ in range(num_layers))

    def forward(self, feats: TokenizedFeatures) -> TokenizedFeatures:
        if not self.layers:
            return feats
        pos = sine_positional_embedding(feats.positions, self.d_model, self.pe_temperature)
        pos = pos + self.level_embed[feats.level_ids()][None]
        src = feats.tokens
        for layer in self.layers:
            src = layer(src, pos, feats)
        return feats.replace_tokens(src)


def tokenize(maps: list[Tensor], pixel_mask: Tensor | None = None) -> TokenizedFeatures:
    """Flatten a feature pyramid into tokens with per-token reference boxes.

    The reference box of a token is centred on its cell and spans two cells of
    its level.  ``pixel_mask`` is [B, H, W], True on valid (non-padded) pixels.
    """
    B = maps[0].shape[0]
    tokens, positions, masks, shapes, starts = [], [], [], [], []
    start = 0
    for fmap in maps:
        _, _, h, w = fmap.shape
        shapes.append((h, w))
        starts.append(start)
        start += h * w
        tokens.append(fmap.flatten(2).transpose(1, 2))
        ys = (torch.arange(h, dtype=fmap.dtype, device=fmap.device) + 0.5) / h
        xs = (torch.arange(w, dtype=fmap.dtype, device=fmap.device) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        wh = torch.tensor([min(2.0 / w, 1.0), min(2.0 / h, 1.0)], dtype=fmap.dtype,
                          device=fmap.device).expand(h * w, 2)
        positions.append(torch.cat([gx.reshape(-1, 1), gy.reshape(-1, 1), wh], dim=1))
        if pixel_mask is not None:
            m = F.interpolate(pixel_mask[:, None].to(fmap.dtype), size=(h, w), mode="nearest")
            masks.append(m[:, 0].flatten(1) < 0.5)
    pos = torch.cat(positions, 0)[None].expand(B, -1, -1)
    padding_mask = torch.cat(masks, 1) if pixel_mask is not None else None
    return TokenizedFeatures(torch.cat(tokens, 1), shapes, starts, pos, padding_mask)
