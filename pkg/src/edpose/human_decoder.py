"""Coarse human query selection, the human detection decoder and fine selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .encoder import FFN, DeformableAttnConfig, MSDeformAttn, TokenizedFeatures, sine_positional_embedding
from .geometry import inverse_sigmoid
from .layers import MLP, MaskedMultiHeadAttention, class_head


class SelectionError(ValueError):
    """Requested more queries than there are candidates."""


@dataclass
class QueryBatch:
    content: Tensor   # [B, L, D]
    position: Tensor  # [B, L, 4], (cx, cy, w, h) in (0, 1)

    def __post_init__(self):
        if self.content.shape[:2] != self.position.shape[:2]:
            raise ValueError("content and position must share the leading dimensions")

    @property
    def size(self) -> int:
        return self.content.shape[1]

    def gather(self, index: Tensor) -> "QueryBatch":
        """Select rows ``index`` [B, K] from content and position together."""
        c = torch.gather(self.content, 1, index[..., None].expand(-1, -1, self.content.shape[-1]))
        p = torch.gather(self.position, 1, index[..., None].expand(-1, -1, 4))
        return QueryBatch(c, p)


@dataclass
class HumanDetections:
    logits: list[Tensor] = field(default_factory=list)  # per layer [B, L]
    boxes: list[Tensor] = field(default_factory=list)   # per layer [B, L, 4]

    def __len__(self) -> int:
        return len(self.logits)


def refine_boxes(old: Tensor, delta: Tensor) -> Tensor:
    """Box update in inverse-sigmoid space: sigmoid(logit(old) + delta)."""
    return (inverse_sigmoid(old) + delta).sigmoid()


def topk_stable(scores: Tensor, k: int) -> Tensor:
    """Indices of the k largest scores per row; ties go to the lower index."""
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    return order[..., :k]


class CoarseQuerySelector(nn.Module):
    """Scores every encoded token and keeps the top-N as human queries.

    The selected token features become the content queries; a two-layer head
    regresses each one into a box relative to the token's reference box.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.class_head = class_head(d_model)
        self.box_head = MLP(d_model, d_model, 4, 2)

    def score(self, tokens: Tensor) -> Tensor:
        return self.class_head(tokens)[..., 0]

    def forward(self, feats: TokenizedFeatures, num_queries: int):
        T = feats.num_tokens
        if num_queries > T:
            raise SelectionError(f"N={num_queries} exceeds the token count T={T}")
        logits = self.score(feats.tokens)
        rank = logits.detach()
        if feats.padding_mask is not None:
            rank = rank.masked_fill(feats.padding_mask, float("-inf"))
        index = topk_stable(rank, num_queries)
        content = torch.gather(feats.tokens, 1, index[..., None].expand(-1, -1, feats.tokens.shape[-1]))
        ref = torch.gather(feats.positions, 1, index[..., None].expand(-1, -1, 4))
        boxes = refine_boxes(ref, self.box_head(content))
        sel_logits = torch.gather(logits, 1, index)
        return QueryBatch(content, boxes), sel_logits, index


class HumanDecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ffn: int, deform: DeformableAttnConfig,
                 dropout: float = 0.0, pe_temperature: float = 10000.0):
        super().__init__()
        self.d_model = d_model
        self.pe_temperature = pe_temperature
        self.self_attn = MaskedMultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MSDeformAttn(d_model, deform)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, d_ffn, dropout)
        self.dropout = nn.Dropout(dropout)
        self.box_head = MLP(d_model, d_model, 4, 3).init_small_output()
        self.class_head = class_head(d_model)

    def forward(self, q: QueryBatch, feats: TokenizedFeatures):
        """Returns the refined batch plus this layer's logits [B,L] and boxes [B,L,4]."""
        pos = sine_positional_embedding(q.position, self.d_model, self.pe_temperature)
        x = q.content
        x = self.norm1(x + self.dropout(self.self_attn(x, pos)))
        x = self.norm2(x + self.dropout(self.cross_attn(x + pos, q.position, feats)))
        x = self.ffn(x)
        boxes = refine_boxes(q.position, self.box_head(x))
        logits = self.class_head(x)[..., 0]
        return QueryBatch(x, boxes), logits, boxes


class HumanDecoder(nn.Module):
    def __init__(self, d_model: int = 256, num_layers: int = 2, n_heads: int = 8,
                 d_ffn: int = 1024, deform: DeformableAttnConfig | None = None,
                 dropout: float = 0.0, pe_temperature: float = 10000.0):
        super().__init__()
        deform = deform or DeformableAttnConfig()
        self.layers = nn.ModuleList(
            HumanDecoderLayer(d_model, n_heads, d_ffn, deform, dropout, pe_temperature)
            for _ in range(num_layers))

    def forward(self, q: QueryBatch, feats: TokenizedFeatures) -> tuple[QueryBatch, HumanDetections]:
        dets = HumanDetections()
        for layer in self.layers:
            q, logits, boxes = layer(q, feats)
            dets.logits.append(logits)
            dets.boxes.append(boxes)
            # the next layer refines around a fixed reference
            q = QueryBatch(q.content, q.position.detach())
        return q, dets


def fine_query_select(q: QueryBatch, logits: Tensor, num_keep: int) -> tuple[QueryBatch, Tensor]:
    """Keep the ``num_keep`` rows with the highest final-layer logit."""
    if num_keep > q.size:
        raise SelectionError(f"M={num_keep} exceeds the number of human queries N={q.size}")
    index = topk_stable(logits.detach(), num_keep)
    return q.gather(index), index
