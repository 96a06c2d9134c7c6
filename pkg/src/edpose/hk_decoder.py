"""Human-to-keypoint query expansion and the human-to-keypoint detection decoder.

Row layout of every human-keypoint batch (M humans, K keypoints)::

    [h_1 .. h_M, k_{1,1} .. k_{1,K}, k_{2,1} .. k_{M,K}]

so human ``m`` sits at row ``m`` and keypoint ``(m, k)`` at ``M + m*K + k``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .encoder import FFN, DeformableAttnConfig, MSDeformAttn, TokenizedFeatures, sine_positional_embedding
from .human_decoder import QueryBatch, refine_boxes
from .layers import MLP, MaskedMultiHeadAttention, class_head
from .geometry import inverse_sigmoid


class SizeInit(str, enum.Enum):
    NONE = "none"
    MIN = "min"
    MAX = "max"
    FFN = "ffn"
    LEARNED = "learned"


class MaskStrategy(str, enum.Enum):
    OURS = "ours"
    FULL = "full"
    NO_HK = "no_hk"
    NO_HH = "no_hh"


POINT_EPS = 1e-4
MIN_FRACTION = 0.01


@dataclass(frozen=True)
class HKLayout:
    num_humans: int
    num_keypoints: int

    @property
    def num_rows(self) -> int:
        return self.num_humans + self.num_humans * self.num_keypoints

    def human_row(self, m: int) -> int:
        return m

    def keypoint_row(self, m: int, k: int) -> int:
        return self.num_humans + m * self.num_keypoints + k

    def roles(self) -> tuple[Tensor, Tensor, Tensor]:
        """(is_human [R] bool, instance [R] long, keypoint [R] long with -1 for humans)."""
        M, K = self.num_humans, self.num_keypoints
        is_human = torch.cat([torch.ones(M, dtype=torch.bool), torch.zeros(M * K, dtype=torch.bool)])
        instance = torch.cat([torch.arange(M), torch.arange(M).repeat_interleave(K)])
        keypoint = torch.cat([torch.full((M,), -1), torch.arange(K).repeat(M)])
        return is_human, instance, keypoint


@dataclass
class HKQueryBatch:
    content: Tensor    # [B, M + M*K, D]
    position: Tensor   # [B, M + M*K, 4]
    layout: HKLayout

    def __post_init__(self):
        if self.content.shape[1] != self.layout.num_rows:
            raise ValueError(f"expected {self.layout.num_rows} rows, got {self.content.shape[1]}")

    def humans(self) -> QueryBatch:
        M = self.layout.num_humans
        return QueryBatch(self.content[:, :M], self.position[:, :M])

    def keypoint_boxes(self) -> Tensor:
        """[B, M, K, 4]"""
        M, K = self.layout.num_humans, self.layout.num_keypoints
        B = self.position.shape[0]
        return self.position[:, M:].reshape(B, M, K, 4)


def build_interaction_mask(num_humans: int, num_keypoints: int,
                           strategy: MaskStrategy | str = MaskStrategy.OURS) -> Tensor:
    """Boolean [R, R] matrix, True where row i may attend to column j.

    ours:  every human pair, plus any pair belonging to the same instance
    full:  everything
    no_hk: ours without human<->keypoint pairs of the same instance
    no_hh: ours without human<->human pairs across instances
    """
    strategy = MaskStrategy(strategy)
    if num_humans < 1 or num_keypoints < 1:
        raise ValueError("need at least one human and one keypoint")
    layout = HKLayout(num_humans, num_keypoints)
    is_h, inst, _ = layout.roles()
    R = layout.num_rows
    if strategy is MaskStrategy.FULL:
        return torch.ones(R, R, dtype=torch.bool)
    hh = is_h[:, None] & is_h[None, :]
    kk = ~is_h[:, None] & ~is_h[None, :]
    same = inst[:, None] == inst[None, :]
    if strategy is MaskStrategy.OURS:
        return hh | same
    if strategy is MaskStrategy.NO_HK:
        return hh | (kk & same)
    return same  # NO_HH: for two humans, same instance means i == j


class KeypointEmbeddings(nn.Module):
    def __init__(self, num_keypoints: int, d_model: int, init_fraction: float = 0.1):
        super().__init__()
        self.table = nn.Parameter(torch.empty(1, num_keypoints, d_model))
        nn.init.normal_(self.table, std=1.0)
        logit = math.log(init_fraction / (1 - init_fraction))
        self.size_weights = nn.Parameter(torch.full((num_keypoints, 2), logit))

    @property
    def num_keypoints(self) -> int:
        return self.table.shape[1]


class QueryExpansion(nn.Module):
    """Turns M human queries into the (M + M*K)-row human-keypoint batch."""

    def __init__(self, d_model: int, num_keypoints: int, size_init: SizeInit | str = SizeInit.LEARNED):
        super().__init__()
        self.size_init = SizeInit(size_init)
        self.num_keypoints = num_keypoints
        self.embeddings = KeypointEmbeddings(num_keypoints, d_model)
        self.center_head = MLP(d_model, d_model, 2 * num_keypoints, 2)
        if self.size_init is SizeInit.FFN:
            self.size_head = MLP(d_model, d_model, 2 * num_keypoints, 2)

    def keypoint_sizes(self, humans: QueryBatch) -> Tensor:
        """[B, M, K, 2] keypoint box (w, h) under the configured strategy."""
        B, M, _ = humans.content.shape
        K = self.num_keypoints
        wh = humans.position[..., None, 2:].expand(B, M, K, 2)
        s = self.size_init
        if s is SizeInit.LEARNED:
            return self.embeddings.size_weights.sigmoid()[None, None] * wh
        if s is SizeInit.FFN:
            w = self.size_head(humans.content).view(B, M, K, 2).sigmoid()
            return w * wh
        if s is SizeInit.MAX:
            return wh
        if s is SizeInit.MIN:
            return MIN_FRACTION * wh
        return torch.full_like(wh, POINT_EPS)

    def forward(self, humans: QueryBatch) -> HKQueryBatch:
        B, M, D = humans.content.shape
        K = self.num_keypoints
        kpt_content = humans.content[:, :, None, :] + self.embeddings.table[:, None]
        offsets = self.center_head(humans.content).view(B, M, K, 2)
        centers = (inverse_sigmoid(humans.position[..., None, :2]) + offsets).sigmoid()
        kpt_pos = torch.cat([centers, self.keypoint_sizes(humans)], dim=-1)
        content = torch.cat([humans.content, kpt_content.reshape(B, M * K, D)], dim=1)
        position = torch.cat([humans.position, kpt_pos.reshape(B, M * K, 4)], dim=1)
        return HKQueryBatch(content, position, HKLayout(M, K))


@dataclass
class HKLayerOutput:
    logits: Tensor          # [B, M]
    boxes: Tensor           # [B, M, 4]
    keypoint_boxes: Tensor  # [B, M, K, 4]

    @property
    def keypoints(self) -> Tensor:
        return self.keypoint_boxes[..., :2]


class HKDecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ffn: int, deform: DeformableAttnConfig,
                 dropout: float = 0.0, pe_temperature: float = 10000.0):
        super().__init__()
        self.d_model = d_model
        self.pe_temperature = pe_temperature
        self.interactive_attn = MaskedMultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MSDeformAttn(d_model, deform)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, d_ffn, dropout)
        self.dropout = nn.Dropout(dropout)
        self.human_box_head = MLP(d_model, d_model, 4, 3).init_small_output()
        self.keypoint_box_head = MLP(d_model, d_model, 4, 3).init_small_output()
        self.class_head = class_head(d_model)

    def forward(self, q: HKQueryBatch, allowed: Tensor, feats: TokenizedFeatures):
        M = q.layout.num_humans
        pos = sine_positional_embedding(q.position, self.d_model, self.pe_temperature)
        x = q.content
        x = self.norm1(x + self.dropout(self.interactive_attn(x, pos, allowed)))
        x = self.norm2(x + self.dropout(self.cross_attn(x + pos, q.position, feats)))
        x = self.ffn(x)
        human_boxes = refine_boxes(q.position[:, :M], self.human_box_head(x[:, :M]))
        kpt_boxes = refine_boxes(q.position[:, M:], self.keypoint_box_head(x[:, M:]))
        new = HKQueryBatch(x, torch.cat([human_boxes, kpt_boxes], dim=1), q.layout)
        out = HKLayerOutput(self.class_head(x[:, :M])[..., 0], human_boxes, new.keypoint_boxes())
        return new, out


class HKDecoder(nn.Module):
    def __init__(self, d_model: int = 256, num_keypoints: int = 17, num_layers: int = 4,
                 n_heads: int = 8, d_ffn: int = 1024, deform: DeformableAttnConfig | None = None,
                 size_init: SizeInit | str = SizeInit.LEARNED,
                 mask_strategy: MaskStrategy | str = MaskStrategy.OURS,
                 dropout: float = 0.0, pe_temperature: float = 10000.0):
        super().__init__()
        deform = deform or DeformableAttnConfig()
        self.mask_strategy = MaskStrategy(mask_strategy)
        self.expansion = QueryExpansion(d_model, num_keypoints, size_init)
        self.layers = nn.ModuleList(
            HKDecoderLayer(d_model, n_heads, d_ffn, deform, dropout, pe_temperature)
            for _ in range(num_layers))
        self._mask_cache: dict[tuple[int, int, str], Tensor] = {}

    def interaction_mask(self, num_humans: int, device) -> Tensor:
        key = (num_humans, self.expansion.num_keypoints, str(device))
        if key not in self._mask_cache:
            self._mask_cache[key] = build_interaction_mask(
                num_humans, self.expansion.num_keypoints, self.mask_strategy).to(device)
        return self._mask_cache[key]

    def forward(self, humans: QueryBatch, feats: TokenizedFeatures):
        q = self.expansion(humans)
        allowed = self.interaction_mask(q.layout.num_humans, q.content.device)
        outputs = []
        for layer in self.layers:
            q, out = layer(q, allowed, feats)
            outputs.append(out)
            q = HKQueryBatch(q.content, q.position.detach(), q.layout)
        return q, outputs


def predict_keypoints(out: HKLayerOutput) -> dict[str, Tensor]:
    """Per-instance predictions from the final decoder layer, in human-row order."""
    return {
        "scores": out.logits.sigmoid(),
        "boxes": out.boxes,
        "keypoints": out.keypoints,
        "keypoint_boxes": out.keypoint_boxes,
    }
