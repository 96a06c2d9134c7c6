"""The full detector: backbone -> encoder -> human decoder -> human-keypoint decoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .encoder import DeformableAttnConfig, DeformableEncoder, TinyBackbone, tokenize
from .hk_decoder import HKDecoder, HKLayerOutput, predict_keypoints
from .human_decoder import CoarseQuerySelector, HumanDecoder, fine_query_select


@dataclass
class LayerOutput:
    """Predictions of one supervised stage.  ``kind`` is enc, human or hk."""

    kind: str
    logits: Tensor                       # [B, L]
    boxes: Tensor                        # [B, L, 4]
    keypoints: Tensor | None = None      # [B, L, K, 2]
    keypoint_boxes: Tensor | None = None  # [B, L, K, 4]


@dataclass
class DetectionOutput:
    proposals: LayerOutput
    human_layers: list[LayerOutput]
    hk_layers: list[LayerOutput]

    @property
    def final(self) -> LayerOutput:
        return self.hk_layers[-1]

    def supervised_layers(self) -> list[tuple[str, LayerOutput]]:
        named = [("enc", self.proposals)]
        named += [(f"human{i}", o) for i, o in enumerate(self.human_layers)]
        named += [(f"hk{i}", o) for i, o in enumerate(self.hk_layers)]
        return named


class EDPose(nn.Module):
    def __init__(self, cfg: ModelConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        deform = DeformableAttnConfig(cfg.n_heads, cfg.n_points, cfg.n_levels)
        D = cfg.d_model
        self.backbone = backbone if backbone is not None else TinyBackbone(D, cfg.n_levels)
        self.encoder = DeformableEncoder(D, cfg.enc_layers, cfg.d_ffn, deform, cfg.dropout,
                                         cfg.pe_temperature)
        self.selector = CoarseQuerySelector(D)
        self.human_decoder = HumanDecoder(D, cfg.human_layers, cfg.n_heads, cfg.d_ffn, deform,
                                          cfg.dropout, cfg.pe_temperature)
        self.hk_decoder = HKDecoder(D, cfg.num_keypoints, cfg.hk_layers, cfg.n_heads, cfg.d_ffn,
                                    deform, cfg.size_init, cfg.mask_strategy, cfg.dropout,
                                    cfg.pe_temperature)

    def forward(self, images: Tensor, pixel_mask: Tensor | None = None) -> DetectionOutput:
        """images: [B, 3, H, W] in [0, 1]; pixel_mask: [B, H, W], True on real pixels."""
        feats = tokenize(self.backbone(images), pixel_mask)
        feats = self.encoder(feats)
        queries, prop_logits, _ = self.selector(feats, self.cfg.num_queries)
        proposals = LayerOutput("enc", prop_logits, queries.position)
        queries, dets = self.human_decoder(queries, feats)
        human_layers = [LayerOutput("human", lg, bx) for lg, bx in zip(dets.logits, dets.boxes)]
        if dets.logits:
            final_logits = dets.logits[-1]
        else:
            final_logits = prop_logits
            queries.position = queries.position.detach()
        selected, _ = fine_query_select(queries, final_logits, self.cfg.num_select)
        _, hk_outs = self.hk_decoder(selected, feats)
        hk_layers = [LayerOutput("hk", o.logits, o.boxes, o.keypoints, o.keypoint_boxes)
                     for o in hk_outs]
        return DetectionOutput(proposals, human_layers, hk_layers)

    @torch.no_grad()
    def predict(self, images: Tensor, pixel_mask: Tensor | None = None) -> dict[str, Tensor]:
        out = self.forward(images, pixel_mask)
        f = out.final
        return predict_keypoints(HKLayerOutput(f.logits, f.boxes, f.keypoint_boxes))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
