import pytest
import torch

from edpose.config import ModelConfig
from edpose.encoder import DeformableAttnConfig, TinyBackbone, tokenize
from edpose.human_decoder import (CoarseQuerySelector, HumanDecoder, HumanDecoderLayer, QueryBatch,
                                  SelectionError, fine_query_select, refine_boxes, topk_stable)
from edpose.model import EDPose


def feats(B=2, D=16):
    return tokenize([torch.randn(B, D, 6, 6), torch.randn(B, D, 3, 3), torch.randn(B, D, 2, 2)])


DEFORM = DeformableAttnConfig(4, 2, 3)


class TestCoarseSelection:
    def test_all_tokens_is_permutation(self):
        f = feats()
        sel = CoarseQuerySelector(16)
        _, _, idx = sel(f, f.num_tokens)
        assert torch.equal(idx.sort(-1).values, torch.arange(f.num_tokens).expand(2, -1))

    def test_decreasing_scores_pick_prefix(self):
        f = feats()
        sel = CoarseQuerySelector(16)
        sel.score = lambda tokens: -torch.arange(tokens.shape[1], dtype=tokens.dtype).expand(tokens.shape[0], -1)
        _, _, idx = sel(f, 10)
        assert torch.equal(idx, torch.arange(10).expand(2, -1))

    def test_ties_prefer_lower_index(self):
        s = torch.tensor([[1.0, 3.0, 3.0, 0.0, 3.0]])
        assert topk_stable(s, 3).tolist() == [[1, 2, 4]]

    def test_too_many(self):
        f = feats()
        with pytest.raises(SelectionError):
            CoarseQuerySelector(16)(f, f.num_tokens + 1)

    def test_content_is_token_features(self):
        f = feats()
        q, _, idx = CoarseQuerySelector(16)(f, 5)
        for b in range(2):
            assert torch.equal(q.content[b], f.tokens[b, idx[b]])
        assert ((q.position > 0) & (q.position < 1)).all()

    def test_padding_tokens_never_selected(self):
        maps = [torch.randn(1, 16, 4, 4)]
        pix = torch.zeros(1, 32, 32, dtype=torch.bool)
        pix[:, :16, :16] = True
        f = tokenize(maps, pix)
        _, _, idx = CoarseQuerySelector(16)(f, 4)
        assert not f.padding_mask[0, idx[0]].any()


class TestDecoder:
    def test_zero_delta_identity(self):
        layer = HumanDecoderLayer(16, 4, 32, DEFORM)
        torch.nn.init.zeros_(layer.box_head.layers[-1].weight)
        torch.nn.init.zeros_(layer.box_head.layers[-1].bias)
        q = QueryBatch(torch.randn(2, 9, 16), torch.rand(2, 9, 4) * 0.8 + 0.1)
        out, _, _ = layer(q, feats())
        torch.testing.assert_close(out.position, q.position)
        assert out.content.shape == q.content.shape

    def test_refinement_bounded(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(1000):
            old = torch.rand(5, 4, generator=g, dtype=torch.float64).clamp(1e-4, 1 - 1e-4)
            new = refine_boxes(old, torch.randn(5, 4, generator=g, dtype=torch.float64) * 5)
            assert ((new > 0) & (new < 1)).all()
            # float32 saturates only for |logit| > ~17; typical deltas stay well inside
            new32 = refine_boxes(old.float(), torch.randn(5, 4, generator=g))
            assert ((new32 > 0) & (new32 < 1)).all()

    def test_layer_count_and_movement(self):
        dec = HumanDecoder(16, 2, 4, 32, DEFORM)
        q = QueryBatch(torch.randn(2, 9, 16), torch.rand(2, 9, 4) * 0.8 + 0.1)
        out, dets = dec(q, feats())
        assert len(dets) == 2 and out.size == 9
        assert not torch.allclose(dets.boxes[0], q.position)
        assert all(((b > 0) & (b < 1)).all() for b in dets.boxes)


class TestFineSelection:
    def test_pairing_with_sentinels(self):
        N = 8
        content = torch.arange(N, dtype=torch.float32).view(1, N, 1).expand(1, N, 4).clone()
        position = (torch.arange(N, dtype=torch.float32) / 10 + 0.05).view(1, N, 1).expand(1, N, 4).clone()
        logits = torch.randn(1, N)
        out, idx = fine_query_select(QueryBatch(content, position), logits, 3)
        for r in range(3):
            tag = int(out.content[0, r, 0])
            assert tag == int(idx[0, r])
            assert float(out.position[0, r, 0]) == pytest.approx(tag / 10 + 0.05)
        assert torch.equal(idx[0], logits[0].argsort(descending=True, stable=True)[:3])

    def test_all_is_permutation(self):
        q = QueryBatch(torch.randn(1, 5, 4), torch.rand(1, 5, 4))
        _, idx = fine_query_select(q, torch.randn(1, 5), 5)
        assert sorted(idx[0].tolist()) == list(range(5))

    def test_too_many(self):
        q = QueryBatch(torch.randn(1, 5, 4), torch.rand(1, 5, 4))
        with pytest.raises(SelectionError):
            fine_query_select(q, torch.randn(1, 5), 6)


def test_defaults():
    m = ModelConfig()
    assert (m.num_queries, m.num_select, m.d_model, m.human_layers, m.hk_layers) == (900, 100, 256, 2, 4)


def test_gradient_reaches_backbone(tiny_cfg):
    model = EDPose(tiny_cfg.model)
    out = model(torch.rand(1, 3, 64, 64))
    out.human_layers[-1].boxes.sum().backward()
    g = sum(float(p.grad.abs().sum()) for p in model.backbone.parameters() if p.grad is not None)
    assert g > 0
