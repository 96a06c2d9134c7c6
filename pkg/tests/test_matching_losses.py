import math

import numpy as np
import pytest
import torch

from edpose.geometry import KeypointSet, OksParams
from edpose.losses import (InstanceTargets, LossWeights, SetCriterion, focal_loss, keypoint_loss,
                           sigmoid_focal_loss_t, total_loss)
from edpose.matching import CostWeights, MatchError, hungarian_match, matching_cost
from edpose.model import DetectionOutput, LayerOutput

from oracles import brute_force_assignment

K = 3
KCONST = (0.1, 0.1, 0.1)


def make_targets(rng, n, dtype=torch.float64):
    if n == 0:
        return InstanceTargets.empty(K, dtype)
    c = rng.uniform(0.3, 0.7, (n, 2))
    wh = rng.uniform(0.1, 0.3, (n, 2))
    kp = c[:, None] + rng.uniform(-0.5, 0.5, (n, K, 2)) * wh[:, None]
    vis = np.full((n, K), 2)
    return InstanceTargets(torch.tensor(np.concatenate([c, wh], 1), dtype=dtype), torch.tensor(kp, dtype=dtype),
                           torch.tensor(vis), torch.tensor(wh.prod(1), dtype=dtype))


def make_output(rng, B, P, dtype=torch.float64, n_human=2, n_hk=2):
    def layer(kind, with_kp):
        logits = torch.tensor(rng.normal(0, 1, (B, P)), dtype=dtype)
        boxes = torch.tensor(np.concatenate([rng.uniform(0.2, 0.8, (B, P, 2)), rng.uniform(0.05, 0.4, (B, P, 2))], -1),
                             dtype=dtype)
        kp = torch.tensor(rng.uniform(0.1, 0.9, (B, P, K, 2)), dtype=dtype) if with_kp else None
        return LayerOutput(kind, logits, boxes, kp)
    return DetectionOutput(layer("enc", False), [layer("human", False) for _ in range(n_human)],
                           [layer("hk", True) for _ in range(n_hk)])


class TestHungarian:
    def test_two_by_two(self):
        m = hungarian_match([[1.0, 2.0], [2.0, 1.0]])
        assert set(m.pairs) == {(0, 0), (1, 1)}
        assert m.cost == 2.0

    def test_identity_favoring(self):
        c = np.ones((5, 5)) * 10 - 9 * np.eye(5)
        assert hungarian_match(c).pairs == [(i, i) for i in range(5)]

    def test_more_predictions(self, rng):
        c = rng.uniform(size=(6, 3))
        m = hungarian_match(c)
        assert len(m.pairs) == 3
        assert sorted(m.unmatched_predictions + m.pred_indices) == list(range(6))

    @pytest.mark.parametrize("bad", [[[1.0, math.nan]], [[math.inf]], [1.0, 2.0]])
    def test_rejects(self, bad):
        with pytest.raises(MatchError):
            hungarian_match(bad)

    def test_empty(self):
        m = hungarian_match(np.zeros((4, 0)))
        assert m.pairs == [] and m.unmatched_predictions == [0, 1, 2, 3]

    def test_random_6x6(self, rng):
        for _ in range(50):
            c = rng.uniform(size=(6, 6))
            pairs, _ = brute_force_assignment(c)
            assert hungarian_match(c).pairs == pairs


class TestFocal:
    def test_values(self):
        assert focal_loss(0.0, True) == pytest.approx(-0.25 * 0.25 * math.log(0.5), abs=1e-6)
        assert focal_loss(0.0, True) == pytest.approx(0.04332, abs=1e-5)
        # -0.75 * 0.25 * ln 0.5 = 0.1299651; the often quoted 0.12995 is a rounding slip
        assert focal_loss(0.0, False) == pytest.approx(-0.75 * 0.25 * math.log(0.5), abs=1e-6)
        assert focal_loss(0.0, False) == pytest.approx(0.12995, abs=2e-5)
        assert focal_loss(30.0, True) < 1e-12

    def test_tensor_matches_scalar(self):
        x = torch.linspace(-6, 6, 25, dtype=torch.float64)
        for pos in (True, False):
            t = torch.full_like(x, float(pos))
            ref = [focal_loss(float(v), pos) for v in x]
            np.testing.assert_allclose(sigmoid_focal_loss_t(x, t).numpy(), ref, rtol=1e-9, atol=1e-12)


class TestKeypointLoss:
    def test_perfect(self):
        p = KeypointSet.from_arrays(np.array([[0.1, 0.2], [0.3, 0.4]]), np.array([2, 2]))
        assert keypoint_loss(p, p, OksParams((0.1, 0.1), 0.2)) == (0.0, 0.0)

    def test_single_offset(self):
        d = 0.01
        gt = KeypointSet.from_arrays(np.array([[0.5, 0.5]]), np.array([2]))
        pred = KeypointSet.from_arrays(np.array([[0.5 + d, 0.5 + d]]), np.array([2]))
        l1, oks_term = keypoint_loss(pred, gt, OksParams((0.1,), 0.2))
        assert l1 == pytest.approx(2 * d)
        assert 0 <= oks_term <= 1

    def test_monotone(self, rng):
        gt = KeypointSet.from_arrays(rng.uniform(0, 1, (4, 2)), np.full(4, 2))
        base = gt.xy() + rng.normal(0, 0.02, (4, 2))
        direction = base[2] - gt.xy()[2]
        prev = None
        for s in (1.0, 1.5, 2.0, 3.0):
            p = base.copy()
            p[2] = gt.xy()[2] + s * direction
            cur = keypoint_loss(KeypointSet.from_arrays(p, np.full(4, 2)), gt, OksParams((0.1,) * 4, 0.2))
            if prev is not None:
                assert cur[0] >= prev[0] and cur[1] >= prev[1]
            prev = cur


class TestMatchingCost:
    def test_shape_and_identity_minimum(self, rng):
        tgt = make_targets(rng, 3)
        P = 7
        boxes = torch.tensor(rng.uniform(0.2, 0.8, (P, 4)))
        kp = torch.tensor(rng.uniform(0, 1, (P, K, 2)))
        boxes[4], kp[4] = tgt.boxes[1], tgt.keypoints[1]
        logits = torch.zeros(P, dtype=torch.float64)
        c = matching_cost(logits, boxes, tgt, CostWeights(), kp, torch.tensor(KCONST))
        assert c.shape == (P, 3)
        col = c[:, 1]
        assert int(col.argmin()) == 4 and (col[4] < torch.cat([col[:4], col[5:]])).all()

    def test_omega_monotone(self, rng):
        tgt = make_targets(rng, 1)
        boxes = tgt.boxes.repeat(2, 1)
        kp = tgt.keypoints.repeat(2, 1, 1)
        kp[1] += 0.05
        lg = torch.zeros(2, dtype=torch.float64)
        gaps = []
        for w in (10.0, 20.0):
            c = matching_cost(lg, boxes, tgt, CostWeights(kpt=w), kp, torch.tensor(KCONST))
            gaps.append(float(c[1, 0] - c[0, 0]))
        assert gaps[1] > gaps[0] > 0

    def test_invisible_gt_has_no_keypoint_cost(self, rng):
        tgt = make_targets(rng, 2)
        tgt.visibility[1] = 0
        boxes = torch.tensor(rng.uniform(0.2, 0.8, (3, 4)))
        kp = torch.tensor(rng.uniform(0, 1, (3, K, 2)))
        lg = torch.zeros(3, dtype=torch.float64)
        _, parts = matching_cost(lg, boxes, tgt, CostWeights(), kp, torch.tensor(KCONST), breakdown=True)
        assert (parts["kpt"][:, 1] == 0).all() and (parts["oks"][:, 1] == 0).all()


class TestTotalLoss:
    def test_decomposition(self, rng):
        out = make_output(rng, 2, 5)
        tg = [make_targets(rng, 2), make_targets(rng, 1)]
        loss, rep = total_loss(out, tg, KCONST)
        assert abs(rep.weighted_total() - rep.total) <= 1e-9
        assert abs(float(loss) - rep.total) <= 1e-9
        assert set(rep.terms) == {"enc", "human0", "human1", "hk0", "hk1"}
        assert "L_k_l1" not in rep.terms["human0"] and "L_k_l1" in rep.terms["hk0"]

    def test_gt_permutation_invariance(self, rng):
        out = make_output(rng, 1, 6)
        tg = make_targets(rng, 3)
        loss_a, rep_a = total_loss(out, [tg], KCONST)
        perm = [2, 0, 1]
        loss_b, rep_b = total_loss(out, [tg.permute(perm)], KCONST)
        assert abs(float(loss_a) - float(loss_b)) <= 1e-9
        pa = dict((g, p) for p, g in rep_a.matches["hk1"][0].pairs)
        pb = dict((g, p) for p, g in rep_b.matches["hk1"][0].pairs)
        assert all(pb[new] == pa[old] for new, old in enumerate(perm))

    def test_empty_image(self, rng):
        out = make_output(rng, 1, 4)
        _, rep = total_loss(out, [make_targets(rng, 0)], KCONST)
        for layer in rep.terms.values():
            assert layer["L_c"] > 0
            assert layer["L_h_l1"] == 0 and layer["L_h_giou"] == 0
            assert layer.get("L_k_l1", 0) == 0 and layer.get("L_k_oks", 0) == 0

    def test_perfect_predictions(self, rng):
        tg = make_targets(rng, 2)
        P = 2

        def layer(kind, with_kp):
            logits = torch.full((1, P), -40.0, dtype=torch.float64)
            logits[0, :2] = 40.0
            return LayerOutput(kind, logits, tg.boxes[None].clone(), tg.keypoints[None].clone() if with_kp else None)
        out = DetectionOutput(layer("enc", False), [layer("human", False)] * 2, [layer("hk", True)] * 4)
        loss, _ = total_loss(out, [tg], KCONST)
        assert float(loss) < 1e-9

    def test_human_det_supervision_off(self, rng):
        out = make_output(rng, 1, 4)
        tg = [make_targets(rng, 2)]
        _, rep = total_loss(out, tg, KCONST, human_det_supervision=False)
        assert set(rep.terms) == {"enc", "hk0", "hk1"}

    def test_record_keys(self, rng):
        out = make_output(rng, 1, 4)
        _, rep = total_loss(out, [make_targets(rng, 1)], KCONST)
        rec = rep.as_record()
        assert rec["total"] == rep.total
        assert {"hk0/L_h", "hk0/L_c", "hk0/L_k_l1", "hk0/L_k_oks", "human1/L_h"} <= set(rec)

    def test_criterion_weights(self, rng):
        out = make_output(rng, 1, 4)
        tg = [make_targets(rng, 2)]
        base, _ = SetCriterion(KCONST)(out, tg)
        doubled, rep = SetCriterion(KCONST, LossWeights(omega=20.0))(out, tg)
        extra = sum(t["L_k_l1"] for t in rep.terms.values() if "L_k_l1" in t) * 10.0
        assert float(doubled) == pytest.approx(float(base) + extra, rel=1e-9)
