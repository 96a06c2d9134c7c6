"""Acceptance suite.  Each test prints one ``criterion N: PASS|FAIL`` line.

Criteria 6 to 9 train models and are marked slow (about 1.5 hours in total on
one CPU core); deselect them with ``-m "not slow"``.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from edpose.ablation import variants
from edpose.cli import main
from edpose.config import desk_config, serialize_config
from edpose.encoder import DeformableAttnConfig, MSDeformAttn, tokenize
from edpose.engine import build_model, load_split, oks_constants, read_jsonl, train
from edpose.geometry import KeypointSet, OksParams, eval_oks, giou, oks_similarity
from edpose.hk_decoder import HKLayout, MaskStrategy, build_interaction_mask
from edpose.losses import SetCriterion, focal_loss, total_loss
from edpose.matching import hungarian_match
from edpose.model import DetectionOutput, EDPose, LayerOutput
from edpose.config import ModelConfig

from oracles import brute_force_assignment, central_difference, enumerate_mask, relative_error


# -- 1. matcher oracle --------------------------------------------------------

def test_criterion_1_matcher_oracle(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        P, G = rng.integers(1, 7, size=2)
        cost = rng.uniform(-5, 5, (P, G))
        got = hungarian_match(cost)
        want, want_cost = brute_force_assignment(cost)
        got_cost = sum(cost[r, g] for r, g in sorted(got.pairs, key=lambda t: t[1]))
        if sorted(got.pairs, key=lambda t: t[1]) != want or got_cost != want_cost:
            mismatches += 1
    dt = time.perf_counter() - t0
    verdict(1, mismatches == 0 and dt < 10, f"mismatches={mismatches} runtime={dt:.2f}s")


# -- 2. mask oracle -----------------------------------------------------------

def test_criterion_2_mask_oracle(verdict):
    t0 = time.perf_counter()
    bad = 0
    for strategy in MaskStrategy:
        for M in range(1, 9):
            for K in range(1, 9):
                got = build_interaction_mask(M, K, strategy).numpy()
                bad += not np.array_equal(got, enumerate_mask(M, K, strategy.value))
    m22 = build_interaction_mask(2, 2, "ours")
    allowed, blocked = int(m22.sum()), int((~m22).sum())
    dt = time.perf_counter() - t0
    verdict(2, bad == 0 and (allowed, blocked) == (20, 16) and dt < 5,
            f"mismatched={bad} M2K2 allowed/blocked={allowed}/{blocked} runtime={dt:.2f}s")


# -- 3. analytic values -------------------------------------------------------

def test_criterion_3_analytic_values(verdict):
    def kps(xy, vis=None):
        xy = np.asarray(xy, float)
        return KeypointSet.from_arrays(xy, np.full(len(xy), 2) if vis is None else vis)

    s2, k = 0.2, 0.3
    l1 = 2 * s2 * k ** 2
    checks = {
        "giou identical": (giou((0, 0, 1, 1), (0, 0, 1, 1)), 1.0),
        "giou disjoint": (giou((0, 0, 1, 1), (2, 2, 3, 3)), -7 / 9),
        "giou overlap": (giou((0, 0, 2, 2), (1, 1, 3, 3)), 1 / 7 - 2 / 9),
        "focal confident positive": (focal_loss(40.0, True), 0.0),
        "focal p=0.5 positive": (focal_loss(0.0, True), -0.25 * 0.25 * math.log(0.5)),
        "focal p=0.5 negative": (focal_loss(0.0, False), -0.75 * 0.25 * math.log(0.5)),
        "oks identical": (oks_similarity(kps([[0.1, 0.2], [0.5, 0.5]]), kps([[0.1, 0.2], [0.5, 0.5]]),
                                         OksParams((0.1, 0.2), 0.3)), 1.0),
        "oks unit exponent": (oks_similarity(kps([[0.5 + l1 / 2, 0.5 + l1 / 2]]), kps([[0.5, 0.5]]),
                                             OksParams((k,), s2)), math.exp(-1)),
        "eval oks identical": (eval_oks(kps([[0.3, 0.3]]), kps([[0.3, 0.3]]), s2, (k,)), 1.0),
        "eval oks unit exponent": (eval_oks(kps([[0.5 + math.sqrt(l1), 0.5]]), kps([[0.5, 0.5]]), s2, (k,)),
                                   math.exp(-1)),
    }
    worst = max(abs(got - want) for got, want in checks.values())
    failed = [name for name, (got, want) in checks.items() if abs(got - want) >= 1e-6]
    verdict(3, not failed, f"max abs error={worst:.2e}" + (f" failed={failed}" if failed else ""))


# -- 4. gradient checks -------------------------------------------------------

def _toy_output(rng, B=2, P=5, K=3):
    def layer(kind, with_kp):
        logits = torch.tensor(rng.normal(0, 1, (B, P)))
        boxes = torch.tensor(np.concatenate([rng.uniform(0.25, 0.75, (B, P, 2)),
                                             rng.uniform(0.1, 0.4, (B, P, 2))], -1))
        kp = torch.tensor(rng.uniform(0.1, 0.9, (B, P, K, 2))) if with_kp else None
        return LayerOutput(kind, logits, boxes, kp)
    return DetectionOutput(layer("enc", False), [layer("human", False) for _ in range(2)],
                           [layer("hk", True) for _ in range(2)])


def _toy_targets(rng, n=2, K=3):
    from edpose.losses import InstanceTargets
    c = rng.uniform(0.3, 0.7, (n, 2))
    wh = rng.uniform(0.15, 0.3, (n, 2))
    kp = c[:, None] + rng.uniform(-0.5, 0.5, (n, K, 2)) * wh[:, None]
    return InstanceTargets(torch.tensor(np.concatenate([c, wh], 1)), torch.tensor(kp),
                           torch.full((n, K), 2), torch.tensor(wh.prod(1)))


def _loss_input_error() -> float:
    rng = np.random.default_rng(7)
    out = _toy_output(rng)
    targets = [_toy_targets(rng), _toy_targets(rng)]
    kconst = (0.4, 0.5, 0.6)
    leaves = []
    for _, layer in out.supervised_layers():
        leaves += [layer.logits, layer.boxes] + ([layer.keypoints] if layer.keypoints is not None else [])
    flat = torch.cat([t.reshape(-1) for t in leaves]).numpy().copy()

    def unpack(vec):
        tensors, i = [], 0
        for t in leaves:
            tensors.append(torch.as_tensor(vec[i:i + t.numel()]).view_as(t))
            i += t.numel()
        return tensors

    def rebuild(tensors):
        it = iter(tensors)
        layers = []
        for kind, layer in out.supervised_layers():
            lg, bx = next(it), next(it)
            kp = next(it) if layer.keypoints is not None else None
            layers.append(LayerOutput(layer.kind, lg, bx, kp))
        return DetectionOutput(layers[0], layers[1:3], layers[3:])

    def f(vec):
        loss, _ = total_loss(rebuild(unpack(vec)), targets, kconst)
        return float(loss)

    x = torch.tensor(flat, requires_grad=True)
    loss, _ = total_loss(rebuild(unpack(x)), targets, kconst)
    loss.backward()
    return relative_error(x.grad.numpy(), central_difference(f, flat.copy()))


def _model_parameter_error() -> float:
    cfg = desk_config().replace(
        model={"d_model": 32, "num_queries": 12, "num_select": 4, "n_heads": 4, "n_points": 2,
               "d_ffn": 64, "enc_layers": 1},
        data={"n_images": 2, "people_min": 2, "people_max": 2, "image_size": 64})
    samples = load_split(cfg, "train")
    assert all(len(s.instances) == 2 for s in samples)
    from edpose.data import batcher
    batch = next(iter(batcher(samples, 2, size_divisor=32)))
    images = batch.images.double()
    targets = [t.to(dtype=torch.float64) for t in batch.targets(cfg.model.num_keypoints, torch.float64)]
    torch.manual_seed(5)
    model = EDPose(cfg.model).double()
    criterion = SetCriterion.from_config(cfg.loss, oks_constants(cfg))
    rng = np.random.default_rng(3)
    # Reference boxes are detached between layers, so autograd and finite
    # differences only agree for parameters whose every path to the loss avoids
    # a detached tensor: all of the last HK layer plus every class head.
    last = f"hk_decoder.layers.{cfg.model.hk_layers - 1}."
    picks = []
    named = dict(model.named_parameters())
    for name in sorted(named):
        if not (name.startswith(last) or "class_head" in name):
            continue
        p = named[name]
        for _ in range(2 if p.numel() > 1 else 1):
            picks.append((name, tuple(int(rng.integers(0, s)) for s in p.shape)))

    def loss_value():
        loss, _ = criterion(model(images, batch.valid_mask), targets)
        return loss

    model.zero_grad()
    loss_value().backward()
    analytic = np.array([named[n].grad[i].item() for n, i in picks])
    numeric = np.zeros(len(picks))
    eps = 1e-6
    with torch.no_grad():
        for j, (n, i) in enumerate(picks):
            p = named[n]
            old = p[i].item()
            p[i] = old + eps
            fp = float(loss_value())
            p[i] = old - eps
            fm = float(loss_value())
            p[i] = old
            numeric[j] = (fp - fm) / (2 * eps)
    return relative_error(analytic, numeric), len(picks)


def _deformable_error() -> float:
    g = torch.Generator().manual_seed(11)
    D = 16
    cfg = DeformableAttnConfig(n_heads=2, n_points=2, n_levels=2)
    attn = MSDeformAttn(D, cfg).double()
    with torch.no_grad():
        for p in attn.parameters():
            p.normal_(0, 0.3, generator=g)
    maps = [torch.randn(1, D, 6, 6, generator=g, dtype=torch.float64),
            torch.randn(1, D, 3, 3, generator=g, dtype=torch.float64)]
    feats = tokenize(maps)
    ref = torch.tensor([[[0.45, 0.55, 0.3, 0.4], [0.6, 0.3, 0.25, 0.2]]], dtype=torch.float64)
    query = torch.randn(1, 2, D, generator=g, dtype=torch.float64)
    proj = torch.randn(1, 2, D, generator=g, dtype=torch.float64)
    tokens = feats.tokens.clone()
    shapes = [query.shape, tokens.shape]

    def f_t(q, tok):
        return (attn(q, ref, feats, value_tokens=tok) * proj).sum()

    def f(vec):
        q = torch.as_tensor(vec[:query.numel()]).view(shapes[0])
        tok = torch.as_tensor(vec[query.numel():]).view(shapes[1])
        with torch.no_grad():
            return float(f_t(q, tok))

    q, tok = query.clone().requires_grad_(True), tokens.clone().requires_grad_(True)
    f_t(q, tok).backward()
    analytic = np.concatenate([q.grad.numpy().ravel(), tok.grad.numpy().ravel()])
    flat = np.concatenate([query.numpy().ravel(), tokens.numpy().ravel()])
    err_inputs = relative_error(analytic, central_difference(f, flat.copy()))

    w = attn.sampling_offsets.weight
    attn.zero_grad()
    f_t(query, tokens).backward()
    grad_w = w.grad.numpy().copy()

    def f_w(x):
        with torch.no_grad():
            old = w.detach().clone()
            w.copy_(torch.as_tensor(x))
            v = float(f_t(query, tokens))
            w.copy_(old)
        return v
    err_offsets = relative_error(grad_w, central_difference(f_w, w.detach().numpy().copy()))
    return max(err_inputs, err_offsets)


def test_criterion_4_gradient_checks(verdict):
    t0 = time.perf_counter()
    e_loss = _loss_input_error()
    e_model, n = _model_parameter_error()
    e_deform = _deformable_error()
    dt = time.perf_counter() - t0
    ok = max(e_loss, e_model, e_deform) < 1e-4 and dt < 120
    verdict(4, ok, f"loss inputs {e_loss:.1e}, undetached model params ({n} sampled) {e_model:.1e}, "
                   f"deformable attention {e_deform:.1e}, runtime={dt:.1f}s")


# -- 5. shapes and structure --------------------------------------------------

def test_criterion_5_structure(verdict):
    cfg = ModelConfig()                                 # paper-scale defaults
    torch.manual_seed(0)
    model = EDPose(cfg).eval()
    captured = {}

    def grab(module, args):
        captured.setdefault("args", args)
    hook = model.hk_decoder.layers[0].interactive_attn.register_forward_pre_hook(grab)
    images = torch.rand(1, 3, 256, 256, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        out = model(images)
    hook.remove()
    M, K = cfg.num_select, cfg.num_keypoints
    x, pos, allowed = captured["args"][:3]
    rows = x.shape[1]
    with torch.no_grad():
        w = model.hk_decoder.layers[0].interactive_attn.attention_weights(x, pos, allowed)
    blocked_max = float(w[..., ~allowed].abs().max())
    row_err = float((w.sum(-1) - 1).abs().max())

    small = desk_config().replace(data={"n_images": 1})
    sample = load_split(small, "train")
    from edpose.data import batcher
    batch = next(iter(batcher(sample, 1, size_divisor=32)))
    _, rep = SetCriterion.from_config(small.loss, oks_constants(small))(
        build_model(small)(batch.images, batch.valid_mask), batch.targets(small.model.num_keypoints))
    human = [n for n in rep.terms if n.startswith("human")]
    hk = [n for n in rep.terms if n.startswith("hk")]
    terms_ok = all(set(rep.terms[n]) == {"L_c", "L_h_l1", "L_h_giou"} for n in human) and \
        all(set(rep.terms[n]) == {"L_c", "L_h_l1", "L_h_giou", "L_k_l1", "L_k_oks"} for n in hk)

    ok = (HKLayout(M, K).num_rows == 1800 and rows == 1800 and M + M * K == 1800
          and len(out.human_layers) == 2 and len(out.hk_layers) == 4
          and out.final.keypoints.shape == (1, M, K, 2)
          and len(human) == 2 and len(hk) == 4 and terms_ok
          and blocked_max == 0.0 and row_err < 1e-6)
    verdict(5, ok, f"rows={rows} human/hk layers={len(out.human_layers)}/{len(out.hk_layers)} "
                   f"supervised={len(human)}+{len(hk)} blocked max={blocked_max} row sum err={row_err:.1e}")


# -- 6. synthetic overfit -----------------------------------------------------

@pytest.mark.slow
def test_criterion_6_synthetic_overfit(verdict, tmp_path, capsys):
    cfg = desk_config()
    assert cfg.data.n_images == 16 and (cfg.data.people_min, cfg.data.people_max) == (2, 3)
    assert cfg.optim.max_steps <= 2000
    t0 = time.perf_counter()
    run = tmp_path / "overfit"
    assert main(["train", "--out", str(run)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "last.pt"), "--split", "train"]) == 0
    metrics = json.loads(capsys.readouterr().out)
    dt = time.perf_counter() - t0
    steps = len(read_jsonl(run / "metrics.jsonl"))
    verdict(6, metrics["ap"] >= 0.90 and steps <= 2000 and dt < 3 * 3600,
            f"train-split ap={metrics['ap']:.4f} (ap50={metrics['ap50']:.3f}, ap75={metrics['ap75']:.3f}) "
            f"steps={steps} runtime={dt / 60:.1f}min")


# -- 7. human-detection supervision helps -------------------------------------

@pytest.mark.slow
def test_criterion_7_human_supervision(verdict):
    base = desk_config().replace(data={"n_images": 64}, optim={"max_steps": 800})
    samples = load_split(base, "train")
    assert len(samples) == 64
    rows = []
    for seed in (0, 1, 2):
        aps = []
        for sup in (True, False):
            cfg = base.replace(optim={"seed": seed}, loss={"human_det_supervision": sup})
            res = train(cfg, train_samples=samples, val_samples=samples)
            assert res.steps == 800
            aps.append(res.final_eval.ap)
        rows.append(aps)
        print(f"  seed {seed}: with={aps[0]:.4f} without={aps[1]:.4f}", flush=True)
    ok = all(w > wo for w, wo in rows)
    verdict(7, ok, "; ".join(f"seed {s}: {w:.3f} vs {wo:.3f}" for s, (w, wo) in enumerate(rows)))


# -- 8. ablation harness ------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_ablation(verdict, tmp_path, capsys):
    cfg = desk_config().replace(model={"num_select": 100, "num_queries": 200}, optim={"batch_size": 1})
    ini = tmp_path / "ablate.ini"
    ini.write_text(serialize_config(cfg))
    out = tmp_path / "ablation"
    code = main(["ablate", "--config", str(ini), "--out", str(out), "--steps", "8"])
    capsys.readouterr()
    report = json.loads((out / "ablation.json").read_text())
    names = [r["name"] for r in report["variants"]]
    want = [v.name for v in variants("tables", "learned", "ours", 100)]
    covered = ({r["size_init"] for r in report["variants"]} == {"none", "min", "max", "ffn", "learned"}
               and {r["mask_strategy"] for r in report["variants"]} == {"full", "no_hk", "no_hh", "ours"}
               and {r["num_select"] for r in report["variants"]} == {50, 100, 200})
    ok = (code == 0 and names == want and covered and report["distinct_trajectories"]
          and all("metrics" in r and len(r["losses"]) == 8 for r in report["variants"])
          and (out / "ablation.png").exists())
    verdict(8, ok, f"{len(names)} variants, distinct trajectories={report['distinct_trajectories']}")


# -- 9. determinism -----------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_determinism(verdict, tmp_path, capsys):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--deterministic", "--seed", "17", "--max-steps", "40", "--out", str(out)]) == 0
        runs.append(out)
    capsys.readouterr()
    ra, rb = (read_jsonl(r / "metrics.jsonl") for r in runs)
    same_keys = len(ra) == len(rb) == 40 and all(a.keys() == b.keys() for a, b in zip(ra, rb))
    worst = max(abs(a[k] - b[k]) for a, b in zip(ra, rb) for k in a) if same_keys else math.inf
    ea, eb = (read_jsonl(r / "eval.jsonl") for r in runs)
    eval_same = ea == eb
    ckpt_same = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in ("last.pt", "best.pt"))
    verdict(9, same_keys and worst <= 1e-6 and eval_same and ckpt_same,
            f"max metric diff={worst:.1e} eval logs equal={eval_same} checkpoints bit-identical={ckpt_same}")
