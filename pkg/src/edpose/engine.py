"""Training, prediction, evaluation and checkpoint handling."""

from __future__ import annotations

import io
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ConfigError, RunConfig, parse_config, serialize_config
from .data import AugmentConfig, ImageSample, augment, batcher, build_dataset, resize, spec_from_config
from .data.augment import shorter_side_size
from .data.coco import SchemaError, read_image
from .evaluation import Detection, EvalConfig, EvalResult, evaluate
from .losses import SetCriterion
from .model import EDPose
from .skeletons import get_skeleton

log = logging.getLogger(__name__)

SIZE_DIVISOR = 32
CHECKPOINT_VERSION = 1


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, image_ids: list, dump_path: Path | None):
        self.step, self.image_ids, self.dump_path = step, image_ids, dump_path
        super().__init__(f"non-finite loss at step {step} on batch {image_ids}"
                         + (f" (dump: {dump_path})" if dump_path else ""))


class CheckpointError(IOError):
    pass


def oks_constants(cfg: RunConfig) -> tuple[float, ...]:
    """Per-keypoint falloff constants named by ``data.oks_constants``.

    "coco" uses the dataset layout's (2 * sigma) values; "uniform:<k>" uses
    the same constant for every keypoint.
    """
    spec = cfg.data.oks_constants.strip()
    K = cfg.model.num_keypoints
    if spec == "coco":
        return get_skeleton(K).oks_constants()
    if spec.startswith("uniform:"):
        try:
            k = float(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"data.oks_constants: bad value {spec!r}") from None
        if k <= 0:
            raise ConfigError("data.oks_constants: uniform constant must be positive")
        return (k,) * K
    raise ConfigError(f"data.oks_constants: unknown value {spec!r}")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def build_model(cfg: RunConfig, seed: int | None = None) -> EDPose:
    torch.manual_seed(cfg.optim.seed if seed is None else seed)
    return EDPose(cfg.model)


def load_split(cfg: RunConfig, split: str) -> list[ImageSample]:
    samples = build_dataset(spec_from_config(cfg.data, cfg.model.num_keypoints, split))
    for s in samples[:1]:
        for inst in s.instances[:1]:
            if inst.keypoints.num_keypoints != cfg.model.num_keypoints:
                raise SchemaError(f"dataset has {inst.keypoints.num_keypoints} keypoints, "
                                  f"model expects {cfg.model.num_keypoints}")
    return samples


# -- checkpoints -------------------------------------------------------------

def _rng_state() -> dict:
    return {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()}


def save_checkpoint(path: str | Path, model: EDPose, cfg: RunConfig, epoch: int, step: int,
                    extra: dict | None = None) -> None:
    state = {
        "version": CHECKPOINT_VERSION,
        "model": model.state_dict(),
        "config": serialize_config(cfg),
        "epoch": epoch,
        "step": step,
        "rng": _rng_state(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[EDPose, RunConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupted or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(state, dict) or state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not an edpose checkpoint")
    cfg = parse_config(state["config"])
    model = EDPose(cfg.model)
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg, state


# -- prediction and evaluation ----------------------------------------------

@torch.no_grad()
def predict_samples(model: EDPose, samples: Sequence[ImageSample], batch_size: int = 4,
                    max_detections: int | None = None, score_threshold: float = 0.0) -> dict:
    """Detections per image id, in each image's own normalized frame, best first."""
    model.eval()
    out = {}
    for batch in batcher(samples, batch_size, size_divisor=SIZE_DIVISOR):
        pred = model.predict(batch.images, batch.valid_mask)
        ratios = batch.ratios()
        for b, sample in enumerate(batch.samples):
            r = ratios[b]
            scores = pred["scores"][b].double().numpy()
            order = np.argsort(-scores, kind="stable")
            if max_detections:
                order = order[:max_detections]
            kps = pred["keypoints"][b].double().numpy() / r
            boxes = pred["boxes"][b].double().numpy() / np.concatenate([r, r])
            kboxes = pred["keypoint_boxes"][b].double().numpy() / np.concatenate([r, r])
            dets = []
            for i in order:
                if scores[i] < score_threshold:
                    break
                dets.append(Detection(float(scores[i]), kps[i], boxes[i], kboxes[i]))
            out[sample.image_id] = dets
    return out


def evaluate_model(model: EDPose, cfg: RunConfig, samples: Sequence[ImageSample],
                   batch_size: int | None = None) -> EvalResult:
    """OKS AP of ``model`` on ``samples`` (distances measured in image pixels)."""
    preds = predict_samples(model, samples, batch_size or cfg.optim.batch_size, cfg.eval.max_detections)
    gt = {s.image_id: s.instances for s in samples}
    sizes = {s.image_id: s.size for s in samples}
    return evaluate(preds, gt, oks_constants(cfg), EvalConfig(max_detections=cfg.eval.max_detections),
                    image_sizes=sizes)


def prepare_image(image: np.ndarray, cfg: RunConfig) -> ImageSample:
    """Resize an HxWx3 float image the way training does and wrap it as a sample."""
    H, W = image.shape[:2]
    base = ImageSample(image, [], "input")
    shorter = cfg.data.image_size if cfg.data.source == "synthetic" else cfg.data.resize_max
    size = shorter_side_size(W, H, shorter, max(shorter, cfg.data.max_size), SIZE_DIVISOR)
    return resize(base, size) if size != (W, H) else base


def infer_image(model: EDPose, cfg: RunConfig, image_path: str | Path,
                score_threshold: float = 0.0) -> list[dict]:
    """Instances above ``score_threshold`` in original-image pixels.  No NMS or other filtering."""
    try:
        image = read_image(image_path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {image_path}: {exc}") from None
    H, W = image.shape[:2]
    sample = prepare_image(image, cfg)
    dets = predict_samples(model, [sample], 1, None, score_threshold)["input"]
    scale4 = np.array([W, H, W, H], dtype=np.float64)
    out = []
    for d in dets:
        out.append({
            "score": d.score,
            "box": (d.box * scale4).tolist(),
            "keypoints": (d.keypoints * np.array([W, H])).tolist(),
            "keypoint_boxes": (d.keypoint_boxes * scale4).tolist(),
        })
    return out


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: EDPose
    steps: int
    epochs: int
    losses: list[float]
    final_eval: EvalResult | None
    best_ap: float | None


def _lr_at(cfg: RunConfig, epoch: int) -> float:
    o = cfg.optim
    return o.lr * (o.lr_decay_factor if epoch >= o.lr_decay_epoch else 1.0)


def _dump_batch(out_dir: Path | None, step: int, batch, report_terms) -> Path | None:
    if out_dir is None:
        return None
    path = out_dir / "nonfinite_batch.json"
    path.write_text(json.dumps({"step": step, "image_ids": [str(i) for i in batch.image_ids],
                                "canvas": list(batch.canvas_size), "terms": report_terms}, indent=2))
    return path


def train(cfg: RunConfig, out_dir: str | Path | None = None, *, deterministic: bool = False,
          train_samples: Sequence[ImageSample] | None = None,
          val_samples: Sequence[ImageSample] | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``cfg`` and, with ``out_dir``, write metrics.jsonl, eval.jsonl and checkpoints.

    The run stops after ``optim.epochs`` epochs or ``optim.max_steps`` steps,
    whichever comes first (max_steps 0 means no cap).
    """
    cfg.validate()
    set_deterministic(deterministic)
    seed = cfg.optim.seed
    seed_everything(seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(serialize_config(cfg))
    train_samples = list(train_samples) if train_samples is not None else load_split(cfg, "train")
    if not train_samples:
        raise SchemaError("training split is empty")
    if val_samples is None:
        val_samples = train_samples if cfg.data.source == "synthetic" and cfg.data.n_val_images == 0 \
            else load_split(cfg, "val")
    model = build_model(cfg, seed)
    model.train()
    criterion = SetCriterion.from_config(cfg.loss, oks_constants(cfg))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    flip_index = get_skeleton(cfg.model.num_keypoints).flip_index()
    aug_cfg = AugmentConfig(cfg.data.flip_prob, cfg.data.crop_prob, resize_min=cfg.data.resize_min,
                            resize_max=cfg.data.resize_max, max_size=cfg.data.max_size,
                            size_step=SIZE_DIVISOR)
    aug_rng = np.random.default_rng([seed, 7])
    K = cfg.model.num_keypoints
    max_steps = cfg.optim.max_steps or math.inf

    metrics_fh = open(out / "metrics.jsonl", "w") if out else None
    eval_fh = open(out / "eval.jsonl", "w") if out else None
    losses: list[float] = []
    best_ap, final_eval = None, None
    step, epoch = 0, 0

    def run_eval():
        nonlocal best_ap, final_eval
        if not val_samples:
            return
        res = evaluate_model(model, cfg, val_samples)
        model.train()
        final_eval = res
        rec = {"step": step, "epoch": epoch, **res.to_dict()}
        if eval_fh:
            eval_fh.write(json.dumps(rec) + "\n")
            eval_fh.flush()
        if best_ap is None or res.ap > best_ap:
            best_ap = res.ap
            if out:
                save_checkpoint(out / "best.pt", model, cfg, epoch, step, {"ap": res.ap})

    try:
        while epoch < cfg.optim.epochs and step < max_steps:
            for g in opt.param_groups:
                g["lr"] = _lr_at(cfg, epoch)
            epoch_samples = train_samples
            if cfg.data.augment:
                epoch_samples = [augment(s, aug_rng, flip_index, aug_cfg) for s in train_samples]
            for batch in batcher(epoch_samples, cfg.optim.batch_size, shuffle_seed=seed * 100_003 + epoch,
                                 size_divisor=SIZE_DIVISOR):
                if step >= max_steps:
                    break
                output = model(batch.images, batch.valid_mask)
                loss, report = criterion(output, batch.targets(K))
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(step, batch.image_ids, _dump_batch(out, step, batch, report.terms))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.optim.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
                opt.step()
                step += 1
                losses.append(report.total)
                rec = {"step": step, "epoch": epoch, "lr": opt.param_groups[0]["lr"], **report.as_record()}
                if metrics_fh:
                    metrics_fh.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(rec)
                if cfg.optim.eval_every and step % cfg.optim.eval_every == 0:
                    run_eval()
            epoch += 1
        if not (cfg.optim.eval_every and step % cfg.optim.eval_every == 0):
            run_eval()
        if out:
            save_checkpoint(out / "last.pt", model, cfg, epoch, step)
            if best_ap is None:
                save_checkpoint(out / "best.pt", model, cfg, epoch, step)
    finally:
        if metrics_fh:
            metrics_fh.close()
        if eval_fh:
            eval_fh.close()
        if deterministic:
            torch.use_deterministic_algorithms(False)
    model.eval()
    return TrainResult(model, step, epoch, losses, final_eval, best_ap)


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
