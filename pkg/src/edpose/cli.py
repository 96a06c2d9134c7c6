"""Command line entry point: ``edpose {train,eval,infer,ablate}``.

Errors print one line ``error[E_CODE]: message`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, desk_config, load_config
from .data.coco import CocoFormatError, SchemaError
from .evaluation import MetricError

EXIT_CODES = {"E_USAGE": 2, "E_CONFIG": 3, "E_CHECKPOINT": 4, "E_SCHEMA": 5, "E_IO": 6,
              "E_NONFINITE": 7, "E_METRIC": 8}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "max_steps", None) is not None:
        over["max_steps"] = args.max_steps
    if getattr(args, "batch_size", None) is not None:
        over["batch_size"] = args.batch_size
    return cfg.replace(optim=over).validate() if over else cfg


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def cmd_train(args) -> int:
    from .engine import read_jsonl, train
    from .plotting import plot_loss_curve

    cfg = _load_cfg(args)
    out = Path(args.out)
    res = train(cfg, out, deterministic=args.deterministic)
    records = read_jsonl(out / "metrics.jsonl")
    if records:
        plot_loss_curve(records, out / "loss_curve.png")
    summary = {"steps": res.steps, "epochs": res.epochs,
               "final_loss": res.losses[-1] if res.losses else None,
               "metrics": res.final_eval.to_dict() if res.final_eval else None,
               "checkpoint": str(out / "last.pt")}
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    from .engine import evaluate_model, load_checkpoint, load_split

    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.dataset:
        cfg = cfg.replace(data={"source": "coco_json", "path": args.dataset, "val_path": args.dataset,
                                "image_root": args.image_root or ""})
    if args.max_detections is not None:
        cfg = cfg.replace(eval={"max_detections": args.max_detections})
    samples = load_split(cfg, args.split)
    result = evaluate_model(model, cfg, samples).to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    _emit(result)
    return 0


def cmd_infer(args) -> int:
    from .engine import infer_image, load_checkpoint
    from .skeletons import get_skeleton

    model, cfg, _ = load_checkpoint(args.checkpoint)
    threshold = cfg.eval.score_threshold if args.score_threshold is None else args.score_threshold
    instances = infer_image(model, cfg, args.image, threshold)
    doc = {"image": str(args.image), "score_threshold": threshold, "instances": instances}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    if args.render:
        from .data.coco import read_image
        from .plotting import render_overlay

        target = Path(args.render_path) if args.render_path else Path(args.image).with_suffix(".overlay.png")
        render_overlay(read_image(args.image), instances, target, get_skeleton(cfg.model.num_keypoints).limbs)
        doc["overlay"] = str(target)
    _emit(doc)
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = _load_cfg(args)
    report = run_ablation(cfg, args.out, args.mode, args.steps, args.deterministic,
                          evaluate=not args.no_eval, log=lambda s: print(s, file=sys.stderr))
    _emit({"mode": report["mode"], "distinct_trajectories": report["distinct_trajectories"],
           "variants": [{k: v for k, v in r.items() if k != "losses"} for r in report["variants"]],
           "report": str(Path(args.out) / "ablation.json")})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edpose", description="End-to-end multi-person pose estimation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="INI run configuration (default: built-in desk preset)")
        if seeds:
            sp.add_argument("--seed", type=int, help="override optim.seed")
            sp.add_argument("--deterministic", action="store_true",
                            help="deterministic kernels, single thread")
            sp.add_argument("--max-steps", type=int, help="override optim.max_steps")
            sp.add_argument("--batch-size", type=int, help="override optim.batch_size")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--dataset", help="COCO keypoints JSON (default: the checkpoint's data section)")
    e.add_argument("--image-root")
    e.add_argument("--max-detections", type=int)
    e.add_argument("--out", help="write the metrics JSON here too")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="run a checkpoint on one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--score-threshold", type=float)
    i.add_argument("--render", action="store_true", help="also write an overlay image")
    i.add_argument("--render-path", help="overlay path (default: <image>.overlay.png)")
    i.add_argument("--out", help="write the instance JSON here too")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="size-init / mask / M sweeps")
    common(a)
    a.add_argument("--out", required=True)
    a.add_argument("--mode", default="tables", choices=("tables", "grid"))
    a.add_argument("--steps", type=int, help="training steps per variant")
    a.add_argument("--no-eval", action="store_true", help="skip the per-variant AP evaluation")
    a.set_defaults(func=cmd_ablate)
    return p


def _classify(exc: BaseException) -> str:
    from .engine import CheckpointError, NonFiniteLoss

    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, ConfigError):
        return "E_CONFIG"
    if isinstance(exc, CheckpointError):
        return "E_CHECKPOINT"
    if isinstance(exc, (SchemaError, CocoFormatError)):
        return "E_SCHEMA"
    if isinstance(exc, NonFiniteLoss):
        return "E_NONFINITE"
    if isinstance(exc, MetricError):
        return "E_METRIC"
    if isinstance(exc, OSError):
        return "E_IO"
    return ""


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except Exception as exc:
        code = _classify(exc)
        if not code:
            raise
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"error[{code}]: {msg}\n")
        return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
