"""Sweeps over keypoint-box size initialization, interaction mask and query budget M."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .engine import load_split, train
from .plotting import plot_ablation

SIZE_INITS = ("none", "min", "max", "ffn", "learned")
MASKS = ("full", "no_hk", "no_hh", "ours")
SELECT_COUNTS = (50, 100, 200)


@dataclass(frozen=True)
class Variant:
    name: str
    size_init: str
    mask_strategy: str
    num_select: int

    def apply(self, cfg: RunConfig) -> RunConfig:
        m = cfg.model
        return cfg.replace(model={"size_init": self.size_init, "mask_strategy": self.mask_strategy,
                                  "num_select": self.num_select,
                                  "num_queries": max(m.num_queries, self.num_select)})


def variants(mode: str = "tables", base_size: str = "learned", base_mask: str = "ours",
             base_select: int = 100) -> list[Variant]:
    """``tables`` varies one factor at a time around the base; ``grid`` takes the full product."""
    if mode == "grid":
        return [Variant(f"size={s},mask={m},M={n}", s, m, n)
                for s, m, n in itertools.product(SIZE_INITS, MASKS, SELECT_COUNTS)]
    if mode != "tables":
        raise ValueError(f"unknown ablation mode {mode!r}")
    out = [Variant(f"size={s}", s, base_mask, base_select) for s in SIZE_INITS]
    out += [Variant(f"mask={m}", base_size, m, base_select) for m in MASKS if m != base_mask]
    out += [Variant(f"M={n}", base_size, base_mask, n) for n in SELECT_COUNTS if n != base_select]
    return out


def run_ablation(cfg: RunConfig, out_dir: str | Path, mode: str = "tables", steps: int | None = None,
                 deterministic: bool = False, evaluate: bool = True, log=print) -> dict:
    """Train every variant from the same seed on the same data and write ablation.json + a plot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if steps is not None:
        cfg = cfg.replace(optim={"max_steps": steps})
    cfg = cfg.replace(optim={"eval_every": 0})
    samples = load_split(cfg, "train")
    rows = []
    for v in variants(mode, cfg.model.size_init, cfg.model.mask_strategy, cfg.model.num_select):
        vcfg = v.apply(cfg).validate()
        t0 = time.time()
        res = train(vcfg, out / v.name.replace(",", "_").replace("=", "-"), deterministic=deterministic,
                    train_samples=samples, val_samples=samples if evaluate else [])
        row = {"name": v.name, "size_init": v.size_init, "mask_strategy": v.mask_strategy,
               "num_select": v.num_select, "num_queries": vcfg.model.num_queries, "steps": res.steps,
               "losses": res.losses, "final_loss": res.losses[-1] if res.losses else None,
               "seconds": round(time.time() - t0, 2)}
        if res.final_eval is not None:
            row["metrics"] = res.final_eval.to_dict()
        rows.append(row)
        if log:
            log(f"{v.name}: final loss {row['final_loss']:.4f}"
                + (f", ap {row['metrics']['ap']:.3f}" if "metrics" in row else ""))
    trajectories = [tuple(r["losses"]) for r in rows]
    report = {"mode": mode, "seed": cfg.optim.seed, "steps": cfg.optim.max_steps,
              "distinct_trajectories": len(set(trajectories)) == len(trajectories), "variants": rows}
    (out / "ablation.json").write_text(json.dumps(report, indent=2))
    ap = {r["name"]: r["metrics"]["ap"] for r in rows if "metrics" in r} or None
    plot_ablation({r["name"]: r["losses"] for r in rows}, out / "ablation.png", ap)
    return report
