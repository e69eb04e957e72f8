#!/usr/bin/env python3
"""Desk-scale multi-task run on 64x64 random-ellipse phantoms.

Trains one shared regularizer on radial masks at 10/20/30/40% sampling with
stair training, then reports test PSNR against zero-filling for every task.
Afterwards the feature network is frozen and a fresh task weight is fitted on
two unseen ratios (15% and 35%).

    python3 scripts/desk_experiment.py --out runs/desk
    python3 scripts/desk_experiment.py --out runs/quick --quick

Writes ``checkpoint/``, ``loss.csv``, ``summary.json`` and ``report.csv`` under
``--out``.  Roughly half an hour on a single laptop core at full size.
"""

import argparse
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from metaloa.meta import (
    TrainConfig,
    adapt_omega,
    make_batch,
    model_forward,
    stair_train,
    write_loss_csv,
)
from metaloa.metrics import MetricReport, write_report_csv
from metaloa.mri import gen_radial_mask, make_task, zero_fill

log = logging.getLogger("desk")


@dataclass
class DeskConfig:
    size: int = 64
    ratios: tuple = (0.1, 0.2, 0.3, 0.4)
    n_train: int = 20
    n_val: int = 10
    n_test: int = 5
    unseen: tuple = (0.15, 0.35)
    adapt_images: int = 10
    adapt_epochs: int = 30
    adapt_lr: float = 0.1
    # large steps and a round cap keep five stages inside the time budget
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr_theta=1e-2, lr_omega=1e-2, max_rounds=40, phase_cap=5, batch_train=1,
        batch_val=1, hvp_method="rev-rev", alpha0=1.0))
    seed: int = 0

    @classmethod
    def quick(cls) -> "DeskConfig":
        return cls(size=16, n_train=3, n_val=2, n_test=2, adapt_images=2, adapt_epochs=2,
                   train=TrainConfig(depth=2, width=2, max_rounds=2, phase_cap=2, batch_train=1,
                                     batch_val=1, lr_theta=1e-2, lr_omega=1e-2, alpha0=1.0))


def task_id(ratio: float) -> str:
    return f"radial{round(ratio * 100):02d}"


def build_tasks(cfg: DeskConfig, ratios, n_train, n_val, offset=0):
    return [
        make_task(task_id(r), gen_radial_mask(cfg.size, cfg.size, r, seed=cfg.seed + offset + i),
                  n_train, n_val, cfg.n_test, seed=cfg.seed + 100 + offset + i)
        for i, r in enumerate(ratios)
    ]


def reconstruct_test_split(ckpt, task, omega: float | None = None):
    """Zero-fill and model reconstructions of the task's test split."""
    b = make_batch([task], [range(task.x_test.shape[0])], "test")
    arrays = ckpt.arrays
    if omega is None:
        b.task[:] = ckpt.task_ids.index(task.task_id)
    else:
        arrays = dict(arrays, omega=torch.tensor([omega], dtype=torch.float64))
        b.task[:] = 0
    with torch.no_grad():
        recon = model_forward(arrays, ckpt.settings, b, ckpt.phase_count)
    return [zero_fill(y) for y in b.y], list(recon), list(b.x)


def mean_psnr(images, refs) -> float:
    rep = MetricReport()
    for x, ref in zip(images, refs):
        rep.add(x, ref)
    return float(np.mean(rep.psnr))


def run(cfg: DeskConfig, out: Path | None = None) -> dict:
    torch.manual_seed(cfg.seed)
    t0 = time.perf_counter()
    tasks = build_tasks(cfg, cfg.ratios, cfg.n_train, cfg.n_val)
    loss_log = []
    result = stair_train(tasks, cfg.train, loss_log=loss_log)
    ckpt = result.checkpoint
    train_s = time.perf_counter() - t0

    summary = {"phases": ckpt.phase_count, "stage_val_loss": result.stage_val_loss,
               "train_seconds": train_s, "tasks": {}, "adapted": {}}
    rows = []
    for t in tasks:
        zf, rec, ref = reconstruct_test_split(ckpt, t)
        z, m = mean_psnr(zf, ref), mean_psnr(rec, ref)
        summary["tasks"][t.task_id] = {"zero_fill_psnr": z, "model_psnr": m, "gain": m - z,
                                        "weight": ckpt.weight(t.task_id)}
        for name, imgs in (("zero-fill", zf), ("loa", rec)):
            rep = MetricReport()
            for x, r in zip(imgs, ref):
                rep.add(x, r)
            w = ckpt.weight(t.task_id) if name == "loa" else None
            rows += rep.rows(t.mask.achieved_ratio, "radial", f"{name}-{t.task_id}", w)
        log.info("%s: zero-fill %.2f dB, model %.2f dB", t.task_id, z, m)

    ref_task = task_id(cfg.ratios[0])
    unseen = build_tasks(cfg, cfg.unseen, cfg.adapt_images, 0, offset=50)
    for t in unseen:
        tw = adapt_omega(ckpt, t, epochs=cfg.adapt_epochs, lr=cfg.adapt_lr, seed=cfg.seed)
        _, rec, ref = reconstruct_test_split(ckpt, t, tw.omega)
        _, rec_ref, _ = reconstruct_test_split(ckpt, t, ckpt.omega(ref_task))
        summary["adapted"][t.task_id] = {
            "omega": tw.omega, "weight": tw.weight, "adapted_psnr": mean_psnr(rec, ref),
            "borrowed_psnr": mean_psnr(rec_ref, ref), "borrowed_from": ref_task,
        }
        log.info("%s: adapted weight %.4f", t.task_id, tw.weight)
    summary["total_seconds"] = time.perf_counter() - t0

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(out / "checkpoint")
        write_loss_csv(loss_log, out / "loss.csv")
        write_report_csv(rows, out / "report.csv")
        cfg_dict = dataclasses.asdict(cfg)
        (out / "summary.json").write_text(json.dumps({"config": cfg_dict, **summary}, indent=2))
    return summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--quick", action="store_true", help="tiny smoke-test sizes")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    cfg = DeskConfig.quick() if args.quick else DeskConfig()
    cfg = dataclasses.replace(cfg, seed=args.seed)
    summary = run(cfg, args.out)
    for k, v in summary["tasks"].items():
        print(f"{k}: zero-fill {v['zero_fill_psnr']:.2f} dB  model {v['model_psnr']:.2f} dB  "
              f"gain {v['gain']:+.2f} dB  weight {v['weight']:.4f}")
    for k, v in summary["adapted"].items():
        print(f"{k} (adapted): weight {v['weight']:.4f}  psnr {v['adapted_psnr']:.2f} dB  "
              f"with {v['borrowed_from']} weight {v['borrowed_psnr']:.2f} dB")


if __name__ == "__main__":
    main()
