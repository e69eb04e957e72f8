"""Command-line entry point.

Every subcommand has a JSON-serializable config dataclass.  Values come from
the defaults, then ``--config file.json``, then explicit flags.  The hash of
the effective config is written next to every output, and ``eval`` /
``report`` refuse to combine outputs whose lineage hashes disagree.

Failures print one line ``error: code=<kind> msg=<text>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .autodiff import NumericFailure
from .io import (
    FormatError,
    load_dataset,
    read_cimg,
    read_mask,
    save_dataset,
    write_cimg,
    write_mask,
    write_pgm,
)
from .meta import Checkpoint, TrainConfig, adapt_omega, config_hash, stair_train, write_loss_csv
from .metrics import MetricReport, read_report_csv, write_report_csv
from .mri import gen_mask, make_task, zero_fill
from .solver import solve, write_trace_csv

log = logging.getLogger("metaloa")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, code: str, msg: str, status: int = EXIT_USAGE):
        super().__init__(msg)
        self.code, self.msg, self.status = code, msg, status


@dataclass
class MaskGenConfig:
    pattern: str = "radial"
    ratio: float = 0.3
    size: int = 64
    seed: int = 0


@dataclass
class PhantomGenConfig:
    size: int = 64
    kind: str = "random-ellipses"
    pattern: str = "radial"
    ratios: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4])
    n_train: int = 20
    n_val: int = 10
    n_test: int = 10
    noise_std: float = 0.0
    seed: int = 0


@dataclass
class AdaptConfig:
    task: str = ""
    epochs: int = 50
    lr: float = 0.1
    batch_size: int = 5
    omega0: float = 0.0
    seed: int = 0


@dataclass
class ReconstructConfig:
    task: str = ""  # dataset task to reconstruct
    weight_from: str = ""  # checkpoint task whose weight is used; default: same id
    split: str = "test"
    phases: int = 0  # 0: checkpoint phase count
    eps_tol: float = 0.0
    fixed_weight: float | None = None  # override the learned weight


@dataclass
class EvalConfig:
    method: str = "loa"


@dataclass
class ReportConfig:
    per_image: bool = False


CONFIGS = {
    "mask-gen": MaskGenConfig,
    "phantom-gen": PhantomGenConfig,
    "train": TrainConfig,
    "adapt": AdaptConfig,
    "reconstruct": ReconstructConfig,
    "eval": EvalConfig,
    "report": ReportConfig,
}


def build_config(cls, file_path: str | None, overrides: dict):
    values = {}
    if file_path:
        try:
            loaded = json.loads(Path(file_path).read_text())
        except FileNotFoundError:
            raise CliError("missing-file", f"config file {file_path} not found", EXIT_IO)
        except json.JSONDecodeError as e:
            raise CliError("bad-config", f"config file {file_path} is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise CliError("bad-config", "config file must hold a JSON object")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError("bad-config", f"unknown config keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise CliError("bad-config", str(e))


def _write_meta(path: Path, kind: str, cfg, lineage: dict | None = None) -> dict:
    meta = {"kind": kind, "config_hash": config_hash(cfg), "config": asdict(cfg),
            "lineage": lineage or {}}
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    return meta


def _read_json(path: Path, what: str) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError("missing-file", f"{what} {path} not found", EXIT_IO)
    except json.JSONDecodeError as e:
        raise CliError("corrupt-file", f"{what} {path} is not valid JSON: {e}", EXIT_IO)


def _need_out(args) -> Path:
    if not args.out:
        raise CliError("missing-arg", "--out is required")
    return Path(args.out)


def _load_data(path) -> tuple[list, dict]:
    if not path:
        raise CliError("missing-arg", "--data is required")
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise CliError("missing-file", str(e), EXIT_IO)
    except (FormatError, KeyError, ValueError) as e:
        raise CliError("corrupt-file", f"dataset {path}: {e}", EXIT_IO)


def _load_ckpt(path) -> Checkpoint:
    if not path:
        raise CliError("missing-arg", "--ckpt is required")
    try:
        return Checkpoint.load(path)
    except FileNotFoundError as e:
        raise CliError("missing-file", str(e), EXIT_IO)
    except (ValueError, KeyError) as e:
        raise CliError("corrupt-file", f"checkpoint {path}: {e}", EXIT_IO)


def _find_task(tasks, task_id: str):
    for t in tasks:
        if t.task_id == task_id:
            return t
    raise CliError("unknown-task", f"task {task_id!r} not in dataset "
                   f"(have {', '.join(t.task_id for t in tasks)})")


# -- subcommands ----------------------------------------------------------------


def cmd_mask_gen(args, cfg: MaskGenConfig) -> None:
    out = _need_out(args)
    mask = gen_mask(cfg.pattern, cfg.size, cfg.size, cfg.ratio, cfg.seed)
    write_mask(out, mask)
    _write_meta(out.with_name(out.name + ".meta.json"), "mask", cfg)
    print(f"wrote {out} (achieved ratio {mask.achieved_ratio:.4f})")


def cmd_phantom_gen(args, cfg: PhantomGenConfig) -> None:
    out = _need_out(args)
    tasks = []
    for i, r in enumerate(cfg.ratios):
        mask = gen_mask(cfg.pattern, cfg.size, cfg.size, float(r), cfg.seed * 1000 + i)
        task = make_task(f"{cfg.pattern}{round(float(r) * 100):02d}", mask, cfg.n_train,
                         cfg.n_val, cfg.n_test, cfg.kind, seed=cfg.seed * 1000 + 500 + i,
                         noise_std=cfg.noise_std)
        tasks.append(task)
    save_dataset(out, tasks, {"config_hash": config_hash(cfg), "config": asdict(cfg)})
    print(f"wrote {len(tasks)} tasks to {out}")


def cmd_train(args, cfg: TrainConfig) -> None:
    out = _need_out(args)
    tasks, manifest = _load_data(args.data)
    rows: list = []
    result = stair_train(tasks, cfg, loss_log=rows)
    ckpt = result.checkpoint
    ckpt.meta["lineage"] = {"dataset": manifest.get("config_hash")}
    ckpt.save(out)
    write_loss_csv(rows, out / "loss.csv")
    print(f"wrote checkpoint {out} ({ckpt.phase_count} phases)")


def cmd_adapt(args, cfg: AdaptConfig) -> None:
    out = _need_out(args)
    ckpt = _load_ckpt(args.ckpt)
    tasks, _ = _load_data(args.data)
    if not cfg.task:
        raise CliError("missing-arg", "adapt needs a task id (--task)")
    task = _find_task(tasks, cfg.task)
    tw = adapt_omega(ckpt, task, cfg.epochs, cfg.lr, cfg.batch_size, cfg.omega0, cfg.seed)
    omegas = ckpt.arrays["omega"].clone()
    ids = list(ckpt.task_ids)
    if task.task_id in ids:
        omegas[ids.index(task.task_id)] = tw.omega
    else:
        ids.append(task.task_id)
        omegas = torch.cat([omegas, torch.tensor([tw.omega], dtype=omegas.dtype)])
    arrays = dict(ckpt.arrays)
    arrays["omega"] = omegas
    meta = dict(ckpt.meta)
    meta.setdefault("adapted", {})[task.task_id] = config_hash(cfg)
    Checkpoint(arrays, ids, ckpt.phase_count, ckpt.settings, meta).save(out)
    print(f"adapted {task.task_id}: omega={tw.omega:.6g} weight={tw.weight:.4f}")


def cmd_reconstruct(args, cfg: ReconstructConfig) -> None:
    out = _need_out(args)
    ckpt = _load_ckpt(args.ckpt)
    if args.input:
        if not args.mask:
            raise CliError("missing-arg", "--mask is required with --input")
        try:
            ys = read_cimg(args.input).unsqueeze(0)
            mask = read_mask(args.mask)
        except FileNotFoundError as e:
            raise CliError("missing-file", str(e), EXIT_IO)
        except FormatError as e:
            raise CliError("corrupt-file", str(e), EXIT_IO)
        task_id, data_hash = cfg.weight_from or cfg.task, None
    else:
        tasks, manifest = _load_data(args.data)
        if not cfg.task:
            raise CliError("missing-arg", "reconstruct needs a task id (--task) or --input")
        task = _find_task(tasks, cfg.task)
        if cfg.split not in ("train", "val", "test"):
            raise CliError("bad-config", f"unknown split {cfg.split!r}")
        ys, mask = getattr(task, f"y_{cfg.split}"), task.mask
        task_id, data_hash = cfg.weight_from or cfg.task, manifest.get("config_hash")
    if cfg.fixed_weight is not None:
        omega, kappa = 0.0, cfg.fixed_weight
    elif ckpt.settings.get("fixed_weight") is not None:
        omega, kappa = 0.0, ckpt.settings["fixed_weight"]
    else:
        if task_id not in ckpt.task_ids:
            raise CliError("unknown-task", f"checkpoint has no weight for task {task_id!r}")
        omega, kappa = ckpt.omega(task_id), None
    scfg = ckpt.solver_config(cfg.phases or ckpt.phase_count, cfg.eps_tol)
    out.mkdir(parents=True, exist_ok=True)
    theta = ckpt.theta()
    for i in range(ys.shape[0]):
        x, trace = solve(ys[i], mask, theta, omega, scfg, kappa=kappa)
        write_cimg(out / f"{i:03d}.cimg", x)
        write_pgm(out / f"{i:03d}.pgm", x)
        write_trace_csv(trace, out / f"{i:03d}_trace.csv")
    lineage = {"checkpoint": ckpt.meta.get("config_hash"), "dataset": data_hash,
               "task": cfg.task, "split": cfg.split, "count": int(ys.shape[0]),
               "weight": kappa if kappa is not None else float(torch.sigmoid(torch.tensor(omega))),
               "pattern": mask.pattern, "ratio": mask.ratio}
    _write_meta(out / "meta.json", "reconstruction", cfg, lineage)
    print(f"wrote {ys.shape[0]} reconstructions to {out}")


def _lineage_key(meta: dict) -> tuple:
    lin = meta.get("lineage", {})
    return lin.get("checkpoint"), lin.get("dataset")


def cmd_eval(args, cfg: EvalConfig) -> None:
    out = _need_out(args)
    if not args.recon:
        raise CliError("missing-arg", "eval needs at least one --recon directory")
    tasks, manifest = _load_data(args.data)
    metas = [_read_json(Path(r) / "meta.json", "reconstruction metadata") for r in args.recon]
    keys = {_lineage_key(m) for m in metas}
    if len(keys) > 1:
        raise CliError("hash-mismatch", "reconstructions come from different checkpoints/datasets")
    data_hash = manifest.get("config_hash")
    if any(m["lineage"].get("dataset") not in (None, data_hash) for m in metas):
        raise CliError("hash-mismatch", "reconstructions were made from a different dataset")
    rows = []
    for rdir, meta in zip(args.recon, metas):
        lin = meta["lineage"]
        task = _find_task(tasks, lin["task"])
        refs = getattr(task, f"x_{lin['split']}")
        files = sorted(Path(rdir).glob("[0-9][0-9][0-9].cimg"))
        if len(files) != refs.shape[0]:
            raise CliError("count-mismatch",
                           f"{rdir} holds {len(files)} images, split has {refs.shape[0]}", EXIT_IO)
        rep = MetricReport()
        for f, ref in zip(files, refs):
            try:
                rep.add(read_cimg(f), ref)
            except FormatError as e:
                raise CliError("corrupt-file", str(e), EXIT_IO)
        rows += rep.rows(lin["ratio"], lin["pattern"], cfg.method, lin.get("weight"))
    write_report_csv(rows, out)
    lineage = {"checkpoint": metas[0]["lineage"].get("checkpoint"), "dataset": data_hash}
    _write_meta(out.with_name(out.name + ".meta.json"), "report", cfg, lineage)
    print(f"wrote {len(rows)} rows to {out}")


def cmd_report(args, cfg: ReportConfig) -> None:
    out = _need_out(args)
    if not args.inputs:
        raise CliError("missing-arg", "report needs at least one --inputs CSV")
    metas = [_read_json(Path(p + ".meta.json"), "report metadata") for p in args.inputs]
    if len({_lineage_key(m) for m in metas}) > 1:
        raise CliError("hash-mismatch", "reports come from different checkpoints/datasets")
    rows = []
    for p in args.inputs:
        try:
            got = read_report_csv(p)
        except (FileNotFoundError, KeyError, ValueError) as e:
            raise CliError("corrupt-file", f"{p}: {e}", EXIT_IO)
        rows += [r for r in got if cfg.per_image or ":" not in r["method"]]
    write_report_csv(rows, out)
    _write_meta(out.with_name(out.name + ".meta.json"), "report", cfg, metas[0]["lineage"])
    if args.figures:
        _figure_grid(args.figures, out.with_suffix(".pgm"))
    print(f"wrote {len(rows)} rows to {out}")


def _figure_grid(dirs: Sequence[str], path: Path, per_row: int = 4) -> None:
    # one row per reconstruction directory, first ``per_row`` images each
    tiles = []
    for d in dirs:
        files = sorted(Path(d).glob("[0-9][0-9][0-9].cimg"))[:per_row]
        if not files:
            raise CliError("missing-file", f"no reconstructions in {d}", EXIT_IO)
        imgs = [np.abs(read_cimg(f).numpy()) for f in files]
        while len(imgs) < per_row:
            imgs.append(np.zeros_like(imgs[0]))
        tiles.append(np.concatenate(imgs, axis=1))
    width = max(t.shape[1] for t in tiles)
    tiles = [np.pad(t, ((0, 0), (0, width - t.shape[1]))) for t in tiles]
    write_pgm(path, np.concatenate(tiles, axis=0))


COMMANDS = {
    "mask-gen": cmd_mask_gen,
    "phantom-gen": cmd_phantom_gen,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "report": cmd_report,
}


# -- argument parsing ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _globals() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--config", default=None, help="JSON config file")
    g.add_argument("--out", default=None)
    g.add_argument("--threads", type=int, default=None)
    g.add_argument("--dump-config", action="store_true",
                   help="print the effective config as JSON and exit")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _globals()
    parser = _Parser(prog="metaloa", description="Learned safeguarded CS-MRI reconstruction.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("mask-gen", parents=[common])
    p.add_argument("--pattern", choices=["radial", "cartesian"])
    p.add_argument("--ratio", type=float)
    p.add_argument("--size", type=int)

    p = sub.add_parser("phantom-gen", parents=[common])
    p.add_argument("--size", type=int)
    p.add_argument("--kind", choices=["shepp-logan", "random-ellipses"])
    p.add_argument("--pattern", choices=["radial", "cartesian"])
    p.add_argument("--ratios", type=float, nargs="+")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)

    p = sub.add_parser("train", parents=[common])
    p.add_argument("--data")
    p.add_argument("--phase-cap", dest="phase_cap", type=int)
    p.add_argument("--max-rounds", dest="max_rounds", type=int)
    p.add_argument("--fixed-weight", dest="fixed_weight", type=float)

    p = sub.add_parser("adapt", parents=[common])
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--task")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("reconstruct", parents=[common])
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--task")
    p.add_argument("--weight-from", dest="weight_from")
    p.add_argument("--split")
    p.add_argument("--phases", type=int)
    p.add_argument("--eps-tol", dest="eps_tol", type=float)
    p.add_argument("--fixed-weight", dest="fixed_weight", type=float)
    p.add_argument("--input", help="single measurement .cimg instead of a dataset")
    p.add_argument("--mask", help="mask file for --input")

    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--data")
    p.add_argument("--recon", nargs="+")
    p.add_argument("--method")

    p = sub.add_parser("report", parents=[common])
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--figures", nargs="+")
    p.add_argument("--per-image", dest="per_image", action="store_const", const=True)
    return parser


_NOT_CONFIG = {"command", "config", "out", "threads", "dump_config", "data", "ckpt", "recon",
               "inputs", "figures", "input", "mask"}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise CliError("usage", "a subcommand is required: " + " | ".join(COMMANDS))
    if args.threads is not None:
        if args.threads < 1:
            raise CliError("bad-config", "--threads must be >= 1")
        torch.set_num_threads(args.threads)
    cls = CONFIGS[args.command]
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if "seed" not in {f.name for f in fields(cls)}:
        overrides.pop("seed", None)
    cfg = build_config(cls, args.config, overrides)
    if args.dump_config:
        print(json.dumps(asdict(cfg), indent=2, sort_keys=True))
        return 0
    COMMANDS[args.command](args, cfg)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except CliError as e:
        print(f"error: code={e.code} msg={_one_line(e.msg)}", file=sys.stderr)
        return e.status
    except NumericFailure as e:
        print(f"error: code=numeric-failure msg={_one_line(str(e))}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError) as e:
        print(f"error: code=io msg={_one_line(str(e))}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: code=invalid-argument msg={_one_line(str(e))}", file=sys.stderr)
        return EXIT_USAGE


def _one_line(s: str) -> str:
    return " ".join(str(s).split())


if __name__ == "__main__":
    sys.exit(main())
