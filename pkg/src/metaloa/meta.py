"""Bilevel meta-training of the unrolled solver.

Parameters split into a task-invariant group (feature kernels, per-phase
step sizes, initial smoothing) and one scalar weight per task.  The
lower-level stationarity condition on the training split is enforced by a
quadratic penalty

    L_val(theta, omega) + lam / 2 * || grad_theta L_train(theta, omega) ||^2

whose gradient needs a Hessian-vector product of the training loss in the
direction of its own theta-gradient.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .autodiff import DTYPE, HVP_METHODS, NumericFailure, hvp, record_and_grad
from .mri import TaskDataset, _mask_tensor
from .regularizer import DELTA_ACT, FeatureNetParams, layer_shapes
from .solver import SolverConfig, unrolled_forward

log = logging.getLogger(__name__)

LOSS_FIELDS = ("iter", "task", "split", "loss", "lambda", "delta")
DIVERGENCE_LOSS = 1e6


def config_hash(cfg) -> str:
    """Short stable digest of a dataclass or mapping."""
    payload = asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else dict(cfg)
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    # penalty schedule
    lam0: float = 1e-5
    nu_lam: float = 1.001
    delta0: float = 1e-3
    nu_delta: float = 0.95
    delta_tol: float = 4.35e-6
    max_rounds: int | None = None  # outer-round cap per stage; None: delta schedule only
    inner_K: int = 1
    inner_cap: int = 1  # inner-while iterations per round before moving on
    # optimizer
    optimizer: str = "adam"
    lr_theta: float = 1e-3
    lr_omega: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_train: int = 2
    batch_val: int = 2
    hvp_method: str = "fwd-rev"
    # architecture / solver
    depth: int = 3
    width: int = 4
    ksize: int = 3
    delta_act: float = DELTA_ACT
    alpha0: float = 0.1
    tau_frac0: float = 0.5
    eps0: float = 1e-3
    omega0: float = 0.0
    a: float = 1e3
    rho: float = 0.5
    gamma: float = 0.9
    sigma_red: float = 1.0
    # stair training
    phase_cap: int = 5
    stair_tol: float = 1e-3
    fixed_weight: float | None = None  # baseline: no task weights, constant kappa
    seed: int = 0

    def __post_init__(self):
        if not (self.nu_lam > 1):
            raise ValueError("nu_lam must exceed 1")
        if not (0 < self.nu_delta < 1):
            raise ValueError("nu_delta must lie in (0, 1)")
        if self.lam0 < 0 or self.delta0 <= 0 or self.delta_tol < 0:
            raise ValueError("lam0 >= 0, delta0 > 0 and delta_tol >= 0 required")
        if self.inner_K < 1 or self.inner_cap < 1:
            raise ValueError("inner_K and inner_cap must be >= 1")
        if self.optimizer not in ("plain", "adam"):
            raise ValueError(f"optimizer must be 'plain' or 'adam', got {self.optimizer!r}")
        if self.hvp_method not in HVP_METHODS:
            raise ValueError(f"hvp_method must be one of {HVP_METHODS}")
        if self.batch_train < 1 or self.batch_val < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.phase_cap < 1:
            raise ValueError("phase_cap must be >= 1")
        if self.fixed_weight is not None and not (0 < self.fixed_weight <= 1):
            raise ValueError("fixed_weight must lie in (0, 1]")
        if not (0 < self.tau_frac0 < 1):
            raise ValueError("tau_frac0 must lie in (0, 1)")

    def n_rounds(self) -> int:
        """Outer rounds implied by the delta schedule (and the round cap)."""
        n = 0
        d = self.delta0
        while d > self.delta_tol:
            d *= self.nu_delta
            n += 1
        return n if self.max_rounds is None else min(n, self.max_rounds)


# -- initialization and optimizer ----------------------------------------------


def xavier_init(shape: Sequence[int], seed: int = 0, complex_pairs: bool = False) -> torch.Tensor:
    """Glorot-uniform conv kernel of shape (C_out, C_in, k, k).

    With ``complex_pairs`` a trailing (re, im) axis is appended and each part
    is scaled by 1/sqrt(2) so E|w|^2 keeps the Glorot variance.
    """
    shape = tuple(int(s) for s in shape)
    rf = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * rf, shape[0] * rf
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    if complex_pairs:
        w = rng.uniform(-limit, limit, size=shape + (2,)) / math.sqrt(2.0)
    else:
        w = rng.uniform(-limit, limit, size=shape)
    return torch.from_numpy(w)


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(state: AdamState, grads: Sequence[torch.Tensor], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(state, steps)`` with steps to add."""
    t = state.t + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    steps = [-lr * (mi / c1) / ((vi / c2).sqrt() + eps) for mi, vi in zip(m, v)]
    return AdamState(m, v, t), steps


class _Optimizer:
    def __init__(self, kind: str, lr: float, beta1: float, beta2: float, params):
        self.kind, self.lr, self.b1, self.b2 = kind, lr, beta1, beta2
        self.state = AdamState.zeros_like(params) if kind == "adam" else None

    def steps(self, grads):
        if self.kind == "plain":
            return [-self.lr * g for g in grads]
        self.state, steps = adam_step(self.state, grads, self.lr, self.b1, self.b2)
        return steps


# -- generic penalty machinery ---------------------------------------------------


@dataclass
class PenaltyGrad:
    theta: list[torch.Tensor]
    omega: list[torch.Tensor]
    value: float
    val_loss: float
    train_grad_sq: float
    method: str

    def sq_norm(self) -> float:
        return float(sum((g * g).sum() for g in self.theta + self.omega))


def penalty_objective(val_loss: Callable, train_loss: Callable, thetas, omegas, lam: float) -> float:
    """L_val + lam/2 ||grad_theta L_train||^2 for losses called as ``loss(*thetas, *omegas)``."""
    nt = len(thetas)
    lv = float(val_loss(*thetas, *omegas))
    if lam == 0:
        return lv
    _, g = record_and_grad(train_loss, list(thetas) + list(omegas), check_finite=False)
    return lv + 0.5 * lam * float(sum((gi * gi).sum() for gi in g[:nt]))


def grad_penalty(val_loss: Callable, train_loss: Callable, thetas, omegas, lam: float,
                 method: str = "fwd-rev") -> PenaltyGrad:
    """Gradient of :func:`penalty_objective` in both parameter groups."""
    thetas, omegas = list(thetas), list(omegas)
    nt = len(thetas)
    lv, gv = record_and_grad(val_loss, thetas + omegas, check_finite=False)
    if lam == 0:
        return PenaltyGrad(gv[:nt], gv[nt:], lv, lv, 0.0, method)
    _, gt = record_and_grad(train_loss, thetas + omegas, check_finite=False)
    g_theta = gt[:nt]
    sq = float(sum((g * g).sum() for g in g_theta))
    direction = g_theta + [torch.zeros_like(torch.as_tensor(o)) for o in omegas]
    hv = hvp(train_loss, thetas + omegas, direction, method=method).vectors
    total = [a + lam * b for a, b in zip(gv, hv)]
    return PenaltyGrad(total[:nt], total[nt:], lv + 0.5 * lam * sq, lv, sq, method)


@dataclass
class PenaltyRun:
    thetas: list[torch.Tensor]
    omegas: list[torch.Tensor]
    rounds: int
    iterations: int
    cap_hits: int
    lam: float
    delta: float
    history: list[dict] = field(default_factory=list)


def penalty_method(grad_fn: Callable, thetas, omegas, config: TrainConfig,
                   on_round: Callable | None = None, resample: Callable | None = None) -> PenaltyRun:
    """Alternating-direction penalty loop.

    ``grad_fn(thetas, omegas, lam)`` returns a :class:`PenaltyGrad` for the
    current mini-batches; ``resample()`` draws fresh ones at the start of each
    outer round.  The inner loop stops once the combined squared gradient norm
    is at most delta or after ``config.inner_cap`` iterations.
    """
    thetas = [t.detach().clone() for t in thetas]
    omegas = [o.detach().clone() for o in omegas]
    opt_t = _Optimizer(config.optimizer, config.lr_theta, config.beta1, config.beta2, thetas)
    opt_o = _Optimizer(config.optimizer, config.lr_omega, config.beta1, config.beta2, omegas)
    lam, delta = config.lam0, config.delta0
    rounds = iterations = cap_hits = 0
    history = []
    while delta > config.delta_tol:
        if config.max_rounds is not None and rounds >= config.max_rounds:
            break
        if resample is not None:
            resample()
        inner = 0
        g = grad_fn(thetas, omegas, lam)
        while g.sq_norm() > delta:
            if inner >= config.inner_cap:
                cap_hits += 1
                break
            for k in range(config.inner_K):
                if k > 0:
                    g = grad_fn(thetas, omegas, lam)
                thetas = [t + s for t, s in zip(thetas, opt_t.steps(g.theta))]
            g = grad_fn(thetas, omegas, lam)
            omegas = [o + s for o, s in zip(omegas, opt_o.steps(g.omega))]
            inner += 1
            iterations += 1
            if inner < config.inner_cap:
                g = grad_fn(thetas, omegas, lam)
        history.append({"round": rounds, "lam": lam, "delta": delta, "inner": inner,
                        "objective": g.value})
        if on_round is not None:
            on_round(rounds, lam, delta, thetas, omegas)
        delta *= config.nu_delta
        lam *= config.nu_lam
        rounds += 1
    return PenaltyRun(thetas, omegas, rounds, iterations, cap_hits, lam, delta, history)


# -- the unrolled reconstruction model ---------------------------------------------


def _f32(t: torch.Tensor) -> torch.Tensor:
    # stored precision; the model always runs from these values
    return t.detach().to(torch.float32).to(DTYPE)


@dataclass
class Checkpoint:
    """Named float32-representable arrays plus metadata.

    Arrays: ``kernel{q}`` (C_out, C_in, k, k, 2), ``log_alpha`` and
    ``tau_logit`` (phase slots), ``log_eps0`` (scalar) and ``omega`` (one per
    task).  Step sizes are ``alpha = exp(log_alpha)`` and
    ``tau = alpha * sigmoid(tau_logit)`` so ``0 < tau < alpha``.
    """

    arrays: dict[str, torch.Tensor]
    task_ids: list[str]
    phase_count: int
    settings: dict  # a, rho, gamma, sigma_red, delta_act, fixed_weight
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.arrays = {k: _f32(torch.as_tensor(v)) for k, v in self.arrays.items()}

    @property
    def theta_names(self) -> list[str]:
        return [k for k in self.arrays if k != "omega"]

    def theta(self) -> FeatureNetParams:
        return _theta_from(self.arrays, self.settings)

    def omega(self, task_id: str) -> float:
        return float(self.arrays["omega"][self.task_ids.index(task_id)])

    def weight(self, task_id: str) -> float:
        if self.settings.get("fixed_weight") is not None:
            return float(self.settings["fixed_weight"])
        return float(torch.sigmoid(torch.tensor(self.omega(task_id), dtype=DTYPE)))

    def solver_config(self, phases: int | None = None, eps_tol: float = 0.0) -> SolverConfig:
        return _solver_config(self.arrays, self.settings, phases or self.phase_count, eps_tol)

    def with_arrays(self, **updates) -> "Checkpoint":
        arrays = dict(self.arrays)
        arrays.update(updates)
        return Checkpoint(arrays, list(self.task_ids), self.phase_count,
                          dict(self.settings), dict(self.meta))

    def equals(self, other: "Checkpoint") -> bool:
        return (
            self.task_ids == other.task_ids
            and self.phase_count == other.phase_count
            and self.settings == other.settings
            and self.arrays.keys() == other.arrays.keys()
            and all(torch.equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )

    # on-disk layout: manifest.json plus <name>.f32 raw little-endian files
    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, arr in self.arrays.items():
            raw = arr.numpy().astype("<f4")
            (path / f"{name}.f32").write_bytes(raw.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32-le",
                            "file": f"{name}.f32"})
        manifest = {
            "format": "metaloa-checkpoint/1",
            "arrays": entries,
            "task_ids": self.task_ids,
            "phase_count": self.phase_count,
            "settings": self.settings,
            "meta": self.meta,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"no checkpoint manifest in {path}") from None
        except json.JSONDecodeError as e:
            raise ValueError(f"corrupt checkpoint manifest: {e}") from None
        arrays = {}
        for e in manifest["arrays"]:
            shape = tuple(e["shape"])
            raw = np.frombuffer((path / e["file"]).read_bytes(), dtype="<f4")
            if raw.size != int(np.prod(shape)):
                raise ValueError(f"array {e['name']} has {raw.size} values, expected shape {shape}")
            arrays[e["name"]] = torch.from_numpy(raw.reshape(shape).astype(np.float64))
        return cls(arrays, manifest["task_ids"], int(manifest["phase_count"]),
                   manifest["settings"], manifest.get("meta", {}))


def _theta_from(arrays, settings) -> FeatureNetParams:
    q = 0
    kernels = []
    while f"kernel{q}" in arrays:
        kernels.append(arrays[f"kernel{q}"])
        q += 1
    return FeatureNetParams(kernels, settings["delta_act"])


def _solver_config(arrays, settings, phases: int, eps_tol: float = 0.0) -> SolverConfig:
    alphas = torch.exp(arrays["log_alpha"])
    taus = alphas * torch.sigmoid(arrays["tau_logit"])
    n = min(phases, alphas.shape[0])
    return SolverConfig(
        a=settings["a"], rho=settings["rho"], gamma=settings["gamma"],
        sigma_red=settings["sigma_red"], eps0=torch.exp(arrays["log_eps0"]), eps_tol=eps_tol,
        T=phases, alphas=list(alphas[:n]), taus=list(taus[:n]),
    )


def init_checkpoint(task_ids: Sequence[str], config: TrainConfig) -> Checkpoint:
    arrays = {}
    for q, shp in enumerate(layer_shapes(config.depth, config.width, config.ksize)):
        arrays[f"kernel{q}"] = xavier_init(shp[:4], seed=config.seed * 1000 + q, complex_pairs=True)
    p = config.phase_cap
    arrays["log_alpha"] = torch.full((p,), math.log(config.alpha0), dtype=DTYPE)
    logit = math.log(config.tau_frac0 / (1 - config.tau_frac0))
    arrays["tau_logit"] = torch.full((p,), logit, dtype=DTYPE)
    arrays["log_eps0"] = torch.tensor(math.log(config.eps0), dtype=DTYPE)
    arrays["omega"] = torch.full((len(task_ids),), config.omega0, dtype=DTYPE)
    settings = {"a": config.a, "rho": config.rho, "gamma": config.gamma,
                "sigma_red": config.sigma_red, "delta_act": config.delta_act,
                "fixed_weight": config.fixed_weight}
    return Checkpoint(arrays, list(task_ids), 1, settings, {"config_hash": config_hash(config)})


@dataclass
class Batch:
    """Cross-task batch: per-sample masks and task indices."""

    y: torch.Tensor
    x: torch.Tensor
    mask: torch.Tensor
    task: torch.Tensor  # long (B,)

    def __len__(self):
        return int(self.y.shape[0])


def make_batch(tasks: Sequence[TaskDataset], picks: Sequence[Sequence[int]], split: str) -> Batch:
    ys, xs, ms, ids = [], [], [], []
    for i, (task, idx) in enumerate(zip(tasks, picks)):
        idx = list(idx)
        ys.append(getattr(task, f"y_{split}")[idx])
        xs.append(getattr(task, f"x_{split}")[idx])
        ms.append(_mask_tensor(task.mask).expand(len(idx), *task.mask.shape))
        ids += [i] * len(idx)
    return Batch(torch.cat(ys), torch.cat(xs), torch.cat(ms), torch.tensor(ids, dtype=torch.long))


def full_batch(tasks: Sequence[TaskDataset], split: str) -> Batch:
    return make_batch(tasks, [range(getattr(t, f"y_{split}").shape[0]) for t in tasks], split)


def model_forward(arrays: dict, settings: dict, batch: Batch, phase_count: int) -> torch.Tensor:
    """Unrolled reconstruction of every sample in the batch."""
    theta = _theta_from(arrays, settings)
    cfg = _solver_config(arrays, settings, phase_count)
    fixed = settings.get("fixed_weight")
    omega = arrays["omega"][batch.task]
    return unrolled_forward(batch.y, batch.mask, theta, omega, phase_count, cfg, kappa=fixed)


def per_sample_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    d = recon - target
    return 0.5 * (d.real.square() + d.imag.square()).sum(dim=(-2, -1))


def task_loss(arrays: dict, settings: dict, batch: Batch, phase_count: int) -> torch.Tensor:
    """Sum over the batch of half squared reconstruction errors."""
    return per_sample_loss(model_forward(arrays, settings, batch, phase_count), batch.x).sum()


def _loss_program(names: Sequence[str], settings, batch, phase_count):
    def program(*tensors):
        return task_loss(dict(zip(names, tensors)), settings, batch, phase_count)
    return program


def mri_grad_penalty(ckpt_arrays: dict, settings: dict, b_tr: Batch, b_val: Batch,
                     phase_count: int, lam: float, method: str = "fwd-rev") -> PenaltyGrad:
    names_t = [k for k in ckpt_arrays if k != "omega"]
    names = names_t + ["omega"]
    val = _loss_program(names, settings, b_val, phase_count)
    tr = _loss_program(names, settings, b_tr, phase_count)
    return grad_penalty(val, tr, [ckpt_arrays[k] for k in names_t], [ckpt_arrays["omega"]],
                        lam, method)


# -- training drivers ---------------------------------------------------------------


def _check_tasks(tasks: Sequence[TaskDataset]):
    if not tasks:
        raise ValueError("need at least one task")
    for t in tasks:
        if t.n_train == 0 or t.n_val == 0:
            raise ValueError(f"task {t.task_id} needs nonempty train and val splits")


def evaluate_loss(ckpt: Checkpoint, tasks: Sequence[TaskDataset], split: str = "val",
                  phase_count: int | None = None) -> float:
    """Mean per-sample loss over a whole split, without gradients."""
    batch = full_batch(tasks, split)
    with torch.no_grad():
        loss = task_loss(ckpt.arrays, ckpt.settings, batch, phase_count or ckpt.phase_count)
    return float(loss) / len(batch)


def train(tasks: Sequence[TaskDataset], config: TrainConfig, phase_count: int = 1,
          init: Checkpoint | None = None, loss_log: list | None = None,
          dump_dir=None) -> Checkpoint:
    """Penalty-method training of all parameters at a fixed phase count.

    Each outer round samples ``batch_train`` / ``batch_val`` pairs from every
    task.  ``loss_log`` collects rows for the loss-curve CSV.
    """
    _check_tasks(tasks)
    if phase_count > config.phase_cap:
        raise ValueError("phase_count exceeds phase_cap")
    ckpt = init or init_checkpoint([t.task_id for t in tasks], config)
    names_t = ckpt.theta_names
    rng = np.random.default_rng(config.seed + 7919 * phase_count)
    state: dict = {}
    it_base = len(loss_log) if loss_log is not None else 0

    def resample():
        pick = lambda n, j: rng.choice(n, size=min(j, n), replace=False)
        state["tr"] = make_batch(tasks, [pick(t.n_train, config.batch_train) for t in tasks], "train")
        state["val"] = make_batch(tasks, [pick(t.n_val, config.batch_val) for t in tasks], "val")

    def grad_fn(thetas, omegas, lam):
        arrays = dict(zip(names_t, thetas))
        arrays["omega"] = omegas[0]
        g = mri_grad_penalty(arrays, ckpt.settings, state["tr"], state["val"], phase_count,
                             lam, config.hvp_method)
        if config.fixed_weight is not None:
            g.omega = [torch.zeros_like(o) for o in g.omega]
        if not math.isfinite(g.value) or g.val_loss > DIVERGENCE_LOSS * len(state["val"]):
            _dump_state(dump_dir, arrays, g)
            raise NumericFailure(f"training diverged (val loss {g.val_loss:.4g})", node="train")
        return g

    def on_round(r, lam, delta, thetas, omegas):
        if loss_log is None:
            return
        arrays = dict(zip(names_t, thetas))
        arrays["omega"] = omegas[0]
        with torch.no_grad():
            for split in ("train", "val"):
                b = state["tr" if split == "train" else "val"]
                per = per_sample_loss(model_forward(arrays, ckpt.settings, b, phase_count), b.x)
                for i, t in enumerate(tasks):
                    sel = b.task == i
                    loss_log.append({"iter": it_base + r, "task": t.task_id, "split": split,
                                     "loss": float(per[sel].sum()), "lambda": lam, "delta": delta})

    run = penalty_method(
        grad_fn,
        [ckpt.arrays[k] for k in names_t],
        [ckpt.arrays["omega"]],
        config,
        on_round=on_round,
        resample=resample,
    )
    arrays = dict(zip(names_t, run.thetas))
    arrays["omega"] = run.omegas[0]
    meta = dict(ckpt.meta)
    meta.update({
        "config_hash": config_hash(config),
        "rounds": meta.get("rounds", 0) + run.rounds,
        "inner_iterations": meta.get("inner_iterations", 0) + run.iterations,
        "inner_cap_hits": meta.get("inner_cap_hits", 0) + run.cap_hits,
        "final_lambda": run.lam,
        "final_delta": run.delta,
    })
    if run.cap_hits:
        log.info("inner-loop cap bound in %d of %d rounds", run.cap_hits, run.rounds)
    return Checkpoint(arrays, ckpt.task_ids, phase_count, ckpt.settings, meta)


def _dump_state(dump_dir, arrays, g: PenaltyGrad):
    if dump_dir is None:
        return
    Checkpoint(arrays, [f"task{i}" for i in range(arrays["omega"].shape[0])], 1,
               {"a": 0, "rho": 0, "gamma": 0, "sigma_red": 0, "delta_act": DELTA_ACT,
                "fixed_weight": None},
               {"diverged": True, "val_loss": g.val_loss, "objective": g.value}).save(dump_dir)


@dataclass
class StairResult:
    checkpoint: Checkpoint
    stage_val_loss: list[float]
    stage_start_loss: list[float]


def stair_train(tasks: Sequence[TaskDataset], config: TrainConfig,
                loss_log: list | None = None) -> StairResult:
    """Train with 1 phase, then add one phase at a time with warm starts.

    Stops at ``config.phase_cap`` or once a stage improves the full
    validation loss by less than ``config.stair_tol`` (relative); the better
    of the last two stages is returned.
    """
    _check_tasks(tasks)
    best = None
    finals, starts = [], []
    ckpt = None
    for pc in range(1, config.phase_cap + 1):
        if ckpt is not None:
            ckpt = Checkpoint(ckpt.arrays, ckpt.task_ids, pc, ckpt.settings, ckpt.meta)
            starts.append(evaluate_loss(ckpt, tasks, "val"))
        ckpt = train(tasks, config, phase_count=pc, init=ckpt, loss_log=loss_log)
        if ckpt.phase_count == 1:
            starts.append(float("nan"))
        loss = evaluate_loss(ckpt, tasks, "val")
        finals.append(loss)
        log.info("stage %d: val loss %.6g", pc, loss)
        if best is None or loss < best[1]:
            prev = best
            best = (ckpt, loss)
            if prev is not None and (prev[1] - loss) < config.stair_tol * abs(prev[1]):
                break
        else:
            break
    ckpt = best[0]
    ckpt.meta["stage_val_loss"] = finals
    return StairResult(ckpt, finals, starts)


@dataclass
class TaskWeight:
    omega: float

    @property
    def weight(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.omega))


def adapt_omega(ckpt: Checkpoint, task: TaskDataset, epochs: int = 50, lr: float = 1e-1,
                batch_size: int = 5, omega0: float = 0.0, seed: int = 0) -> TaskWeight:
    """Fit a new task weight on ``task``'s training split with everything else frozen."""
    if task.n_train == 0:
        raise ValueError("task needs a nonempty training split")
    theta_arrays = {k: v for k, v in ckpt.arrays.items() if k != "omega"}
    omega = torch.tensor([omega0], dtype=DTYPE)
    state = AdamState.zeros_like([omega])
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(task.n_train)
        for start in range(0, task.n_train, batch_size):
            b = make_batch([task], [order[start:start + batch_size]], "train")

            def program(w, b=b):
                arrays = dict(theta_arrays)
                arrays["omega"] = w
                return task_loss(arrays, ckpt.settings, b, ckpt.phase_count)

            _, (g,) = record_and_grad(program, [omega], check_finite=False)
            state, (step,) = adam_step(state, [g], lr)
            omega = omega + step
    return TaskWeight(float(_f32(omega)[0]))


def write_loss_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
