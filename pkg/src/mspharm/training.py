"""ADAM optimization, learning-rate and alpha schedules, and training loops.

``train_model`` drives any model exposing ``parameters()``, ``param_groups()``,
``supervised_outputs(x)`` and ``predict(x)``. Each batch loss is the unweighted
sum of MSE terms over the supervised outputs; for an MSP that is every
first-stage prediction plus the second-stage target prediction.

Validation loss is the mean patch MSE of the target prediction over the
validation indices; the parameters of the epoch with the lowest validation
loss are kept at the end of a run.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import checkpoint_bytes
from .patches import PatchDataset, batch_indices
from .tensor import NonFiniteError, Tape, Tensor

HISTORY_FIELDS = ("phase", "epoch", "lr", "alpha", "train_loss", "val_loss")


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleSpec:
    lr0: float = 1e-4
    period: int = 15
    factor: float = math.sqrt(2.0)

    def validate(self) -> None:
        if self.lr0 <= 0 or self.period < 1 or self.factor < 1:
            raise ValueError(f"invalid learning-rate schedule {self}")


def lr_at(epoch: int, schedule: ScheduleSpec | None = None) -> float:
    """Step decay: ``lr0 / factor ** (epoch // period)``."""
    schedule = schedule or ScheduleSpec()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.lr0 / schedule.factor ** (epoch // schedule.period)


@dataclass(frozen=True)
class AlphaSchedule:
    """Linear ramp of the blend weight from 0 at ``start`` to 1 at ``end``."""

    start: int = 0
    end: int = 1

    def __call__(self, epoch: int) -> float:
        if self.end <= self.start:
            return 1.0 if epoch >= self.start else 0.0
        return float(min(1.0, max(0.0, (epoch - self.start) / (self.end - self.start))))


# ---------------------------------------------------------------------------
# ADAM


class OptimState:
    """First/second moment buffers (float64) and the step counter."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params, grads, state: OptimState, lr: float, lr_scales=None) -> None:
    """One bias-corrected ADAM update, in place. ``lr_scales`` gives a per-parameter multiplier."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and g.shape != p.shape:
            raise T.ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i} (shape {p.shape})")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else g.astype(np.float64)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (1.0 if lr_scales is None else lr_scales[i])
        if step == 0:
            continue
        p.data = (p.data - step * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# configuration and run records


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 12
    lr0: float = 1e-4
    decay_period: int = 15
    epoch_offset: int = 0
    seed: int = 0
    max_batches_per_epoch: int | None = None
    val_patches: int | None = None
    alpha_start: int = 0
    alpha_end: int | None = None
    alpha_pin: float | None = None
    freeze_singles: bool = False
    connection_lr_scale: float = 1.0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.epoch_offset < 0:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.schedule().validate()
        for name in ("max_batches_per_epoch", "val_patches"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1 when given")
        if self.alpha_pin is not None and not 0 <= self.alpha_pin <= 1:
            raise ValueError("alpha_pin must lie in [0, 1]")
        if self.connection_lr_scale < 0:
            raise ValueError("connection_lr_scale must be >= 0")

    def schedule(self) -> ScheduleSpec:
        return ScheduleSpec(self.lr0, self.decay_period)

    def alpha_schedule(self) -> AlphaSchedule:
        end = self.alpha_end if self.alpha_end is not None else self.alpha_start + self.epochs // 2
        return AlphaSchedule(self.alpha_start, end)

    def alpha_at(self, epoch: int) -> float:
        return float(self.alpha_pin) if self.alpha_pin is not None else self.alpha_schedule()(epoch)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown training config field(s): {unknown}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


@dataclass
class TrainRun:
    config: TrainConfig
    phase: str
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val: float | None = None
    checkpoint_path: str | None = None

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def history_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in HISTORY_FIELDS])
    return buf.getvalue()


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in ("lr", "alpha", "train_loss", "val_loss"):
            r[k] = float(r[k])
    return rows


# ---------------------------------------------------------------------------
# losses and evaluation helpers


def _predict_alpha(model, x: Tensor, alpha: float | None):
    if getattr(model, "kind", None) == "msp" and alpha is not None:
        return model.forward(x, alpha)[1]
    return model.predict(x)


def batch_loss(model, x: np.ndarray, targets: dict, alpha: float | None = None) -> tuple[Tensor, list[float]]:
    """Summed MSE over the model's supervised outputs; returns the total and each term."""
    xt = Tensor(x)
    if getattr(model, "kind", None) == "msp":
        stage1, stage2 = model.forward(xt, alpha)
        outs = list(stage1.items()) + [(model.target, stage2)]
    else:
        outs = model.supervised_outputs(xt)
    total, terms = None, []
    for platform, pred in outs:
        if platform not in targets:
            raise KeyError(f"dataset has no targets for platform {platform}")
        term = T.mse_loss(pred, Tensor(targets[platform]))
        terms.append(term.item())
        total = term if total is None else T.add(total, term)
    return total, terms


def mean_target_mse(model, dataset: PatchDataset, indices, batch_size: int = 12, alpha=None) -> float:
    """Mean over patches of the per-patch MSE of the target prediction."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("no patches to evaluate")
    total = 0.0
    for start in range(0, len(indices), batch_size):
        idx = indices[start:start + batch_size]
        x, targets = dataset.batch(idx)
        pred = _predict_alpha(model, Tensor(x), alpha).data.astype(np.float64)
        err = (pred - targets[model.target]) ** 2
        total += float(err.reshape(len(idx), -1).mean(axis=1).sum())
    return total / len(indices)


def validation_indices(test_indices, cfg: TrainConfig) -> np.ndarray:
    """Evenly strided subset of the held-out split when ``val_patches`` is set."""
    test_indices = np.asarray(test_indices, dtype=np.int64)
    if cfg.val_patches is None or cfg.val_patches >= len(test_indices):
        return test_indices
    pick = np.linspace(0, len(test_indices) - 1, cfg.val_patches).round().astype(np.int64)
    return test_indices[pick]


# ---------------------------------------------------------------------------
# training loops


def _lr_scales(model, cfg: TrainConfig) -> list[float]:
    scales = []
    for name, params in model.param_groups().items():
        s = 1.0
        if name == "single" and cfg.freeze_singles and getattr(model, "kind", None) == "msp":
            s = 0.0
        if name == "connection":
            s = cfg.connection_lr_scale
        scales += [s] * len(params)
    return scales


def _snapshot(params) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def train_model(model, dataset: PatchDataset, split, cfg: TrainConfig, phase: str = "single",
                out_dir=None, log=None) -> TrainRun:
    """Minimize the summed MSE of ``model``'s supervised outputs over the training split."""
    cfg.validate()
    params = model.parameters()
    grouped = [p for group in model.param_groups().values() for p in group]
    if [id(p) for p in grouped] != [id(p) for p in params]:
        raise RuntimeError("param_groups() must list parameters in parameters() order")
    scales = _lr_scales(model, cfg)
    state = OptimState(params)
    val_idx = validation_indices(split.test, cfg)
    run = TrainRun(cfg, phase)
    best = _snapshot(params)
    is_msp = getattr(model, "kind", None) == "msp"

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch + cfg.epoch_offset, cfg.schedule())
        alpha = cfg.alpha_at(epoch) if is_msp else None
        if is_msp:
            model.alpha = alpha
        order = batch_indices(split.train, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch + cfg.epoch_offset)
        if cfg.max_batches_per_epoch is not None:
            order = order[:cfg.max_batches_per_epoch]
        losses = []
        for idx in order:
            x, targets = dataset.batch(idx)
            with Tape() as tape:
                loss, _ = batch_loss(model, x, targets, alpha)
            if not np.isfinite(loss.item()):
                raise DivergenceError(epoch, f"training loss became {loss.item()}")
            for p in params:
                p.grad = None
            T.backward(loss, tape)
            try:
                adam_step(params, [p.grad for p in params], state, lr, scales)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, str(exc)) from exc
            losses.append(loss.item())
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss = mean_target_mse(model, dataset, val_idx, cfg.batch_size, alpha)
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch, f"validation loss became {val_loss}")
        run.history.append({"phase": phase, "epoch": epoch, "lr": lr, "alpha": 0.0 if alpha is None else alpha,
                            "train_loss": train_loss, "val_loss": val_loss})
        if run.best_val is None or val_loss < run.best_val:
            run.best_val, run.best_epoch = val_loss, epoch
            best = _snapshot(params)
        if log:
            log(f"[{phase}] epoch {epoch} lr {lr:.3g} alpha {run.history[-1]['alpha']:.3g} "
                f"train {train_loss:.5f} val {val_loss:.5f}")

    for p, b in zip(params, best):
        p.data = b
    if is_msp and run.best_epoch is not None:
        model.alpha = cfg.alpha_at(run.best_epoch)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "model.mspc"
        ckpt.write_bytes(checkpoint_bytes(model))
        (out / "history.csv").write_text(history_to_csv(run.history))
        (out / "train_config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
        run.checkpoint_path = str(ckpt)
    return run


def train_single(net, dataset: PatchDataset, split, cfg: TrainConfig, out_dir=None, log=None) -> TrainRun:
    if net.target not in dataset.targets:
        raise KeyError(f"dataset has no targets for platform {net.target}")
    return train_model(net, dataset, split, cfg, "single", out_dir, log)


def train_msp(msp, dataset: PatchDataset, split, cfg: TrainConfig, out_dir=None, log=None) -> TrainRun:
    return train_model(msp, dataset, split, cfg, "joint", out_dir, log)
