"""L2 loss, Adam, plateau learning-rate halving, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from dban.data import ImageSample, stack_batch
from dban.metrics import evaluate_pair, psnr
from dban.network import ModelConfig, ModelParams, build_model, model_backward, model_forward, \
    model_forward_cached
from dban.tensor import ShapeError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    patience: int = 10
    lr_factor: float = 0.5
    lr_floor: float = 1e-7
    max_epochs: int = 100
    max_steps: Optional[int] = None
    seed: int = 0


# -- loss ---------------------------------------------------------------------

def l2_loss(sr: np.ndarray, hr: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over n*C*H*W elements and its gradient w.r.t. ``sr``."""
    if sr.shape != hr.shape:
        raise ShapeError(f"l2_loss: shape mismatch {sr.shape} vs {hr.shape}")
    diff = sr - hr
    n = diff.size
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    return loss, (2.0 / n) * diff


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to ``params`` and ``state`` in place.

    A non-finite gradient aborts the step before anything is modified.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step: gradient {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {k}")
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        p, m, v = params[k], state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)


# -- learning-rate schedule ---------------------------------------------------

def lr_schedule(history: Sequence[float], current_lr: float, patience: int = 10, factor: float = 0.5,
                floor: float = 1e-7, window_start: int = 0) -> float:
    """Halve the rate when the last ``patience`` scores never beat the best earlier score.

    ``history`` holds validation scores oldest first (higher is better).
    Entries before ``window_start`` (the length of the history at the last
    reduction) may set the best score but cannot be part of a plateau window.
    """
    n = len(history)
    if n - patience < max(window_start, 1):
        return current_lr
    best_before = max(history[:n - patience])
    if max(history[n - patience:]) > best_before:
        return current_lr
    return max(current_lr * factor, floor)


@dataclass
class PlateauSchedule:
    lr: float
    patience: int = 10
    factor: float = 0.5
    floor: float = 1e-7
    history: list[float] = field(default_factory=list)
    window_start: int = 0

    def step(self, score: float) -> float:
        self.history.append(score)
        new = lr_schedule(self.history, self.lr, self.patience, self.factor, self.floor, self.window_start)
        if new != self.lr:
            self.window_start = len(self.history)
        self.lr = new
        return new


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"DBANCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelParams
    cfg: ModelConfig
    state: AdamState
    lr: float
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def checkpoint_save(path, model: ModelParams, cfg: ModelConfig, state: Optional[AdamState] = None,
                    lr: float = 0.0, epoch: int = 0, extra: Optional[dict] = None) -> None:
    """Write parameters and Adam moments as little-endian float32 behind a JSON manifest."""
    state = state or AdamState()
    arrays: list[tuple[str, np.ndarray]] = [(f"model.{k}", v) for k, v in model.tensors().items()]
    arrays += [(f"adam.m.{k}", v) for k, v in state.m.items()]
    arrays += [(f"adam.v.{k}", v) for k, v in state.v.items()]
    manifest, offset = [], 0
    for name, arr in arrays:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "step": state.t,
        "epoch": epoch,
        "lr": lr,
        "extra": extra or {},
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')}, "
                              f"this build reads version {CHECKPOINT_VERSION}")
    data = memoryview(raw)[12 + hlen:]
    cfg = ModelConfig(**header["config"])
    model = build_model(cfg, seed=0)
    params = model.tensors()
    m, v = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        name = entry["name"]
        if name.startswith("model."):
            target = params[name[len("model."):]]
            if target.shape != shape:
                raise CheckpointError(f"{path}: {name} has shape {shape}, config implies {target.shape}")
            target[...] = arr
        elif name.startswith("adam.m."):
            m[name[len("adam.m."):]] = arr.astype(np.float32)
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = arr.astype(np.float32)
    state = AdamState(m, v, int(header["step"]))
    return Checkpoint(model, cfg, state, float(header["lr"]), int(header["epoch"]), header.get("extra", {}))


# -- training loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_psnr: float
    lr: float
    steps: int

    def log_line(self) -> str:
        return (f"epoch={self.epoch} train_loss={self.train_loss:.8e} "
                f"val_psnr={self.val_psnr:.6f} lr={self.lr:.6e}")


@dataclass
class TrainResult:
    model: ModelParams
    state: AdamState
    history: list[EpochRecord]
    losses: list[float]
    schedule: PlateauSchedule


def validation_psnr(model: ModelParams, cfg: ModelConfig, samples: Sequence[ImageSample]) -> float:
    """Mean Y-channel PSNR (4-pixel border removed) of clamped model outputs."""
    scores = []
    for s in samples:
        sr = np.clip(model_forward(s.lr, model, cfg), 0.0, 1.0)
        scores.append(evaluate_pair(sr, s.hr)[0])
    finite = [v for v in scores if not math.isinf(v)]
    return sum(finite) / len(finite) if finite else math.inf


def train(model: ModelParams, cfg: ModelConfig, samples: Sequence[ImageSample], tcfg: TrainConfig,
          val_samples: Sequence[ImageSample] = (), *, state: Optional[AdamState] = None,
          schedule: Optional[PlateauSchedule] = None, start_epoch: int = 0,
          checkpoint_path=None, hooks: Sequence[Callable[[EpochRecord], None]] = ()) -> TrainResult:
    """Mini-batch Adam on the L2 loss, updating ``model`` in place.

    Each epoch visits the samples in an order drawn from ``(seed, epoch)``
    and drops the last partial batch. After each epoch the validation PSNR
    feeds the plateau schedule (the mean training-loss PSNR stands in when
    there is no validation set) and the best model so far is checkpointed.
    """
    params = model.tensors()
    state = state or AdamState.zeros_like(params)
    schedule = schedule or PlateauSchedule(tcfg.lr0, tcfg.patience, tcfg.lr_factor, tcfg.lr_floor)
    history: list[EpochRecord] = []
    losses: list[float] = []
    n_batches = len(samples) // tcfg.batch_size
    if tcfg.max_epochs > 0 and n_batches == 0:
        raise TrainingError(f"{len(samples)} samples cannot fill one batch of {tcfg.batch_size}")
    best = max(schedule.history) if schedule.history else -math.inf
    steps = 0

    for epoch in range(start_epoch, start_epoch + tcfg.max_epochs):
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(samples))
        epoch_losses = []
        for b in range(n_batches):
            if tcfg.max_steps is not None and steps >= tcfg.max_steps:
                break
            lr_batch, hr_batch = stack_batch([samples[i] for i in order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]])
            out, cache = model_forward_cached(lr_batch, model, cfg)
            loss, grad = l2_loss(out, hr_batch)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            grads = model_backward(lr_batch, model, cfg, grad, cache=cache)
            try:
                adam_step(params, grads, state, schedule.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            epoch_losses.append(loss)
            steps += 1
        if not epoch_losses:
            break
        losses.extend(epoch_losses)
        mean_loss = float(np.mean(epoch_losses))
        if val_samples:
            score = validation_psnr(model, cfg, val_samples)
        else:
            score = 10 * math.log10(1.0 / mean_loss) if mean_loss > 0 else math.inf
        lr_used = schedule.lr
        schedule.step(score)
        record = EpochRecord(epoch, mean_loss, score, lr_used, len(epoch_losses))
        history.append(record)
        log.info(record.log_line())
        if checkpoint_path is not None and score > best:
            checkpoint_save(checkpoint_path, model, cfg, state, schedule.lr, epoch + 1,
                            {"schedule": asdict(schedule), "train": asdict(tcfg)})
        best = max(best, score)
        for hook in hooks:
            hook(record)
    return TrainResult(model, state, history, losses, schedule)
