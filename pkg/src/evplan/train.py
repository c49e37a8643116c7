"""Adam training with validation early stopping, loss logging and checkpoints."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from evplan import autodiff as ad
from evplan.anchors import AnchorSet, generate_anchors
from evplan.features import Batch, collate, scene_features
from evplan.net import NetConfig, NetParams, init_params, total_loss
from evplan.scene import Dataset, Scene

CHECKPOINT_VERSION = 1
LOSS_LOG_COLUMNS = ("epoch", "train_mse", "train_uce", "val_total")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: NetParams):
        super().__init__(message)
        self.params = params


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0  # global norm; 0 disables
    cosine_decay: bool = False  # anneal lr to zero over max_epochs

    def lr_at(self, epoch: int) -> float:
        if not self.cosine_decay:
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * (epoch - 1) / self.max_epochs))


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    train_uce: float
    val_total: float


@dataclass
class TrainResult:
    params: NetParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


class Adam:
    def __init__(self, size: int, settings: TrainSettings):
        self.s = settings
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float):
        s = self.s
        self.t += 1
        self.m = s.beta1 * self.m + (1 - s.beta1) * grad
        self.v = s.beta2 * self.v + (1 - s.beta2) * grad * grad
        m_hat = self.m / (1 - s.beta1**self.t)
        v_hat = self.v / (1 - s.beta2**self.t)
        flat -= lr * m_hat / (np.sqrt(v_hat) + s.eps)


def anchors_for(scene: Scene, cfg: NetConfig, dt: float) -> AnchorSet:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return generate_anchors(scene, cfg.K, dt=dt, F=cfg.F)


def build_batch(scenes, cfg: NetConfig, dt: float, anchor_sets=None) -> Batch:
    if anchor_sets is None:
        anchor_sets = [anchors_for(s, cfg, dt) for s in scenes]
    return collate(scene_features(s, a, cfg.caps) for s, a in zip(scenes, anchor_sets))


def evaluate_loss(params: NetParams, batch: Batch, batch_size: int = 64) -> tuple[float, float, float]:
    """Scene-weighted mean (total, mse, uce) without building a tape."""
    tot = mse = uce = 0.0
    with ad.no_grad():
        for start in range(0, batch.size, batch_size):
            sub = batch.subset(slice(start, start + batch_size))
            loss, m, u = total_loss(params, sub)
            n = sub.size
            tot += float(loss.data) * n
            mse += m * n
            uce += u * n
    n = max(batch.size, 1)
    return tot / n, mse / n, uce / n


def train(
    dataset: Dataset,
    config: NetConfig,
    seed: int = 0,
    *,
    val_dataset: Optional[Dataset] = None,
    settings: TrainSettings = TrainSettings(),
    init: Optional[NetParams] = None,
    budget_from_data: bool = True,
    log_path=None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Fits the evidential network; deterministic for a fixed seed.

    The evidence budget defaults to the training-set size. With a validation
    set, the parameters with the lowest validation loss are returned.
    """
    if budget_from_data and len(dataset) > 0:
        config = replace(config, n_budget=float(len(dataset)))
    if dataset.meta.H != config.H or dataset.meta.F != config.F:
        raise ValueError("dataset horizon does not match the network configuration")
    if any(s.ego_future is None for s in dataset):
        raise ValueError("every training scene needs a ground-truth future")
    params = init_params(config, seed) if init is None else NetParams(config, init.flat.copy())
    result = TrainResult(params.copy())
    if settings.max_epochs == 0 or len(dataset) == 0:
        return result

    dt = dataset.meta.dt
    train_batch = build_batch(dataset.scenes, config, dt)
    val_batch = build_batch(val_dataset.scenes, config, dt) if val_dataset is not None and len(val_dataset) else None
    rng = np.random.default_rng(seed)
    opt = Adam(params.size, settings)
    best = np.inf
    stale = 0
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        writer.writerow(LOSS_LOG_COLUMNS)
    try:
        for epoch in range(1, settings.max_epochs + 1):
            order = rng.permutation(train_batch.size)
            lr = settings.lr_at(epoch)
            sums = np.zeros(2)
            for start in range(0, len(order), settings.batch_size):
                idx = np.sort(order[start : start + settings.batch_size])
                sub = train_batch.subset(idx)
                grad = np.zeros_like(params.flat)
                loss, mse, uce = total_loss(params, sub, grad)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", result.params.copy())
                loss.backward()
                if not np.all(np.isfinite(grad)):
                    raise TrainingDiverged(f"non-finite gradient at epoch {epoch}", result.params.copy())
                if settings.grad_clip > 0:
                    norm = np.linalg.norm(grad)
                    if norm > settings.grad_clip:
                        grad *= settings.grad_clip / norm
                opt.step(params.flat, grad, lr)
                sums += np.array([mse, uce]) * sub.size
            train_mse, train_uce = sums / train_batch.size
            if val_batch is not None:
                val_total = evaluate_loss(params, val_batch)[0]
            else:
                val_total = config.w_mse * train_mse + config.w_uce * train_uce
            if not np.isfinite(val_total):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", result.params.copy())
            rec = EpochRecord(epoch, float(train_mse), float(train_uce), float(val_total))
            result.history.append(rec)
            if writer is not None:
                writer.writerow([epoch, f"{train_mse:.10g}", f"{train_uce:.10g}", f"{val_total:.10g}"])
                log_file.flush()
            if on_epoch is not None:
                on_epoch(rec)
            if val_total < best:
                best, stale = val_total, 0
                result.params = params.copy()
                result.best_epoch = epoch
            else:
                stale += 1
                if val_batch is not None and stale >= settings.patience:
                    break
        if val_batch is None:
            result.params = params.copy()
            result.best_epoch = len(result.history)
    finally:
        if log_file is not None:
            log_file.close()
    return result


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, params: NetParams, metadata: Optional[dict] = None) -> None:
    """npz container: format version, config JSON, flat parameters, metadata JSON."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            version=np.array(CHECKPOINT_VERSION),
            config=np.array(json.dumps(params.cfg.to_dict(), sort_keys=True)),
            params=params.flat,
            metadata=np.array(json.dumps(metadata or {}, sort_keys=True)),
        )


def load_checkpoint(path) -> tuple[NetParams, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = NetConfig(**json.loads(str(data["config"])))
        params = NetParams(cfg, np.array(data["params"], dtype=float))
        meta = json.loads(str(data["metadata"]))
    return params, meta
