"""Adam training loops for both pipelines.

Loss per sample is the squared Frobenius error between predicted and
ground-truth normalized 2D landmarks, averaged over the batch. With
``stage_loss_weight > 0`` the intermediate readouts are also penalized.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, NumericError
from ..evaluation import nme_batch
from ..morphable_model import MorphableModel
from ..nn.optim import AdamState, LearningRateSchedule, adam_step, clip_by_global_norm
from .config import PipelineConfig
from .dataset import Dataset
from .networks import build_network

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "loss", "lr", "nme_train")


class TrainingDiverged(NumericError):
    pass


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_FIELDS)
            for row in self.rows:
                writer.writerow([row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in LOG_FIELDS])


def batch_loss(network, images, targets, stage_weight: float = 0.0):
    """Forward + loss + backward on one batch; returns ``(loss, final predictions)``.

    ``targets`` are ``(N, 2, L)`` pixels. Gradients accumulate on the network.
    """
    n = images.shape[0]
    size = network.config.image_size
    outputs, cache = network.forward_batch(images)
    target = (targets / size).reshape(n, -1)
    diffs = [y - target for y in outputs]
    weights = [0.0] * len(outputs)
    weights[-1] = 1.0
    if stage_weight:
        for t in range(1, len(outputs) - 1):
            weights[t] = stage_weight
    loss = sum(w * float(np.sum(d * d)) for w, d in zip(weights, diffs)) / n
    grads = [2.0 * w * d / n if w else None for w, d in zip(weights, diffs)]
    network.backward_batch(grads, cache)
    return loss, outputs[-1].reshape(n, 2, -1) * size


def train(dataset: Dataset, config: PipelineConfig, seed: int = 0, model: MorphableModel | None = None,
          network=None, log_path=None, dump_dir=None, progress=None):
    """Train a fresh (or the given) network; returns ``(network, TrainingLog)``.

    ``progress`` is an optional callable receiving each log row.
    """
    if len(dataset) == 0:
        raise ContractViolation("training set is empty")
    if network is None:
        if model is None:
            raise ContractViolation("train needs a morphable model or a prebuilt network")
        network = build_network(config, model, seed)
    if dataset.image_size != config.image_size:
        raise ContractViolation(f"dataset images are {dataset.image_size}px, config expects {config.image_size}")
    if dataset.landmarks.shape[2] != network.landmark_count:
        raise ContractViolation(
            f"dataset has {dataset.landmarks.shape[2]} landmarks, network predicts {network.landmark_count}")

    rng = np.random.default_rng(seed)
    params, grads = network.trainable()
    state = AdamState()
    schedule = LearningRateSchedule(**config.schedule_kwargs())
    history = TrainingLog()
    gt = dataset.landmarks_2d()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        total, errors = 0.0, []
        lr = schedule(step, epoch)
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            lr = schedule(step, epoch)
            network.zero_grad()
            try:
                loss, pred = batch_loss(network, dataset.images[idx], gt[idx], config.stage_loss_weight)
            except NumericError as exc:
                _dump(dump_dir, dataset, idx, epoch, step)
                raise TrainingDiverged(f"{exc} at epoch {epoch} step {step} (batch {idx.tolist()})") from exc
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                _dump(dump_dir, dataset, idx, epoch, step)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step} (batch {idx.tolist()})")
            clip_by_global_norm(grads, config.grad_clip)
            adam_step(params, grads, state, lr)
            total += loss * len(idx)
            errors.append(nme_batch(pred, gt[idx]))
            step += 1
        row = {"epoch": epoch, "step": step, "loss": total / len(dataset), "lr": lr,
               "nme_train": float(np.mean(np.concatenate(errors)))}
        history.rows.append(row)
        log.debug("epoch %d loss %.6g nme %.4f", epoch, row["loss"], row["nme_train"])
        if progress is not None:
            progress(row)
    if log_path is not None:
        history.write_csv(log_path)
    return network, history


def _dump(dump_dir, dataset, idx, epoch, step):
    if dump_dir is None:
        return
    path = Path(dump_dir) / "nan_batch.npz"
    np.savez(path, images=dataset.images[idx], landmarks=dataset.landmarks[idx],
             indices=idx, epoch=epoch, step=step)
    log.error("offending batch written to %s", path)
