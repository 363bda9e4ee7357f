"""Pretraining tasks: next-location prediction (causal) and mask imputation (bidirectional)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn.checkpoint import Checkpoint
from .nn.config import ModelConfig, TrainingConfig
from .nn.model import PMTModel, cross_entropy
from .nn.optim import AdamState, NonFiniteGradientError, adam_step, lr_at
from .seeding import derive_seed, rng_for
from .temporal import EncodingSpec
from .trajectory import MISSING, TrajectorySequence

log = logging.getLogger(__name__)

TASKS = ("next", "mask")


@dataclass
class TaskBatch:
    input_tokens: np.ndarray
    window_indices: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.input_tokens)


def stack_sequences(seqs: Sequence[TrajectorySequence], origin_epoch: int | None = None):
    """(tokens, window indices) as (B, T) arrays; MISSING stays -1."""
    if not seqs:
        raise ValueError("no sequences")
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise ValueError(f"sequences must share a length, got {sorted(lengths)}")
    origin = min(s.start_epoch for s in seqs) if origin_epoch is None else origin_epoch
    tokens = np.stack([s.tokens for s in seqs])
    windows = np.stack([s.window_indices(origin) for s in seqs])
    return tokens, windows


def to_model_tokens(tokens: np.ndarray, n_regions: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    return np.where(tokens == MISSING, n_regions, tokens)


def _as_arrays(data, origin_epoch=None):
    if isinstance(data, tuple):
        tokens, windows = data
        return np.atleast_2d(np.asarray(tokens, np.int64)), np.atleast_2d(np.asarray(windows, np.int64))
    return stack_sequences(data, origin_epoch)


def next_location_batch(data, n_regions: int, origin_epoch: int | None = None) -> TaskBatch:
    """Inputs are positions ``0..T-2``, targets ``1..T-1``; MISSING targets are not scored."""
    tokens, windows = _as_arrays(data, origin_epoch)
    if tokens.shape[1] < 2:
        raise ValueError("next-location batches need T >= 2")
    tok = to_model_tokens(tokens, n_regions)
    targets = tok[:, 1:]
    return TaskBatch(tok[:, :-1], windows[:, :-1], targets, targets < n_regions)


def mask_batch(data, n_regions: int, mask_prob: float, rng: np.random.Generator,
               origin_epoch: int | None = None) -> TaskBatch:
    """Replace each position by MASK with probability ``mask_prob``; score masked real regions."""
    tokens, windows = _as_arrays(data, origin_epoch)
    tok = to_model_tokens(tokens, n_regions)
    masked = rng.random(tok.shape) < mask_prob
    inputs = np.where(masked, n_regions + 1, tok)
    return TaskBatch(inputs, windows, tok, masked & (tok < n_regions))


def make_segments(tokens: np.ndarray, windows: np.ndarray, length: int | None,
                  stride: int | None = None, offset: int = 0):
    """Cut (B, T) arrays into equal (N, length) windows starting at ``offset``.

    The trailing remainder shorter than ``length`` is dropped.
    """
    B, T = tokens.shape
    if length is None or length >= T:
        return tokens, windows
    stride = stride or length
    starts = np.arange(offset, T - length + 1, stride)
    if starts.size == 0:
        return tokens[:, :0], windows[:, :0]
    idx = starts[:, None] + np.arange(length)
    return (tokens[:, idx].reshape(-1, length), windows[:, idx].reshape(-1, length))


def build_batch(task: str, tokens, windows, n_regions: int, cfg: TrainingConfig, rng) -> TaskBatch:
    if task == "next":
        return next_location_batch((tokens, windows), n_regions)
    if task == "mask":
        return mask_batch((tokens, windows), n_regions, cfg.mask_prob, rng)
    raise ValueError(f"unknown task {task!r}")


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or gradient; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint, log_rows: list):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log_rows = log_rows


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    checkpoint_paths: list = field(default_factory=list)

    @property
    def loss_curve(self) -> list[float]:
        return [r["train_loss"] for r in self.log_rows]


def write_loss_log(path: str | Path, rows: list[dict]) -> None:
    with_eval = any(r.get("eval_loss") is not None for r in rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "train_loss"] + (["eval_loss"] if with_eval else []))
        for r in rows:
            row = [r["step"], repr(r["lr"]), repr(r["train_loss"])]
            if with_eval:
                row.append("" if r.get("eval_loss") is None else repr(r["eval_loss"]))
            w.writerow(row)


def evaluation_loss(model: PMTModel, task: str, tokens, windows, cfg: TrainingConfig,
                    seed: int = 0) -> float:
    """Unsmoothed loss without dropout; mask-task masks come from a fixed seed."""
    n_regions = model.config.V_out
    length = None if cfg.context_length is None else cfg.context_length + (task == "next")
    seg_t, seg_w = make_segments(tokens, windows, length, cfg.context_length)
    rng = rng_for(seed, "eval_mask")
    total, count = 0.0, 0
    for i in range(0, len(seg_t), max(cfg.batch_size, 1)):
        b = build_batch(task, seg_t[i:i + cfg.batch_size], seg_w[i:i + cfg.batch_size],
                        n_regions, cfg, rng)
        logits = model.logits(b.input_tokens, b.window_indices, causal=(task == "next"))
        value, _, n = cross_entropy(logits, b.targets, b.loss_mask, 0.0)
        total += value * n
        count += n
    return total / count if count else float("nan")


def train(task: str, seqs: Sequence[TrajectorySequence], model_config: ModelConfig,
          training_config: TrainingConfig, init_checkpoint: Checkpoint | None = None,
          eval_seqs: Sequence[TrajectorySequence] | None = None,
          encoding: EncodingSpec | None = None, out_dir: str | Path | None = None,
          origin_epoch: int | None = None, dtype=np.float32) -> TrainResult:
    """Run the pretraining loop for ``task`` ("next" or "mask").

    With ``init_checkpoint`` every tensor whose name and shape match is copied
    in before training (the mask task starts from a next-task checkpoint).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    cfg = training_config
    if init_checkpoint is not None:
        if init_checkpoint.model_config != model_config:
            raise ValueError("init checkpoint model config does not match: "
                             f"{init_checkpoint.model_config} vs {model_config}")
        encoding = encoding or init_checkpoint.encoding
    encoding = encoding or EncodingSpec(model_config.D)

    model = PMTModel(model_config, encoding, dtype=dtype, seed=derive_seed(cfg.seed, "init", task))
    if init_checkpoint is not None:
        for name, arr in init_checkpoint.params.items():
            if name in model.params and model.params[name].shape == arr.shape:
                model.params[name] = np.array(arr, dtype=model.dtype)

    if origin_epoch is None:
        origin_epoch = min(s.start_epoch for s in seqs)
    tokens, windows = stack_sequences(seqs, origin_epoch)
    eval_arrays = stack_sequences(eval_seqs, origin_epoch) if eval_seqs else None
    n_regions = model_config.V_out
    causal = task == "next"
    length = None if cfg.context_length is None else cfg.context_length + (task == "next")
    rng = rng_for(cfg.seed, "train", task)
    opt = AdamState()
    out_dir = Path(out_dir) if out_dir is not None else None
    meta = {"task": task, "seed": cfg.seed, "origin_epoch": int(origin_epoch),
            "context_length": cfg.context_length}

    def snapshot(step):
        return Checkpoint.from_model(model, opt, **meta, step=step)

    result = TrainResult(snapshot(0))
    last_good = result.checkpoint
    step = 0
    for epoch in range(cfg.epochs):
        offset = int(rng.integers(0, cfg.context_length)) if length is not None else 0
        seg_t, seg_w = make_segments(tokens, windows, length, cfg.context_length, offset)
        order = rng.permutation(len(seg_t))
        epoch_total, epoch_n = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = build_batch(task, seg_t[idx], seg_w[idx], n_regions, cfg, rng)
            value, grads, n = model.loss_and_grads(
                batch.input_tokens, batch.window_indices, batch.targets, batch.loss_mask,
                causal=causal, smoothing=cfg.label_smoothing, train_mode=True, rng=rng)
            if n == 0:
                continue
            step += 1
            lr = lr_at(step, cfg.warmup_steps, model_config.D, cfg.c, cfg.lr_cap, cfg.schedule)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at step {step}", last_good,
                                            result.log_rows)
            try:
                adam_step(model.params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.epsilon)
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"step {step}: {exc}", last_good,
                                            result.log_rows) from exc
            row = {"step": step, "lr": lr, "train_loss": value, "eval_loss": None}
            if cfg.eval_every and eval_arrays is not None and step % cfg.eval_every == 0:
                row["eval_loss"] = evaluation_loss(model, task, *eval_arrays, cfg, cfg.seed)
            result.log_rows.append(row)
            epoch_total += value * n
            epoch_n += n
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_good = snapshot(step)
                if out_dir is not None:
                    result.checkpoint_paths.append(last_good.save(out_dir / f"{task}-{step}.pmt"))
        result.epoch_losses.append(epoch_total / epoch_n if epoch_n else float("nan"))
        last_good = snapshot(step)
        log.info("task=%s epoch=%d step=%d loss=%.4f", task, epoch + 1, step,
                 result.epoch_losses[-1])
    result.checkpoint = snapshot(step)
    if out_dir is not None:
        path = out_dir / f"{task}-{step}.pmt"
        if not result.checkpoint_paths or result.checkpoint_paths[-1] != path:
            result.checkpoint_paths.append(result.checkpoint.save(path))
        write_loss_log(out_dir / f"{task}-loss.csv", result.log_rows)
    return result
