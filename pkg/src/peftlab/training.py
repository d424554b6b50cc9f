"""Sparse fine-tuning loop: frozen base, regularized objective, AdamW on the
adapter tensors only. Also hosts the brief full-parameter base-training pass
used to prepare the frozen stand-in model.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import adapters as A
from . import model as M
from . import tensor as T
from .data import LabeledExample, Vocabulary
from .optim import AdamW
from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    epochs: int = 1
    lam: float = 0.0
    seed: int = 0
    prune_at: int | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


@dataclass
class TrainReport:
    epoch_total_loss: list[float] = field(default_factory=list)
    epoch_task_loss: list[float] = field(default_factory=list)
    epoch_reg: list[float] = field(default_factory=list)
    trainable_fraction: float = 0.0
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"epoch_total_loss": self.epoch_total_loss,
                "epoch_task_loss": self.epoch_task_loss,
                "epoch_reg": self.epoch_reg,
                "trainable_fraction": self.trainable_fraction,
                "wall_seconds": self.wall_seconds}


def total_loss(task_loss: Tensor, adapter_set: A.AdapterSet | None, lam: float) -> Tensor:
    if adapter_set is None or lam == 0.0:
        return task_loss
    return T.add(task_loss, T.scale(A.regularizer(adapter_set), lam))


def prepare_sequences(examples: list[LabeledExample], vocab: Vocabulary):
    """Tokenized (input_ids, target_ids) pairs for the query side of each example."""
    return [(vocab.encode(ex.prompt_text), vocab.encode(ex.target_text) + [M.EOS_ID])
            for ex in examples]


def shot_prefix_ids(shots: list[LabeledExample] | None, k: int, vocab: Vocabulary) -> list[int] | None:
    """Token ids of the k-shot exemplar prefix, encoded once as shared context."""
    if not k:
        return None
    if shots is None or len(shots) < k:
        raise TrainingError(f"need {k} shots, got {0 if shots is None else len(shots)}")
    return vocab.encode("\n".join(f"{s.prompt_text} {s.target_text}" for s in shots[:k]))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _clip_grads(tensors: list[Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((t.grad ** 2).sum()) for t in tensors if t.grad is not None))
    if total > max_norm:
        s = max_norm / total
        for t in tensors:
            if t.grad is not None:
                t.grad *= s


def _run_loop(params: M.ModelParams, adapter_set: A.AdapterSet | None,
              sequences, cfg: TrainConfig, trainables: list[Tensor],
              prefix_ids: list[int] | None = None) -> TrainReport:
    if not sequences:
        raise TrainingError("training data is empty")
    start = time.time()
    opt = AdamW(trainables, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    report = TrainReport()
    prune_at = cfg.prune_at
    if prune_at is None and adapter_set is not None and adapter_set.method == "adalora":
        prune_at = math.ceil(cfg.epochs / 2)
    for epoch in range(1, cfg.epochs + 1):
        if adapter_set is not None and adapter_set.method == "adalora" and epoch == prune_at:
            A.prune_ranks(adapter_set)
        totals, tasks, regs = [], [], []
        for bi, idx in enumerate(_batches(len(sequences), cfg.batch_size, rng)):
            context = (M.encode_context(params, adapter_set, prefix_ids, rng=drop_rng)
                       if prefix_ids is not None else None)
            batch_loss = None
            for i in idx:
                input_ids, target_ids = sequences[i]
                logits = M.forward_logits(params, adapter_set, input_ids, target_ids,
                                          rng=drop_rng, context=context)
                li = T.cross_entropy(logits, target_ids, ignore_index=M.PAD_ID)
                batch_loss = li if batch_loss is None else T.add(batch_loss, li)
            task = T.scale(batch_loss, 1.0 / len(idx))
            loss = total_loss(task, adapter_set, cfg.lam)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {bi}")
            T.backward(loss)
            if adapter_set is not None:
                adapter_set.mask_pruned_grads()
            if cfg.grad_clip is not None:
                _clip_grads(trainables, cfg.grad_clip)
            opt.step()
            if adapter_set is not None:
                adapter_set.clamp_pruned()
            totals.append(float(loss.data))
            tasks.append(float(task.data))
            regs.append(float(loss.data) - float(task.data))
        report.epoch_total_loss.append(float(np.mean(totals)))
        report.epoch_task_loss.append(float(np.mean(tasks)))
        report.epoch_reg.append(float(np.mean(regs)))
    report.wall_seconds = time.time() - start
    return report


def train(params: M.ModelParams, adapter_set: A.AdapterSet,
          examples: list[LabeledExample], cfg: TrainConfig, vocab: Vocabulary,
          shots: list[LabeledExample] | None = None, k: int = 0) -> tuple[A.AdapterSet, TrainReport]:
    """Adapter fine-tuning with the base frozen; only adapter tensors change."""
    params.set_requires_grad(False)
    sequences = prepare_sequences(examples, vocab)
    report = _run_loop(params, adapter_set, sequences, cfg, adapter_set.trainable_tensors(),
                       shot_prefix_ids(shots, k, vocab))
    report.trainable_fraction = A.trainable_fraction(adapter_set, params)
    return adapter_set, report


def train_base(params: M.ModelParams, examples: list[LabeledExample],
               cfg: TrainConfig, vocab: Vocabulary,
               shots: list[LabeledExample] | None = None, k: int = 0) -> TrainReport:
    """Brief full-parameter pass used to produce the frozen stand-in base."""
    params.set_requires_grad(True)
    try:
        sequences = prepare_sequences(examples, vocab)
        trainables = [t for _, t in params.named_tensors()]
        report = _run_loop(params, None, sequences, cfg, trainables,
                           shot_prefix_ids(shots, k, vocab))
        report.trainable_fraction = 1.0
    finally:
        params.set_requires_grad(False)
    return report
