"""Optimizer and fine-tuning loops for the prompt head and the
label-attention baseline.

The optimizer is a momentum-free adaptive first-order method (RMS-scaled
gradient steps). Training is single-threaded; gradients accumulate over
``batch_size`` examples before each step. Per-epoch dev micro-F1 (at the
0.5 probability threshold) drives best-epoch tracking; the returned model
carries the best epoch's parameter snapshot and a dev-selected decision
threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .data import CodingExample
from .encoder import EncoderConfig, encode, encode_segments
from .errors import TrainingError
from .evaluation import micro_f1, select_threshold
from .label_attention import (
    CrossAttentionHead,
    baseline_training_loss,
    description_segments,
    init_cross_attention_head,
    note_sequence,
    score_label_attention,
)
from .prompt import (
    FreezeSetting,
    LabelSpace,
    Verbalizer,
    apply_freeze,
    build_prompt,
    code_probabilities,
    prompt_training_loss,
    prompt_with_globals,
)
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

__all__ = [
    "RmsProp",
    "clip_grad_norm",
    "TrainResult",
    "train_prompt_model",
    "train_label_attention_model",
    "gold_vector",
]


class RmsProp(object):
    """Adaptive per-parameter step sizes, no momentum."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, decay: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self._cache = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            c = self._cache[name]
            c *= self.decay
            c += (1.0 - self.decay) * p.grad * p.grad
            p.values -= self.lr * p.grad / (np.sqrt(c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_grad_norm(params: dict[str, Tensor], max_norm: float | None) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    grads = [p.grad for p in params.values() if p.requires_grad and p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm > 0:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def gold_vector(example: CodingExample, labels: LabelSpace) -> np.ndarray:
    return np.array([1 if c in example.gold_codes else 0 for c in labels.code_ids], dtype=np.int64)


@dataclass
class TrainResult:
    epoch_dev_f1: list[float]
    best_epoch: int  # 1-based
    threshold: float
    steps: int
    extras: dict = field(default_factory=dict)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.values.copy() for name, p in params.items()}


def _restore(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        p.values = snapshot[name].copy()


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} at step {step}")


def train_prompt_model(
    train_examples: list[CodingExample],
    dev_examples: list[CodingExample],
    labels: LabelSpace,
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 8,
    freeze: FreezeSetting | str = FreezeSetting.FULL,
    max_grad_norm: float = 1.0,
) -> TrainResult:
    """Fine-tune with the mask/verbalizer objective. Mutates ``params`` to
    the best-dev-epoch snapshot."""
    verbalizer = Verbalizer.from_vocab(vocab)
    trainable = apply_freeze(params, freeze)
    prompts = {
        ex.example_id: build_prompt(labels, ex.tokens, vocab, config.max_positions)
        for ex in train_examples + dev_examples
    }
    sequences = {
        ex_id: prompt_with_globals(p, config.global_stride) for ex_id, p in prompts.items()
    }

    def dev_scores() -> np.ndarray:
        rows = []
        for ex in dev_examples:
            h = encode(sequences[ex.example_id], params, config)
            rows.append(
                code_probabilities(h, prompts[ex.example_id], verbalizer, params["lm_head"]).values
            )
        return np.stack(rows) if rows else np.zeros((0, labels.n_codes))

    dev_gold = (
        np.stack([gold_vector(ex, labels) for ex in dev_examples])
        if dev_examples
        else np.zeros((0, labels.n_codes), dtype=np.int64)
    )

    opt = RmsProp(params, lr=lr)
    step = 0
    best = (-1.0, 0)
    best_snapshot = _snapshot(params)
    epoch_dev_f1: list[float] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_examples))
        pending = 0
        for pos, idx in enumerate(order):
            ex = train_examples[idx]
            if trainable:
                with Tape() as tape:
                    h = encode(sequences[ex.example_id], params, config)
                    loss, _ = prompt_training_loss(
                        h, prompts[ex.example_id], verbalizer, params["lm_head"],
                        gold_vector(ex, labels),
                    )
                    _check_finite(loss.item(), "prompt loss", step)
                    tape.backward(loss)
                pending += 1
                if pending == batch_size or pos == len(order) - 1:
                    clip_grad_norm(params, max_grad_norm)
                    opt.step()
                    opt.zero_grad()
                    pending = 0
            step += 1
        scores = dev_scores()
        f1 = micro_f1(scores >= 0.5, dev_gold) if len(dev_examples) else 0.0
        epoch_dev_f1.append(f1)
        if f1 > best[0]:
            best = (f1, epoch)
            best_snapshot = _snapshot(params)
        logger.info("prompt epoch %d: dev micro-F1 %.4f", epoch, f1)

    _restore(params, best_snapshot)
    threshold = 0.5
    if dev_examples:
        threshold = select_threshold(dev_scores(), dev_gold)
    return TrainResult(epoch_dev_f1, best[1] if best[1] else 1, threshold, step,
                       extras={"trainable": trainable})


def train_label_attention_model(
    train_examples: list[CodingExample],
    dev_examples: list[CodingExample],
    labels: LabelSpace,
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 8,
    max_grad_norm: float = 1.0,
    head: CrossAttentionHead | None = None,
) -> tuple[TrainResult, CrossAttentionHead]:
    """Standard fine-tuning: encoder plus freshly initialized attention head."""
    if head is None:
        head = init_cross_attention_head(config.hidden_dim, rng)
    for p in params.values():
        p.requires_grad = True
    all_params = dict(params)
    all_params.update(head.named())
    segments = description_segments(labels, vocab)
    note_seqs = {
        ex.example_id: note_sequence(ex.tokens, vocab, config.max_positions)
        for ex in train_examples + dev_examples
    }

    def dev_scores() -> np.ndarray:
        rows = [
            score_label_attention(ex.tokens, labels, params, head, config, vocab)
            for ex in dev_examples
        ]
        return np.stack(rows) if rows else np.zeros((0, labels.n_codes))

    dev_gold = (
        np.stack([gold_vector(ex, labels) for ex in dev_examples])
        if dev_examples
        else np.zeros((0, labels.n_codes), dtype=np.int64)
    )

    opt = RmsProp(all_params, lr=lr)
    step = 0
    best = (-1.0, 0)
    best_snapshot = _snapshot(all_params)
    epoch_dev_f1: list[float] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_examples))
        pending = 0
        for pos, idx in enumerate(order):
            ex = train_examples[idx]
            with Tape() as tape:
                h_t = encode(note_seqs[ex.example_id], params, config)
                h_c = encode_segments(segments, params, config)
                loss, _ = baseline_training_loss(h_c, h_t, head, gold_vector(ex, labels))
                _check_finite(loss.item(), "baseline loss", step)
                tape.backward(loss)
            pending += 1
            if pending == batch_size or pos == len(order) - 1:
                clip_grad_norm(all_params, max_grad_norm)
                opt.step()
                opt.zero_grad()
                pending = 0
            step += 1
        scores = dev_scores()
        f1 = micro_f1(scores >= 0.5, dev_gold) if len(dev_examples) else 0.0
        epoch_dev_f1.append(f1)
        if f1 > best[0]:
            best = (f1, epoch)
            best_snapshot = _snapshot(all_params)
        logger.info("baseline epoch %d: dev micro-F1 %.4f", epoch, f1)

    _restore(all_params, best_snapshot)
    threshold = 0.5
    if dev_examples:
        threshold = select_threshold(dev_scores(), dev_gold)
    result = TrainResult(epoch_dev_f1, best[1] if best[1] else 1, threshold, step)
    return result, head
