"""Standard fine-tuning comparator: encode the note and every code
description separately, cross-attend description [CLS] vectors over the
note states, and decide each code with a freshly initialized binary head.

Unlike the prompt head, this introduces new parameters at fine-tune time
(one query and one key projection plus the 2 x H binary head) and fuses
descriptions with the note only after encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import preprocess
from .encoder import EncoderConfig, TokenSequence, encode, encode_segments
from .errors import InputError, ShapeError
from .prompt import LabelSpace
from .vocab import CLS, Vocabulary

__all__ = [
    "CrossAttentionHead",
    "init_cross_attention_head",
    "label_attend",
    "binary_head",
    "baseline_training_loss",
    "score_label_attention",
    "new_parameter_counts",
    "description_segments",
    "note_sequence",
]


@dataclass
class CrossAttentionHead:
    wq: Tensor  # (H, H)
    wk: Tensor  # (H, H)
    wb: Tensor  # (2, H); row 0 is the positive class

    def named(self) -> dict[str, Tensor]:
        return {"head.wq": self.wq, "head.wk": self.wk, "head.wb": self.wb}


def init_cross_attention_head(hidden_dim: int, rng: np.random.Generator) -> CrossAttentionHead:
    s = 1.0 / np.sqrt(hidden_dim)
    return CrossAttentionHead(
        wq=ad.parameter(rng.uniform(-s, s, (hidden_dim, hidden_dim)), "head.wq"),
        wk=ad.parameter(rng.uniform(-s, s, (hidden_dim, hidden_dim)), "head.wk"),
        wb=ad.parameter(rng.uniform(-s, s, (2, hidden_dim)), "head.wb"),
    )


def new_parameter_counts(hidden_dim: int) -> dict[str, int]:
    """Newly introduced weights at fine-tune time.

    ``cross_attention`` counts one H x H projection matrix (the query and
    key projections are identically sized); ``binary_head`` counts the
    2 x H output head.
    """
    return {"cross_attention": hidden_dim * hidden_dim, "binary_head": 2 * hidden_dim}


def label_attend(h_c_cls: Tensor, h_t: Tensor, head: CrossAttentionHead) -> Tensor:
    """alpha = row-softmax((Wq h_c)(Wk h_t)^T); returns alpha @ h_t (N_c, H)."""
    if h_c_cls.shape[1] != h_t.shape[1]:
        raise ShapeError(f"hidden dims differ: {h_c_cls.shape} vs {h_t.shape}")
    q = ad.matmul(h_c_cls, head.wq)
    k = ad.matmul(h_t, head.wk)
    alpha = ad.softmax(ad.matmul(q, ad.transpose(k)), axis=1)
    return ad.matmul(alpha, h_t)


def binary_head(h_f: Tensor, wb: Tensor) -> Tensor:
    """Per-code positive-class probability from a 2-way softmax."""
    logits = ad.matmul(h_f, ad.transpose(wb))
    return ad.take_column(ad.softmax(logits, axis=1), 0)


def baseline_training_loss(
    h_c_cls: Tensor, h_t: Tensor, head: CrossAttentionHead, gold
) -> tuple[Tensor, np.ndarray]:
    """Mean two-way cross-entropy over codes; returns (loss, P(positive))."""
    gold = np.asarray(gold)
    if gold.shape != (h_c_cls.shape[0],):
        raise ShapeError(f"gold shape {gold.shape} vs {h_c_cls.shape[0]} codes")
    h_f = label_attend(h_c_cls, h_t, head)
    logits = ad.matmul(h_f, ad.transpose(head.wb))
    targets = np.where(gold == 1, 0, 1)
    loss = ad.cross_entropy(logits, targets)
    z = logits.values
    probs = np.exp(z[:, 0] - np.logaddexp(z[:, 0], z[:, 1]))
    return loss, probs


def note_sequence(note_tokens: Sequence[str], vocab: Vocabulary, max_positions: int) -> TokenSequence:
    """"[CLS] note" ids, tail-truncated to the position limit."""
    if not note_tokens:
        raise InputError("empty note")
    ids = np.concatenate([[vocab.id_of(CLS)], vocab.encode(note_tokens)])
    return TokenSequence(ids[:max_positions])


def description_segments(labels: LabelSpace, vocab: Vocabulary) -> list[np.ndarray]:
    cls_id = vocab.id_of(CLS)
    segments = []
    for _, desc in labels.codes:
        segments.append(np.concatenate([[cls_id], vocab.encode(preprocess(desc))]))
    return segments


def score_label_attention(
    note_tokens: Sequence[str],
    labels: LabelSpace,
    params: dict[str, Tensor],
    head: CrossAttentionHead,
    config: EncoderConfig,
    vocab: Vocabulary,
) -> np.ndarray:
    """Inference-only per-code probabilities for one note."""
    h_t = encode(note_sequence(note_tokens, vocab, config.max_positions), params, config)
    h_c = encode_segments(description_segments(labels, vocab), params, config)
    h_f = label_attend(h_c, h_t, head)
    return binary_head(h_f, head.wb).values.copy()
