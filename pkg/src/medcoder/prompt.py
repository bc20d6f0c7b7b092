"""Prompt assembly and verbalizer readout for multi-label coding.

A prompt interleaves every candidate code description with a mask slot
("desc : [MASK] ,"), closes the candidate region with ".", then appends
the note and a final ".". Each code's yes/no decision is read from the
hidden state at its mask slot through the two verbalizer rows of the LM
head. Descriptions and the note attend to each other inside the encoder,
so the fusion happens from the first layer on.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import preprocess
from .encoder import EncoderConfig, TokenSequence, encode, mark_globals
from .errors import CapacityError, ConfigError, InputError, ShapeError
from .vocab import MASK, Vocabulary

__all__ = [
    "LabelSpace",
    "PromptInput",
    "Verbalizer",
    "FreezeSetting",
    "build_prompt",
    "prompt_with_globals",
    "verbalizer_logits",
    "code_probabilities",
    "prompt_loss",
    "prompt_training_loss",
    "score_prompt",
    "apply_freeze",
]


@dataclass(frozen=True)
class LabelSpace:
    """Ordered candidate codes; mask slot i always belongs to code i."""

    codes: tuple[tuple[str, str], ...]  # (code_id, description)

    def __post_init__(self):
        if not self.codes:
            raise InputError("LabelSpace: needs at least one code")
        for code_id, desc in self.codes:
            if not desc or not preprocess(desc):
                raise InputError(f"LabelSpace: empty description for {code_id}")
        ids = [c for c, _ in self.codes]
        if len(set(ids)) != len(ids):
            raise InputError("LabelSpace: duplicate code ids")

    @property
    def n_codes(self) -> int:
        return len(self.codes)

    @property
    def code_ids(self) -> list[str]:
        return [c for c, _ in self.codes]

    def subset(self, indices: Sequence[int]) -> "LabelSpace":
        return LabelSpace(tuple(self.codes[i] for i in indices))


@dataclass
class PromptInput:
    sequence: TokenSequence
    mask_positions: np.ndarray  # (N_c,)
    description_spans: list[tuple[int, int]]
    note_span: tuple[int, int]

    @property
    def n_codes(self) -> int:
        return len(self.mask_positions)


@dataclass(frozen=True)
class Verbalizer:
    yes_token_id: int
    no_token_id: int

    def __post_init__(self):
        if self.yes_token_id == self.no_token_id:
            raise ConfigError("Verbalizer: yes and no must be distinct tokens")

    @classmethod
    def from_vocab(cls, vocab: Vocabulary) -> "Verbalizer":
        return cls(vocab.id_of("yes"), vocab.id_of("no"))


class FreezeSetting(Enum):
    FULL = "full"
    LM_HEAD_ONLY = "lm_head_only"
    LM_HEAD_PLUS_FIRST_LAYER = "lm_head_plus_first_layer"
    LM_HEAD_PLUS_LAST_LAYER = "lm_head_plus_last_layer"
    ZERO_SHOT = "zero_shot"

    @classmethod
    def parse(cls, name: str) -> "FreezeSetting":
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(
                f"unknown freeze setting {name!r}; one of {[s.value for s in cls]}"
            ) from None


def build_prompt(
    labels: LabelSpace,
    note_tokens: Sequence[str],
    vocab: Vocabulary,
    max_positions: int,
) -> PromptInput:
    """Assemble "d1 : [MASK] , ... , dN : [MASK] . note ." as token ids.

    The note tail is truncated to fit ``max_positions``; the candidate
    region is never truncated. Raises CapacityError when the candidate
    region alone (plus one note token) does not fit.
    """
    note_tokens = list(note_tokens)
    if not note_tokens:
        raise InputError("build_prompt: empty note")

    tokens: list[str] = []
    mask_positions: list[int] = []
    spans: list[tuple[int, int]] = []
    n = labels.n_codes
    for i, (_, desc) in enumerate(labels.codes):
        desc_tokens = preprocess(desc)
        spans.append((len(tokens), len(tokens) + len(desc_tokens)))
        tokens.extend(desc_tokens)
        tokens.append(":")
        mask_positions.append(len(tokens))
        tokens.append(MASK)
        tokens.append("," if i < n - 1 else ".")

    room = max_positions - len(tokens) - 1  # final "."
    if room < 1:
        raise CapacityError(
            f"candidate region of {len(tokens)} tokens leaves no room for the note "
            f"within {max_positions} positions"
        )
    note = note_tokens[:room]
    note_span = (len(tokens), len(tokens) + len(note))
    tokens.extend(note)
    tokens.append(".")

    return PromptInput(
        sequence=TokenSequence(vocab.encode(tokens)),
        mask_positions=np.array(mask_positions, dtype=np.int64),
        description_spans=spans,
        note_span=note_span,
    )


def prompt_with_globals(prompt: PromptInput, stride: int) -> TokenSequence:
    """Description tokens every ``stride`` positions plus all mask slots go global."""
    return mark_globals(prompt.sequence, prompt.description_spans, stride, prompt.mask_positions)


# ---------------------------------------------------------------------------
# Readout
# ---------------------------------------------------------------------------


def verbalizer_logits(h_p: Tensor, prompt: PromptInput, v: Verbalizer, lm_head: Tensor) -> Tensor:
    """(N_c, 2) logits: column 0 = yes, column 1 = no."""
    if h_p.shape[0] != len(prompt.sequence):
        raise ShapeError(
            f"hidden states rows {h_p.shape[0]} != prompt length {len(prompt.sequence)}"
        )
    rows = ad.embedding_lookup(h_p, prompt.mask_positions)
    w_pair = ad.embedding_lookup(lm_head, np.array([v.yes_token_id, v.no_token_id]))
    return ad.matmul(rows, ad.transpose(w_pair))


def code_probabilities(h_p: Tensor, prompt: PromptInput, v: Verbalizer, lm_head: Tensor) -> Tensor:
    """Per-code P(positive): yes-component of the two-way softmax at each mask."""
    logits = verbalizer_logits(h_p, prompt, v, lm_head)
    return ad.take_column(ad.softmax(logits, axis=1), 0)


def prompt_loss(probs: Tensor, gold) -> Tensor:
    """Mean over codes of -log P(observed label). probs must lie in (0, 1)."""
    gold = np.asarray(gold)
    if probs.values.ndim != 1 or gold.shape != probs.shape:
        raise ShapeError(f"prompt_loss: gold shape {gold.shape} vs probs {probs.shape}")
    if not np.all((gold == 0) | (gold == 1)):
        raise InputError("prompt_loss: gold labels must be 0/1")
    # P(observed) = p if y=1 else 1-p, affine in p.
    slope = ad.tensor(2.0 * gold - 1.0)
    offset = ad.tensor(1.0 - gold)
    p_observed = ad.add(ad.mul(probs, slope), offset)
    return ad.scale(ad.sum_all(ad.log(p_observed)), -1.0 / len(gold))


def prompt_training_loss(
    h_p: Tensor, prompt: PromptInput, v: Verbalizer, lm_head: Tensor, gold
) -> tuple[Tensor, np.ndarray]:
    """Numerically fused equivalent of ``prompt_loss``; returns (loss, P(yes))."""
    gold = np.asarray(gold)
    if gold.shape != (prompt.n_codes,):
        raise ShapeError(f"gold shape {gold.shape} vs {prompt.n_codes} codes")
    logits = verbalizer_logits(h_p, prompt, v, lm_head)
    targets = np.where(gold == 1, 0, 1)
    loss = ad.cross_entropy(logits, targets)
    z = logits.values
    probs = np.exp(z[:, 0] - np.logaddexp(z[:, 0], z[:, 1]))
    return loss, probs


def score_prompt(
    note_tokens: Sequence[str],
    labels: LabelSpace,
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
    v: Verbalizer,
) -> np.ndarray:
    """Inference-only per-code probabilities for one note."""
    prompt = build_prompt(labels, note_tokens, vocab, config.max_positions)
    seq = prompt_with_globals(prompt, config.global_stride)
    h_p = encode(seq, params, config)
    probs = code_probabilities(h_p, prompt, v, params["lm_head"])
    return probs.values.copy()


# ---------------------------------------------------------------------------
# Parameter freezing
# ---------------------------------------------------------------------------


def _layer_count(params: dict[str, Tensor]) -> int:
    layers = {int(n.split(".", 1)[0][5:]) for n in params if n.startswith("layer")}
    return max(layers) + 1 if layers else 0


def apply_freeze(params: dict[str, Tensor], setting: FreezeSetting | str) -> list[str]:
    """Mark exactly the selected parameters trainable; returns their names."""
    if isinstance(setting, str):
        setting = FreezeSetting.parse(setting)
    if setting is FreezeSetting.FULL:
        selected = list(params)
    elif setting is FreezeSetting.ZERO_SHOT:
        selected = []
    elif setting is FreezeSetting.LM_HEAD_ONLY:
        selected = ["lm_head"]
    elif setting is FreezeSetting.LM_HEAD_PLUS_FIRST_LAYER:
        selected = ["lm_head"] + [n for n in params if n.startswith("layer0.")]
    elif setting is FreezeSetting.LM_HEAD_PLUS_LAST_LAYER:
        last = _layer_count(params) - 1
        selected = ["lm_head"] + [n for n in params if n.startswith(f"layer{last}.")]
    else:  # pragma: no cover
        raise ConfigError(f"unhandled freeze setting {setting}")
    chosen = set(selected)
    for name, p in params.items():
        p.requires_grad = name in chosen
    return selected
