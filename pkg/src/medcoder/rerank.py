"""Two-stage coding for label spaces too large for one prompt.

A cheap first-stage scorer ranks the full label space; the top-k codes
become the prompt label space for the second stage. Codes outside the
shortlist are decided negative, so final positives are always contained
in the shortlist. When the shortlist itself exceeds prompt capacity, it
is split into chunks scored in separate prompts (disabled by default:
``chunk_size=None`` surfaces the capacity error instead).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .prompt import LabelSpace

__all__ = ["RerankConfig", "rerank_note", "rerank_examples"]

# first_stage(note_tokens) -> scores over the full label space
FirstStage = Callable[[Sequence[str]], np.ndarray]
# second_stage(note_tokens, candidate_labels) -> per-candidate probabilities
SecondStage = Callable[[Sequence[str], LabelSpace], np.ndarray]


@dataclass(frozen=True)
class RerankConfig:
    top_k: int = 300
    chunk_size: int | None = None  # None: single prompt, may raise CapacityError
    threshold: float = 0.5

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1 when set")


def rerank_note(
    note_tokens: Sequence[str],
    labels: LabelSpace,
    first_stage: FirstStage,
    second_stage: SecondStage,
    cfg: RerankConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (scores, decisions) over the full label space. Non-candidates
    score 0 and are decided negative."""
    if cfg.top_k > labels.n_codes:
        raise ConfigError(f"top_k {cfg.top_k} exceeds label space of {labels.n_codes}")
    s1 = np.asarray(first_stage(note_tokens), dtype=np.float64)
    if s1.shape != (labels.n_codes,):
        raise ConfigError(f"first stage returned {s1.shape}, expected ({labels.n_codes},)")
    # Candidates keep their original label-space order inside the prompt, so
    # top_k == n_codes degenerates to running the second stage directly.
    candidate_idx = np.sort(np.argsort(-s1, kind="stable")[: cfg.top_k])

    chunk = cfg.chunk_size or cfg.top_k
    scores = np.zeros(labels.n_codes)
    decisions = np.zeros(labels.n_codes, dtype=bool)
    for start in range(0, len(candidate_idx), chunk):
        part = candidate_idx[start : start + chunk]
        probs = np.asarray(second_stage(note_tokens, labels.subset(part)))
        scores[part] = probs
        decisions[part] = probs >= cfg.threshold
    return scores, decisions


def rerank_examples(
    examples,
    labels: LabelSpace,
    first_stage: FirstStage,
    second_stage: SecondStage,
    cfg: RerankConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (scores, decisions) for a list of coding examples."""
    score_rows = []
    decision_rows = []
    for ex in examples:
        s, d = rerank_note(ex.tokens, labels, first_stage, second_stage, cfg)
        score_rows.append(s)
        decision_rows.append(d)
    return np.stack(score_rows), np.stack(decision_rows)
