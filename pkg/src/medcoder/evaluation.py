"""Multi-label metrics, dev-set threshold selection, and prediction files.

Micro metrics pool every (example, label) cell; macro metrics average
per-label values. AUC is the pairwise ranking probability (ties count
half); labels whose gold column is single-class are excluded from the
macro average and reported. P@k / R@k score each example's k
highest-ranked labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, InputError, ShapeError

__all__ = [
    "PredictionMatrix",
    "MetricsResult",
    "micro_f1",
    "macro_f1",
    "auc_score",
    "metrics",
    "select_threshold",
    "format_report",
    "write_predictions",
    "read_predictions",
]

DEFAULT_KS = (5, 8, 15)


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def _validate(pred: np.ndarray, gold: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise ShapeError(f"{name}: predictions {pred.shape} vs gold {gold.shape}")
    return pred, gold


def micro_f1(decisions, gold) -> float:
    decisions, gold = _validate(decisions, gold, "micro_f1")
    d = decisions.astype(bool)
    g = gold.astype(bool)
    tp = float(np.sum(d & g))
    fp = float(np.sum(d & ~g))
    fn = float(np.sum(~d & g))
    return _f1(tp, fp, fn)


def macro_f1(decisions, gold) -> float:
    decisions, gold = _validate(decisions, gold, "macro_f1")
    d = decisions.astype(bool)
    g = gold.astype(bool)
    values = []
    for j in range(d.shape[1]):
        tp = float(np.sum(d[:, j] & g[:, j]))
        fp = float(np.sum(d[:, j] & ~g[:, j]))
        fn = float(np.sum(~d[:, j] & g[:, j]))
        values.append(_f1(tp, fp, fn))
    return float(np.mean(values)) if values else 0.0


def auc_score(scores: np.ndarray, gold: np.ndarray) -> float | None:
    """Rank-based pairwise AUC over a flat score/label vector; ties count
    half. None when gold is single-class (undefined)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gold = np.asarray(gold).ravel().astype(bool)
    n_pos = int(gold.sum())
    n_neg = gold.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[gold].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsResult:
    macro_auc: float
    micro_auc: float
    macro_f1: float
    micro_f1: float
    precision_at: dict[int, float]
    recall_at: dict[int, float]
    excluded_auc_labels: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "macro_auc": self.macro_auc,
            "micro_auc": self.micro_auc,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            **{f"p_at_{k}": v for k, v in self.precision_at.items()},
            **{f"r_at_{k}": v for k, v in self.recall_at.items()},
            "excluded_auc_labels": list(self.excluded_auc_labels),
        }


def metrics(
    scores: np.ndarray,
    decisions: np.ndarray,
    gold: np.ndarray,
    ks: Sequence[int] = DEFAULT_KS,
) -> MetricsResult:
    scores, gold = _validate(scores, gold, "metrics")
    decisions, _ = _validate(decisions, gold, "metrics")
    if scores.ndim != 2:
        raise ShapeError(f"metrics: expected (examples, labels), got {scores.shape}")
    n_examples, n_labels = scores.shape
    g = gold.astype(bool)

    micro_auc = auc_score(scores, g)
    if micro_auc is None:
        raise InputError("metrics: pooled gold is single-class, micro AUC undefined")

    per_label = []
    excluded = []
    for j in range(n_labels):
        a = auc_score(scores[:, j], g[:, j])
        if a is None:
            excluded.append(j)
        else:
            per_label.append(a)
    if not per_label:
        raise InputError("metrics: every label is single-class, macro AUC undefined")
    macro_auc = float(np.mean(per_label))

    precision_at: dict[int, float] = {}
    recall_at: dict[int, float] = {}
    gold_counts = g.sum(axis=1)
    order = np.argsort(-scores, axis=1, kind="stable")
    for k in ks:
        kk = min(k, n_labels)
        topk = order[:, :kk]
        hits = np.array([g[i, topk[i]].sum() for i in range(n_examples)], dtype=np.float64)
        precision_at[k] = float((hits / k).mean()) if n_examples else 0.0
        has_gold = gold_counts > 0
        recall_at[k] = (
            float((hits[has_gold] / gold_counts[has_gold]).mean()) if has_gold.any() else 0.0
        )

    return MetricsResult(
        macro_auc=macro_auc,
        micro_auc=float(micro_auc),
        macro_f1=macro_f1(decisions, gold),
        micro_f1=micro_f1(decisions, gold),
        precision_at=precision_at,
        recall_at=recall_at,
        excluded_auc_labels=excluded,
    )


def select_threshold(
    dev_scores: np.ndarray,
    dev_gold: np.ndarray,
    objective: Callable[[np.ndarray, np.ndarray], float] = micro_f1,
) -> float:
    """Scan all distinct dev scores plus midpoints; return the lowest
    threshold maximizing the objective (decision rule: score >= threshold)."""
    dev_scores, dev_gold = _validate(dev_scores, dev_gold, "select_threshold")
    if dev_scores.size == 0:
        raise ConfigError("select_threshold: empty dev set")
    uniq = np.unique(dev_scores.ravel())
    candidates = list(uniq) + [(a + b) / 2.0 for a, b in zip(uniq[:-1], uniq[1:])]
    best_t = None
    best_v = -1.0
    for t in sorted(candidates):
        v = objective(dev_scores >= t, dev_gold)
        if v > best_v:
            best_v = v
            best_t = t
    return float(best_t)


# ---------------------------------------------------------------------------
# Prediction records and reports
# ---------------------------------------------------------------------------


@dataclass
class PredictionMatrix:
    scores: np.ndarray  # (examples, labels)
    decisions: np.ndarray  # (examples, labels) bool
    label_ids: list[str]
    example_ids: list[str]
    threshold: float | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.decisions = np.asarray(self.decisions, dtype=bool)
        if self.scores.shape != self.decisions.shape:
            raise ShapeError("PredictionMatrix: scores/decisions shapes differ")
        if self.scores.shape != (len(self.example_ids), len(self.label_ids)):
            raise ShapeError("PredictionMatrix: id lists do not match matrix shape")

    @classmethod
    def from_scores(cls, scores, label_ids, example_ids, threshold: float) -> "PredictionMatrix":
        scores = np.asarray(scores, dtype=np.float64)
        return cls(scores, scores >= threshold, list(label_ids), list(example_ids), threshold)


def write_predictions(pred: PredictionMatrix, path) -> None:
    """One JSON record per example: id, per-code score, per-code decision."""
    lines = []
    for i, ex_id in enumerate(pred.example_ids):
        lines.append(
            json.dumps(
                {
                    "example_id": ex_id,
                    "scores": {c: float(pred.scores[i, j]) for j, c in enumerate(pred.label_ids)},
                    "decisions": {c: bool(pred.decisions[i, j]) for j, c in enumerate(pred.label_ids)},
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path) -> PredictionMatrix:
    records = [
        json.loads(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not records:
        raise InputError(f"no prediction records in {path}")
    label_ids = sorted(records[0]["scores"])
    scores = np.array([[r["scores"][c] for c in label_ids] for r in records])
    decisions = np.array([[r["decisions"][c] for c in label_ids] for r in records])
    return PredictionMatrix(scores, decisions, label_ids, [r["example_id"] for r in records])


def format_report(result: MetricsResult) -> str:
    """Two-decimal display values (percentages) plus full-precision fields."""
    full = result.as_dict()
    display = {
        k: f"{v * 100:.2f}"
        for k, v in full.items()
        if isinstance(v, float)
    }
    return json.dumps({"display": display, "full": full}, indent=1, sort_keys=True) + "\n"
