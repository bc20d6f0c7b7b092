"""Miniature long-context transformer encoder.

Self-attention follows a sliding-window pattern: each token attends to
positions within ``local_window`` on each side plus every designated
global token; global tokens attend to all non-pad positions. The kernel
gathers the permitted keys per row (banded + gathered-global) and never
materializes the dense L x L score matrix.

Layers are pre-norm residual blocks with a GELU MLP and a final layer
norm. Positions use learned absolute embeddings; ``position_ids`` may
restart mid-sequence, which lets several short segments share one padded
sequence (see ``encode_segments``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InputError, SequenceLengthError, ShapeError, VocabError

__all__ = [
    "EncoderConfig",
    "TokenSequence",
    "mark_globals",
    "init_params",
    "encode",
    "encode_segments",
    "attention_pair_count",
    "parameter_names",
    "count_parameters",
]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    local_window: int = 8
    max_positions: int = 1024
    global_stride: int = 1

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.local_window < 1:
            raise ConfigError("local_window must be >= 1")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")
        if self.global_stride < 1:
            raise ConfigError("global_stride must be >= 1")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)}" for k in self.__dataclass_fields__]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EncoderConfig":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = int(raw.strip())
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"bad encoder config document: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EncoderConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class TokenSequence:
    """Token ids plus global-attention and pad masks (True = pad)."""

    token_ids: np.ndarray
    global_mask: np.ndarray = None
    pad_mask: np.ndarray = None
    position_ids: np.ndarray = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        n = len(self.token_ids)
        if self.global_mask is None:
            self.global_mask = np.zeros(n, dtype=bool)
        if self.pad_mask is None:
            self.pad_mask = np.zeros(n, dtype=bool)
        if self.position_ids is None:
            self.position_ids = np.arange(n, dtype=np.int64)
        self.global_mask = np.asarray(self.global_mask, dtype=bool)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)
        if not (len(self.global_mask) == len(self.pad_mask) == len(self.position_ids) == n):
            raise ShapeError("TokenSequence: mask/position lengths must match token_ids")
        if np.any(self.global_mask & self.pad_mask):
            raise InputError("TokenSequence: global positions must be non-pad")

    def __len__(self) -> int:
        return len(self.token_ids)


def mark_globals(
    seq: TokenSequence,
    description_spans: Sequence[tuple[int, int]],
    stride: int,
    mask_positions: Sequence[int] = (),
) -> TokenSequence:
    """Mark every ``stride``-th token of each span, plus all mask slots, global.

    Spans are half-open [start, end) and must not overlap.
    """
    if stride < 1:
        raise ConfigError("global stride must be >= 1")
    n = len(seq)
    spans = sorted(description_spans)
    prev_end = 0
    for start, end in spans:
        if not (0 <= start < end <= n):
            raise InputError(f"span ({start}, {end}) outside sequence of length {n}")
        if start < prev_end:
            raise InputError(f"overlapping description spans at {start}")
        prev_end = end
    gmask = seq.global_mask.copy()
    for start, end in spans:
        gmask[start:end:stride] = True
    for pos in mask_positions:
        if not 0 <= pos < n:
            raise InputError(f"mask position {pos} outside sequence")
        gmask[pos] = True
    return TokenSequence(seq.token_ids, gmask, seq.pad_mask, seq.position_ids)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def parameter_names(config: EncoderConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.num_layers):
        p = f"layer{i}."
        names += [p + "ln1.gain", p + "ln1.bias"]
        names += [p + "attn." + w for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [p + "ln2.gain", p + "ln2.bias"]
        names += [p + "mlp.w1", p + "mlp.b1", p + "mlp.w2", p + "mlp.b2"]
    names += ["ln_f.gain", "ln_f.bias", "lm_head"]
    return names


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Symmetric uniform weights scaled by 1/sqrt(hidden_dim); zero biases, unit gains."""
    h = config.hidden_dim
    s = 1.0 / np.sqrt(h)

    def uniform(*shape):
        return rng.uniform(-s, s, size=shape)

    params: dict[str, Tensor] = {}

    def put(name, values):
        params[name] = ad.parameter(values, name=name)

    put("tok_emb", uniform(config.vocab_size, h))
    put("pos_emb", uniform(config.max_positions, h))
    for i in range(config.num_layers):
        p = f"layer{i}."
        put(p + "ln1.gain", np.ones(h))
        put(p + "ln1.bias", np.zeros(h))
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            put(p + "attn." + w, uniform(h, h))
            put(p + "attn." + b, np.zeros(h))
        put(p + "ln2.gain", np.ones(h))
        put(p + "ln2.bias", np.zeros(h))
        put(p + "mlp.w1", uniform(h, 4 * h))
        put(p + "mlp.b1", np.zeros(4 * h))
        put(p + "mlp.w2", uniform(4 * h, h))
        put(p + "mlp.b2", np.zeros(h))
    put("ln_f.gain", np.ones(h))
    put("ln_f.bias", np.zeros(h))
    put("lm_head", uniform(config.vocab_size, h))
    assert list(params) == parameter_names(config)
    return params


def count_parameters(params: dict[str, Tensor], names: Sequence[str] | None = None) -> int:
    if names is None:
        names = list(params)
    return int(sum(params[n].size for n in names))


# ---------------------------------------------------------------------------
# Banded + gathered-global attention
# ---------------------------------------------------------------------------


@dataclass
class _AttentionPattern:
    band_safe: np.ndarray  # (L, 2w+1) clipped key indices
    band_valid: np.ndarray  # (L, 2w+1) usable band entries
    global_idx: np.ndarray  # (G,) global key positions
    global_col_valid: np.ndarray  # (L, G) global columns usable per row
    key_allowed: np.ndarray  # (L,) non-pad keys for dense global rows
    is_global: np.ndarray  # (L,)


def _build_pattern(seq: TokenSequence, window: int) -> _AttentionPattern:
    L = len(seq)
    offsets = np.arange(-window, window + 1)
    idx = np.arange(L)[:, None] + offsets[None, :]
    in_range = (idx >= 0) & (idx < L)
    safe = np.clip(idx, 0, L - 1)
    # Globals are covered by dedicated columns; pads are never valid keys.
    valid = in_range & ~seq.pad_mask[safe] & ~seq.global_mask[safe]
    # Keep every softmax row non-empty: self stays available. Only rows that
    # are pad or global hit this, and their banded output is never used.
    valid[:, window] = True
    g_idx = np.nonzero(seq.global_mask)[0]
    gcol_valid = np.broadcast_to(~seq.pad_mask[:, None], (L, len(g_idx))).copy()
    return _AttentionPattern(
        band_safe=safe,
        band_valid=valid,
        global_idx=g_idx,
        global_col_valid=gcol_valid,
        key_allowed=~seq.pad_mask,
        is_global=seq.global_mask,
    )


def _masked_softmax(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    scores = np.where(valid, scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, pattern: _AttentionPattern, num_heads: int) -> Tensor:
    """Multi-head attention over the permitted (query, key) pairs.

    q, k, v: (L, H). Local rows see their band plus all globals; global rows
    see every non-pad key. Output rows for pad queries are self-attended
    garbage and must not feed the loss.
    """
    L, H = q.shape
    if k.shape != (L, H) or v.shape != (L, H):
        raise ShapeError(f"sparse_attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if H % num_heads != 0:
        raise ShapeError(f"sparse_attention: {H} dims not divisible by {num_heads} heads")
    dh = H // num_heads
    inv = 1.0 / np.sqrt(dh)
    g_idx = pattern.global_idx
    G = len(g_idx)
    col_valid = np.concatenate([pattern.band_valid, pattern.global_col_valid], axis=1)
    dense_mask = pattern.key_allowed[None, :]

    out = np.empty((L, H))
    cache = []
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q.values[:, sl], k.values[:, sl], v.values[:, sl]
        k_cols = np.concatenate(
            [kh[pattern.band_safe], np.broadcast_to(kh[g_idx], (L, G, dh))], axis=1
        )
        v_cols = np.concatenate(
            [vh[pattern.band_safe], np.broadcast_to(vh[g_idx], (L, G, dh))], axis=1
        )
        scores = (qh[:, None, :] * k_cols).sum(-1) * inv
        alpha = _masked_softmax(scores, col_valid)
        out_h = (alpha[:, :, None] * v_cols).sum(1)
        if G:
            scores_g = (qh[g_idx] @ kh.T) * inv
            alpha_g = _masked_softmax(scores_g, dense_mask)
            out_h[g_idx] = alpha_g @ vh
        else:
            alpha_g = None
        out[:, sl] = out_h
        cache.append((alpha, k_cols, v_cols, alpha_g))

    def backward(grad_out):
        dq = np.zeros((L, H))
        dk = np.zeros((L, H))
        dv = np.zeros((L, H))
        B = pattern.band_safe.shape[1]
        for h in range(num_heads):
            sl = slice(h * dh, (h + 1) * dh)
            qh, kh, vh = q.values[:, sl], k.values[:, sl], v.values[:, sl]
            alpha, k_cols, v_cols, alpha_g = cache[h]
            g_band = grad_out[:, sl].copy()
            if G:
                g_band[g_idx] = 0.0
            dalpha = (g_band[:, None, :] * v_cols).sum(-1)
            dscores = alpha * (dalpha - (alpha * dalpha).sum(1, keepdims=True))
            dq[:, sl] += (dscores[:, :, None] * k_cols).sum(1) * inv
            dk_cols = dscores[:, :, None] * (qh[:, None, :] * inv)
            dv_cols = alpha[:, :, None] * g_band[:, None, :]
            np.add.at(dk[:, sl], pattern.band_safe, dk_cols[:, :B])
            np.add.at(dv[:, sl], pattern.band_safe, dv_cols[:, :B])
            if G:
                np.add.at(dk[:, sl], g_idx, dk_cols[:, B:].sum(0))
                np.add.at(dv[:, sl], g_idx, dv_cols[:, B:].sum(0))
                g_dense = grad_out[g_idx, sl]
                dalpha_g = g_dense @ vh.T
                dscores_g = alpha_g * (dalpha_g - (alpha_g * dalpha_g).sum(1, keepdims=True))
                dq[g_idx, sl] += dscores_g @ kh * inv
                dk[:, sl] += dscores_g.T @ (qh[g_idx] * inv)
                dv[:, sl] += alpha_g.T @ g_dense
        return (dq, dk, dv)

    needs = q.requires_grad or k.requires_grad or v.requires_grad
    result = Tensor(out, requires_grad=needs)
    tape = ad.active_tape()
    if tape is not None and needs:
        tape.record((q, k, v), result, backward)
    return result


def attention_pair_count(seq: TokenSequence, config: EncoderConfig) -> int:
    """Number of permitted (query, key) attention pairs for non-pad queries."""
    pattern = _build_pattern(seq, config.local_window)
    non_pad = ~seq.pad_mask
    n_keys = int(non_pad.sum())
    G = len(pattern.global_idx)
    total = int(pattern.is_global.sum()) * n_keys
    local_rows = non_pad & ~pattern.is_global
    total += int(pattern.band_valid[local_rows].sum()) + G * int(local_rows.sum())
    return total


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _linear(x: Tensor, params: dict, weight: str, bias: str) -> Tensor:
    return ad.add_bias(ad.matmul(x, params[weight]), params[bias])


def encode(seq: TokenSequence, params: dict[str, Tensor], config: EncoderConfig) -> Tensor:
    """TokenSequence -> contextual hidden states (L, hidden_dim)."""
    L = len(seq)
    if L == 0:
        raise InputError("encode: empty token sequence")
    if L > config.max_positions:
        raise SequenceLengthError(f"sequence length {L} exceeds max_positions {config.max_positions}")
    if seq.token_ids.max() >= config.vocab_size or seq.token_ids.min() < 0:
        raise VocabError("encode: token id outside vocabulary")
    if seq.position_ids.max() >= config.max_positions:
        raise SequenceLengthError("encode: position id exceeds max_positions")

    pattern = _build_pattern(seq, config.local_window)
    x = ad.add(
        ad.embedding_lookup(params["tok_emb"], seq.token_ids),
        ad.embedding_lookup(params["pos_emb"], seq.position_ids),
    )
    for i in range(config.num_layers):
        p = f"layer{i}."
        h = ad.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        q = _linear(h, params, p + "attn.wq", p + "attn.bq")
        k = _linear(h, params, p + "attn.wk", p + "attn.bk")
        v = _linear(h, params, p + "attn.wv", p + "attn.bv")
        a = sparse_attention(q, k, v, pattern, config.num_heads)
        x = ad.add(x, _linear(a, params, p + "attn.wo", p + "attn.bo"))
        h2 = ad.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        m = ad.gelu(_linear(h2, params, p + "mlp.w1", p + "mlp.b1"))
        x = ad.add(x, _linear(m, params, p + "mlp.w2", p + "mlp.b2"))
    return ad.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])


def encode_segments(
    segments: Sequence[np.ndarray],
    params: dict[str, Tensor],
    config: EncoderConfig,
) -> Tensor:
    """Encode many short sequences in one pass; returns their first-row states.

    Segments are packed into a single padded sequence separated by enough
    pad tokens that no window crosses a boundary, with per-segment position
    ids, so the result equals encoding each segment independently with a
    window covering its full length.
    """
    if not segments:
        raise InputError("encode_segments: no segments")
    segs = [np.asarray(s, dtype=np.int64) for s in segments]
    if any(len(s) == 0 for s in segs):
        raise InputError("encode_segments: empty segment")
    w = max(len(s) for s in segs)
    packed_cfg = replace(config, local_window=w)

    outputs: list[Tensor] = []
    batch: list[np.ndarray] = []

    def flush():
        if not batch:
            return
        ids = np.concatenate([np.concatenate([s, np.zeros(w, dtype=np.int64)]) for s in batch])
        pos = np.concatenate(
            [np.concatenate([np.arange(len(s)), np.zeros(w, dtype=np.int64)]) for s in batch]
        )
        pad = np.concatenate(
            [np.concatenate([np.zeros(len(s), bool), np.ones(w, bool)]) for s in batch]
        )
        starts = np.cumsum([0] + [len(s) + w for s in batch[:-1]]).astype(np.int64)
        seq = TokenSequence(ids, None, pad, pos)
        h = encode(seq, params, packed_cfg)
        outputs.append(ad.embedding_lookup(h, starts))
        batch.clear()

    used = 0
    for s in segs:
        need = len(s) + w
        if need > config.max_positions:
            raise SequenceLengthError(f"segment of length {len(s)} too long to pack")
        if used + need > config.max_positions:
            flush()
            used = 0
        batch.append(s)
        used += need
    flush()
    return outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=0)
