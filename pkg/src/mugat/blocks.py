"""Transformer building blocks: multi-head attention, feed-forward,
masks, and the page-level positional encodings used by the context adapter.

All functions are pure over immutable parameters and accept an optional
leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, concat, gelu, layer_norm, masked_softmax

INIT_STD = 0.02
FFN_HIDDEN_MULT = 4


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ValueError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class PagePositionalEncodings:
    """Learnable page-slot (prev/curr/next) and within-page position vectors."""

    inter_page: Parameter  # (3, d)
    intra_page: Parameter  # (P, d)

    def __post_init__(self):
        if self.inter_page.data.shape[0] != 3:
            raise ShapeError(f"inter_page must have 3 slots, got {self.inter_page.data.shape}")


class ScoreCounter:
    """Instrumentation: records attention score-matrix sizes per tagged call."""

    def __init__(self):
        self.entries: list[tuple[str, int]] = []

    def record(self, tag: str, n_scores: int) -> None:
        self.entries.append((tag, n_scores))

    def total(self, tag_prefix: str = "") -> int:
        return sum(n for t, n in self.entries if t.startswith(tag_prefix))

    def clear(self) -> None:
        self.entries.clear()


score_counter = ScoreCounter()


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, name: str,
                dtype=np.float64) -> tuple[Parameter, Parameter]:
    w = Parameter(rng.normal(0.0, INIT_STD, size=(d_in, d_out)).astype(dtype), f"{name}.w")
    b = Parameter(np.zeros(d_out, dtype=dtype), f"{name}.b")
    return w, b


def init_attention(rng: np.random.Generator, cfg: AttentionConfig, name: str,
                   dtype=np.float64) -> dict[str, Parameter]:
    params = {}
    for proj in ("q", "k", "v", "o"):
        w, b = init_linear(rng, cfg.d_model, cfg.d_model, f"{name}.{proj}", dtype)
        params[f"{name}.{proj}.w"] = w
        params[f"{name}.{proj}.b"] = b
    return params


def init_feed_forward(rng: np.random.Generator, d: int, name: str,
                      hidden_mult: int = FFN_HIDDEN_MULT, dtype=np.float64) -> dict[str, Parameter]:
    params = {}
    w1, b1 = init_linear(rng, d, hidden_mult * d, f"{name}.fc1", dtype)
    w2, b2 = init_linear(rng, hidden_mult * d, d, f"{name}.fc2", dtype)
    params.update({p.name: p for p in (w1, b1, w2, b2)})
    return params


def init_layer_norm(d: int, name: str, dtype=np.float64) -> dict[str, Parameter]:
    return {
        f"{name}.gain": Parameter(np.ones(d, dtype=dtype), f"{name}.gain"),
        f"{name}.bias": Parameter(np.zeros(d, dtype=dtype), f"{name}.bias"),
    }


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., T, d) -> (..., h, T, d_head)
    *lead, T, d = x.shape
    x = x.reshape(*lead, T, n_heads, d // n_heads)
    ndim = len(x.shape)
    axes = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., h, T, d_head) -> (..., T, d)
    ndim = len(x.shape)
    axes = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
    x = x.transpose(axes)
    *lead, T, h, dh = x.shape
    return x.reshape(*lead, T, h * dh)


def multi_head_attention(queries: Tensor, keys_values_source: Tensor,
                         mask: Optional[np.ndarray], cfg: AttentionConfig,
                         params: dict[str, Parameter], prefix: str,
                         counter_tag: str = "") -> Tensor:
    """Scaled dot-product attention with per-head projections.

    queries: (..., Tq, d); keys_values_source: (..., Tkv, d);
    mask: optional boolean (Tq, Tkv), True = allowed. Masked positions get
    exactly zero attention weight; a fully-masked query row is an error.
    """
    d = cfg.d_model
    if queries.shape[-1] != d or keys_values_source.shape[-1] != d:
        raise ShapeError(
            f"attention width mismatch: queries {queries.shape}, "
            f"keys/values {keys_values_source.shape}, d_model {d}")
    Tq, Tkv = queries.shape[-2], keys_values_source.shape[-2]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (Tq, Tkv):
            raise ShapeError(f"mask shape {mask.shape} does not match ({Tq}, {Tkv})")
        if not mask.any(axis=1).all():
            raise ShapeError("attention mask leaves a query row with no allowed key")

    def lin(x, proj):
        return x @ params[f"{prefix}.{proj}.w"].tensor + params[f"{prefix}.{proj}.b"].tensor

    q = _split_heads(lin(queries, "q"), cfg.n_heads)
    k = _split_heads(lin(keys_values_source, "k"), cfg.n_heads)
    v = _split_heads(lin(keys_values_source, "v"), cfg.n_heads)

    scale = 1.0 / np.sqrt(cfg.d_head)
    kt_axes = tuple(range(len(k.shape) - 2)) + (len(k.shape) - 1, len(k.shape) - 2)
    scores = (q @ k.transpose(kt_axes)) * scale  # (..., h, Tq, Tkv)
    if counter_tag:
        score_counter.record(counter_tag, int(np.prod(scores.shape)))
    weights = masked_softmax(scores, mask, axis=-1)
    out = _merge_heads(weights @ v)
    return lin(out, "o")


def feed_forward(x: Tensor, params: dict[str, Parameter], prefix: str,
                 gelu_approx: bool = False) -> Tensor:
    """Position-wise linear -> GELU -> linear."""
    h = x @ params[f"{prefix}.fc1.w"].tensor + params[f"{prefix}.fc1.b"].tensor
    h = gelu(h, approximate=gelu_approx)
    return h @ params[f"{prefix}.fc2.w"].tensor + params[f"{prefix}.fc2.b"].tensor


def apply_layer_norm(x: Tensor, params: dict[str, Parameter], prefix: str,
                     eps: float = 1e-5) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"].tensor, params[f"{prefix}.bias"].tensor, eps)


def causal_mask(T: int) -> np.ndarray:
    """Boolean (T, T): entry (i, j) allowed iff j <= i."""
    if T < 1:
        raise ValueError(f"causal_mask needs T >= 1, got {T}")
    return np.tril(np.ones((T, T), dtype=bool))


def add_page_positions(prev: Tensor, curr: Tensor, next_: Tensor,
                       pe: PagePositionalEncodings) -> Tensor:
    """Concatenate (prev, curr, next) page embeddings and add the two
    positional encodings: the page-slot vector broadcast over each page's P
    rows, and the within-page vector broadcast across the three pages.

    Inputs are (..., P, d); output is (..., 3P, d).
    """
    P, d = pe.intra_page.data.shape
    for label, t in (("prev", prev), ("curr", curr), ("next", next_)):
        if t.shape[-2:] != (P, d):
            raise ShapeError(f"{label} page embedding {t.shape} does not match (P={P}, d={d})")
    pages = []
    for slot, t in enumerate((prev, curr, next_)):
        slot_vec = Tensor(pe.inter_page.data[slot]) if not pe.inter_page.tensor.requires_grad \
            else _slot_row(pe.inter_page.tensor, slot)
        pages.append(t + slot_vec + pe.intra_page.tensor)
    return concat(pages, axis=-2)


def _slot_row(inter: Tensor, slot: int) -> Tensor:
    # Differentiable single-row selection from the (3, d) inter-page table.
    from .tensor import embedding
    return embedding(inter, np.array([slot]))
