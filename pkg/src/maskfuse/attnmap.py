"""Cross-attention maps and their cleanup into per-subject spatial maps.

The chain implemented here: scaled dot-product text->image attention, removal
of boundary "attention sink" mass (top-k entries that also sit on the grid
border get zeroed, rows renormalized), per-subject maps averaged over each
subject's activation-token positions, and a final sharpening step that
replaces the cross map by the mean self-attention row of its most salient
pixels, which is spatially far more cohesive.

Everything operates on a single image (batch 1); multi-head inputs are
reduced by averaging the per-head maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateRowError, ShapeError

__all__ = [
    "AttentionMap",
    "GridShape",
    "SinkFilterConfig",
    "SubjectTokenSpan",
    "compute_cross_attention",
    "edge_pixel_set",
    "suppress_attention_sink",
    "word_attention_map",
    "top_fraction_indices",
    "self_attention_enhance",
    "parse_subject_span",
    "validate_spans",
]

_ROW_SUM_TOL = 1e-5


@dataclass(frozen=True)
class GridShape:
    """Spatial layout of the image tokens: grid_h * grid_w == N_img."""

    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ShapeError(f"degenerate grid {self.grid_h}x{self.grid_w}")

    @property
    def n_img(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class SinkFilterConfig:
    """Top fraction `p` and border ring width for sink suppression."""

    p: float = 0.01
    border_width: int = 1

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if self.border_width < 1:
            raise ValueError(f"border_width must be >= 1, got {self.border_width}")


@dataclass(frozen=True)
class SubjectTokenSpan:
    """Text-token positions that activate one adapter."""

    lora_id: str
    token_indices: tuple[int, ...]

    def __post_init__(self):
        if len(self.token_indices) == 0:
            raise ValueError(f"subject {self.lora_id!r} has an empty token span")
        if any(i < 0 for i in self.token_indices):
            raise ValueError(f"subject {self.lora_id!r} has negative token indices")
        object.__setattr__(self, "token_indices", tuple(sorted(set(self.token_indices))))


def parse_subject_span(text: str) -> SubjectTokenSpan:
    """Parse 'lora_id:i1,i2,...' into a span."""
    lora_id, sep, rest = text.partition(":")
    if not sep or not lora_id:
        raise ValueError(f"expected 'id:i1,i2,...', got {text!r}")
    try:
        idx = tuple(int(p) for p in rest.split(",") if p.strip() != "")
    except ValueError as e:
        raise ValueError(f"bad token indices in {text!r}: {e}") from None
    return SubjectTokenSpan(lora_id, idx)


def validate_spans(spans: Sequence[SubjectTokenSpan], n_text: int | None = None) -> None:
    """Check span bounds and pairwise disjointness across subjects."""
    seen: dict[int, str] = {}
    for span in spans:
        for i in span.token_indices:
            if n_text is not None and i >= n_text:
                raise ShapeError(
                    f"subject {span.lora_id!r} token index {i} >= n_text={n_text}"
                )
            if i in seen:
                raise ValueError(
                    f"token {i} claimed by both {seen[i]!r} and {span.lora_id!r}"
                )
            seen[i] = span.lora_id


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic query x key probability matrix."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 2:
            raise ShapeError(f"attention map must be 2-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("attention map contains NaN or Inf")
        if np.any(w < 0):
            raise ValueError("attention map contains negative entries")
        sums = w.sum(axis=1, dtype=np.float64)
        bad = np.abs(sums - 1.0) > _ROW_SUM_TOL
        if np.any(bad):
            row = int(np.argmax(bad))
            raise ValueError(f"row {row} sums to {sums[row]:.8f}, expected 1 +- {_ROW_SUM_TOL}")
        object.__setattr__(self, "weights", w)

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]


def _stable_softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def compute_cross_attention(q_text: np.ndarray, k_img: np.ndarray) -> AttentionMap:
    """softmax(Q_text K_img^T / sqrt(D)) over the key axis.

    Accepts (N, D) single-head inputs or (H, N, D) multi-head inputs; per-head
    maps are averaged into one map.
    """
    q = np.asarray(q_text, dtype=np.float64)
    k = np.asarray(k_img, dtype=np.float64)
    if q.ndim != k.ndim or q.ndim not in (2, 3):
        raise ShapeError(f"expected matching 2-D or 3-D inputs, got {q.shape} and {k.shape}")
    if q.shape[-1] != k.shape[-1] or q.shape[-1] < 1:
        raise ShapeError(f"token dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if q.ndim == 3 and q.shape[0] != k.shape[0]:
        raise ShapeError(f"head counts differ: {q.shape[0]} vs {k.shape[0]}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k))):
        raise ValueError("non-finite values in attention inputs")
    d = q.shape[-1]
    scores = q @ np.swapaxes(k, -2, -1) / np.sqrt(d)
    probs = _stable_softmax_rows(scores)
    if probs.ndim == 3:
        probs = probs.mean(axis=0)
    return AttentionMap(probs.astype(np.float32))


def edge_pixel_set(grid: GridShape, border_width: int = 1) -> np.ndarray:
    """Flat indices of tokens whose row or column is within `border_width` of the boundary."""
    limit = (min(grid.grid_h, grid.grid_w) + 1) // 2
    if not 1 <= border_width <= max(1, limit):
        raise ValueError(
            f"border_width {border_width} outside [1, {max(1, limit)}] for "
            f"{grid.grid_h}x{grid.grid_w} grid"
        )
    return np.flatnonzero(_edge_mask(grid, border_width))


def _edge_mask(grid: GridShape, border_width: int) -> np.ndarray:
    r = np.arange(grid.grid_h)[:, None]
    c = np.arange(grid.grid_w)[None, :]
    on_edge = (
        (r < border_width)
        | (r >= grid.grid_h - border_width)
        | (c < border_width)
        | (c >= grid.grid_w - border_width)
    )
    return np.broadcast_to(on_edge, (grid.grid_h, grid.grid_w)).ravel()


def suppress_attention_sink(
    a: AttentionMap, grid: GridShape, cfg: SinkFilterConfig | None = None
) -> AttentionMap:
    """Zero the per-row top-k entries that sit on the border ring, renormalize.

    k = floor(N_img * p); the top-k set breaks value ties toward lower flat
    index. Rows with nothing to zero are returned bit-identical. A row whose
    entire mass was zeroed raises DegenerateRowError naming the row.
    """
    cfg = cfg or SinkFilterConfig()
    if a.cols != grid.n_img:
        raise ShapeError(f"map has {a.cols} keys but grid {grid.grid_h}x{grid.grid_w} has {grid.n_img}")
    w = a.weights.copy()
    k = int(a.cols * cfg.p)
    if k == 0:
        return AttentionMap(w)
    edge = _edge_mask(grid, min(cfg.border_width, (min(grid.grid_h, grid.grid_w) + 1) // 2))
    # stable argsort on negated values: descending by value, ties to lower index
    order = np.argsort(-w, axis=1, kind="stable")[:, :k]
    topk = np.zeros_like(w, dtype=bool)
    np.put_along_axis(topk, order, True, axis=1)
    zero = topk & edge[None, :]
    touched = zero.any(axis=1)
    if not touched.any():
        return AttentionMap(w)
    w[zero] = 0.0
    sums = w.sum(axis=1, dtype=np.float64)
    dead = touched & (sums <= 0.0)
    if dead.any():
        raise DegenerateRowError(int(np.argmax(dead)))
    w[touched] = (w[touched].astype(np.float64) / sums[touched, None]).astype(np.float32)
    return AttentionMap(w)


def word_attention_map(a_filtered: AttentionMap, span: SubjectTokenSpan) -> np.ndarray:
    """Mean of the rows at the span's token positions (length N_img)."""
    idx = np.asarray(span.token_indices)
    if idx.size == 0:
        raise ValueError(f"subject {span.lora_id!r} has an empty span")
    if idx.max() >= a_filtered.rows:
        raise ShapeError(
            f"subject {span.lora_id!r} token {int(idx.max())} >= {a_filtered.rows} text tokens"
        )
    return a_filtered.weights[idx].mean(axis=0, dtype=np.float64).astype(np.float32)


def top_fraction_indices(m: np.ndarray, fraction: float = 0.01) -> np.ndarray:
    """Indices of the K = max(1, floor(N * fraction)) largest values, sorted ascending.

    Value ties break toward the lower index. K is clamped to >= 1 so tiny
    grids still yield a salient set.
    """
    v = np.asarray(m)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty vector, got shape {v.shape}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = max(1, int(v.size * fraction))
    picked = np.argsort(-v, kind="stable")[:k]
    return np.sort(picked)


def self_attention_enhance(a_self: AttentionMap, salient: Iterable[int]) -> np.ndarray:
    """Mean self-attention row over the salient pixel set (length N_img)."""
    idx = np.asarray(sorted(set(int(i) for i in salient)))
    if idx.size == 0:
        raise ValueError("salient set is empty")
    if idx.min() < 0 or idx.max() >= a_self.rows:
        raise ShapeError(f"salient index out of range for {a_self.rows} image tokens")
    return a_self.weights[idx].mean(axis=0, dtype=np.float64).astype(np.float32)
