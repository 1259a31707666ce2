"""Reference masked attention, gradient verification, and analysis probes.

Single-head, double-precision scaled dot-product attention where blocked
logits are excluded from the softmax reduction, so blocked weights are
exactly zero rather than merely small. Multi-head use is a loop over
independent heads sharing one mask. On top of the kernel this module
provides finite-difference gradient checking, an attention-allocation
report (audio vs. visual reasoning span) over the last k layers, and a
synthetic probe quantifying direct attention leakage onto blocked
query-key pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .mask_engine import (
    MaskMatrix,
    TokenLayout,
    build_causal,
    build_composite,
)

DEFAULT_ALLOCATION_WINDOW = 16


class FullyBlockedRowError(ValueError):
    """A mask row has no visible cell, so its softmax is undefined."""


@dataclass(frozen=True)
class AttentionInputs:
    """Queries/keys/values plus the visibility mask for one head."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    mask: MaskMatrix
    scale: float | None = None

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        k = np.asarray(self.k, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
            raise ValueError("q, k, v must share an (L, d) shape")
        if q.shape[1] < 1:
            raise ValueError("feature dimension must be >= 1")
        if q.shape[0] != self.mask.length:
            raise ValueError("mask length must match sequence length")
        for name, arr in (("q", q), ("k", k), ("v", v)):
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite entries")
        scale = self.scale if self.scale is not None else 1.0 / math.sqrt(q.shape[1])
        if scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "scale", float(scale))

    @property
    def length(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class AttentionWeights:
    """Row-stochastic attention matrix; exactly zero at blocked cells."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("weights must be a square matrix")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]


def _check_rows_visible(mask: MaskMatrix) -> None:
    rows = np.nonzero(~mask.visible.any(axis=1))[0]
    if rows.size:
        raise FullyBlockedRowError(f"mask rows fully blocked: {rows.tolist()}")


def masked_attention(inputs: AttentionInputs) -> tuple[np.ndarray, AttentionWeights]:
    """Softmax attention over visible cells only.

    Returns ``(output, weights)`` where ``output = weights @ v``. Blocked
    cells carry weight exactly 0; every row sums to 1.
    """
    _check_rows_visible(inputs.mask)
    visible = inputs.mask.visible
    logits = inputs.scale * (inputs.q @ inputs.k.T)
    shifted = np.where(visible, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    expd = np.where(visible, np.exp(shifted), 0.0)
    weights = expd / expd.sum(axis=1, keepdims=True)
    return weights @ inputs.v, AttentionWeights(weights)


def attention_gradients(
    inputs: AttentionInputs, d_output: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of ``sum(output * d_output)`` w.r.t. q, k, v.

    ``d_output`` defaults to all-ones (the element-sum loss). Blocked cells
    contribute exactly zero gradient: their weights are zero, which zeroes
    the softmax backward term.
    """
    out_shape = inputs.q.shape
    upstream = np.ones(out_shape) if d_output is None else np.asarray(d_output, dtype=float)
    if upstream.shape != out_shape:
        raise ValueError("d_output must match the output shape")
    _, weights = masked_attention(inputs)
    w = weights.matrix
    d_w = upstream @ inputs.v.T
    d_v = w.T @ upstream
    d_logits = w * (d_w - np.sum(w * d_w, axis=1, keepdims=True))
    d_q = inputs.scale * (d_logits @ inputs.k)
    d_k = inputs.scale * (d_logits.T @ inputs.q)
    return d_q, d_k, d_v


def gradient_check(
    inputs: AttentionInputs,
    step: float,
    d_output: np.ndarray | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error uses a unit floor: ``|a - b| / max(1, |a|, |b|)``.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    upstream = np.ones(inputs.q.shape) if d_output is None else np.asarray(d_output)

    def loss(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> float:
        probe = AttentionInputs(q=q, k=k, v=v, mask=inputs.mask, scale=inputs.scale)
        output, _ = masked_attention(probe)
        return float(np.sum(output * upstream))

    analytic = attention_gradients(inputs, upstream)
    arrays = (inputs.q, inputs.k, inputs.v)
    worst = 0.0
    for slot, grad in enumerate(analytic):
        base = arrays[slot]
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[slot][idx] += step
            minus[slot][idx] -= step
            numeric[idx] = (loss(*plus) - loss(*minus)) / (2.0 * step)
        err = np.abs(grad - numeric) / np.maximum(
            1.0, np.maximum(np.abs(grad), np.abs(numeric)))
        worst = max(worst, float(err.max()))
    return worst


# --- Attention allocation over the last k layers ---------------------------

@dataclass(frozen=True)
class AllocationReport:
    """Normalized attention mass from a query span into the audio vs. visual
    reasoning spans, per layer and aggregated over the window."""

    window: int
    audio_fraction: float
    visual_fraction: float
    per_layer: tuple[tuple[float, float] | None, ...]


def _as_layer_matrix(layer) -> np.ndarray:
    """One layer's weights: a single matrix, or per-head matrices whose mass
    is averaged before any normalization."""
    if isinstance(layer, AttentionWeights):
        return layer.matrix
    if isinstance(layer, np.ndarray) and layer.ndim == 2:
        return np.asarray(layer, dtype=float)
    heads = [m.matrix if isinstance(m, AttentionWeights) else np.asarray(m, dtype=float)
             for m in layer]
    return np.mean(heads, axis=0)


def attention_allocation(
    weights_per_layer: Sequence,
    layout: TokenLayout,
    query_span: Iterable[int] | None = None,
    last_k: int = DEFAULT_ALLOCATION_WINDOW,
) -> AllocationReport:
    """Fraction of attention mass flowing to audio vs. visual reasoning.

    Sums, over the final ``last_k`` layers, the attention mass from
    ``query_span`` rows (default: the layout's summary span) into the inner
    audio-reasoning and visual-reasoning columns, then normalizes the pair
    to sum to 1. Layers with no mass into either span report ``None``.
    """
    if last_k < 1 or last_k > len(weights_per_layer):
        raise ValueError("last_k must be in [1, number of layers]")
    rows = sorted(query_span) if query_span is not None else sorted(layout.summary_span)
    if not rows:
        raise ValueError("query span is empty and layout has no summary span")
    audio_cols = sorted(layout.audio_reasoning)
    visual_cols = sorted(layout.visual_reasoning)

    per_layer: list[tuple[float, float] | None] = []
    audio_total = 0.0
    visual_total = 0.0
    for layer in weights_per_layer[-last_k:]:
        matrix = _as_layer_matrix(layer)
        audio_mass = float(matrix[np.ix_(rows, audio_cols)].sum()) if audio_cols else 0.0
        visual_mass = float(matrix[np.ix_(rows, visual_cols)].sum()) if visual_cols else 0.0
        audio_total += audio_mass
        visual_total += visual_mass
        layer_total = audio_mass + visual_mass
        if layer_total > 0.0:
            per_layer.append((audio_mass / layer_total, visual_mass / layer_total))
        else:
            per_layer.append(None)

    total = audio_total + visual_total
    if total <= 0.0:
        raise ValueError("zero attention mass into both reasoning spans")
    return AllocationReport(
        window=last_k,
        audio_fraction=audio_total / total,
        visual_fraction=visual_total / total,
        per_layer=tuple(per_layer),
    )


# --- Synthetic leakage probe -----------------------------------------------

DEFAULT_LEAKAGE_SIZES: dict[str, int] = {
    "video": 8,
    "audio": 8,
    "question": 4,
    "visual_reasoning": 6,
    "audio_reasoning": 6,
    "summary": 4,
}

_LEAKAGE_LAYERS = 3
_LEAKAGE_DIM = 16


@dataclass(frozen=True)
class LeakageReport:
    """Measured attention mass on the asymmetric-rule blocked pair families.

    ``blocked_pair_mass`` is the raw weight sum over those cells across all
    layers; ``direct_leakage`` normalizes it by (reasoning query rows x
    layers), i.e. the fraction of those rows' total mass that lands on
    blocked pairs.
    """

    seed: int
    use_maam: bool
    length: int
    layers: int
    blocked_pair_mass: float
    direct_leakage: float


def leakage_layout(sizes: Mapping[str, int]) -> TokenLayout:
    """Sequential synthetic layout: video, audio, question, v-span (with
    boundary tags), a-span (with boundary tags), summary."""
    cursor = 0

    def take(count: int) -> frozenset[int]:
        nonlocal cursor
        span = frozenset(range(cursor, cursor + count))
        cursor += count
        return span

    video = take(sizes.get("video", 0))
    audio = take(sizes.get("audio", 0))
    take(sizes.get("question", 0))
    n_visual = sizes.get("visual_reasoning", 0)
    visual_span = take(n_visual + 2) if n_visual else frozenset()
    visual_inner = frozenset(sorted(visual_span)[1:-1]) if visual_span else frozenset()
    n_audio_r = sizes.get("audio_reasoning", 0)
    audio_span = take(n_audio_r + 2) if n_audio_r else frozenset()
    audio_inner = frozenset(sorted(audio_span)[1:-1]) if audio_span else frozenset()
    summary = take(sizes.get("summary", 0))
    if cursor == 0:
        raise ValueError("layout sizes produce an empty sequence")
    return TokenLayout(
        length=cursor,
        video_input=video,
        audio_input=audio,
        visual_reasoning=visual_inner,
        audio_reasoning=audio_inner,
        visual_span=visual_span,
        summary_span=summary,
    )


def blocked_pair_families(layout: TokenLayout) -> set[tuple[int, int]]:
    """All (query, key) cells the three asymmetric rules forbid."""
    cells = set()
    for i in layout.visual_reasoning:
        for j in layout.audio_input:
            cells.add((i, j))
    for i in layout.audio_reasoning:
        for j in layout.video_input:
            cells.add((i, j))
        for j in layout.visual_span:
            cells.add((i, j))
    return cells


def leakage_probe(
    seed: int,
    layout_sizes: Mapping[str, int] | None = None,
    use_maam: bool = True,
) -> LeakageReport:
    """Run a seeded random attention stack and measure direct leakage.

    With the asymmetric mask the leakage is exactly zero by construction;
    without it the causal-only stack places measurable mass on the blocked
    pair families.
    """
    sizes = dict(DEFAULT_LEAKAGE_SIZES if layout_sizes is None else layout_sizes)
    layout = leakage_layout(sizes)
    mask = build_composite(layout) if use_maam else build_causal(layout.length)
    cells = blocked_pair_families(layout)
    rng = np.random.default_rng(seed)

    blocked_mass = 0.0
    for _ in range(_LEAKAGE_LAYERS):
        q = rng.normal(size=(layout.length, _LEAKAGE_DIM))
        k = rng.normal(size=(layout.length, _LEAKAGE_DIM))
        v = rng.normal(size=(layout.length, _LEAKAGE_DIM))
        _, weights = masked_attention(AttentionInputs(q=q, k=k, v=v, mask=mask))
        for i, j in sorted(cells):  # fixed order keeps the sum reproducible
            blocked_mass += float(weights.matrix[i, j])

    reasoning_rows = len(layout.visual_reasoning | layout.audio_reasoning)
    denom = reasoning_rows * _LEAKAGE_LAYERS
    leakage = blocked_mass / denom if denom else 0.0
    return LeakageReport(
        seed=seed,
        use_maam=use_maam,
        length=layout.length,
        layers=_LEAKAGE_LAYERS,
        blocked_pair_mass=blocked_mass,
        direct_leakage=leakage,
    )


# --- Weights persistence ----------------------------------------------------

def write_weights_jsonl(path: str | Path, layers: Sequence[np.ndarray]) -> None:
    """One layer per line: row-major data plus shape."""
    with open(path, "w", encoding="utf-8") as fh:
        for idx, matrix in enumerate(layers):
            arr = np.asarray(matrix, dtype=float)
            fh.write(json.dumps({
                "layer": idx,
                "shape": list(arr.shape),
                "data": arr.ravel().tolist(),
            }, sort_keys=True))
            fh.write("\n")


def read_weights_jsonl(path: str | Path) -> list[np.ndarray]:
    layers = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            shape = tuple(obj["shape"])
            layers.append(np.asarray(obj["data"], dtype=float).reshape(shape))
    return layers
