"""Causal and modality-asymmetric attention mask construction.

Over a token sequence we distinguish five position sets: video inputs,
audio inputs, the inner visual-reasoning tokens, the inner audio-reasoning
tokens, and the full visual span including its boundary tags. The
asymmetric mask blocks exactly three query-key families on top of plain
causal visibility:

  * visual-reasoning queries -> audio input keys
  * audio-reasoning queries  -> video input keys
  * audio-reasoning queries  -> any key inside the visual span

Everything else keeps default causal visibility. Masks are stored as
boolean matrices (True = visible); the additive 0 / -inf semantics are
realized by the attention core at softmax time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class LayoutError(ValueError):
    """A token layout violates one of its invariants."""


ROLE_NAMES = (
    "video_input",
    "audio_input",
    "visual_reasoning",
    "audio_reasoning",
    "visual_span",
    "summary_span",
)


@dataclass(frozen=True)
class TokenLayout:
    """The position sets that drive mask construction.

    ``summary_span`` is not a masking role; it is carried so downstream
    attention-allocation reports can default their query span to the
    summary tokens.
    """

    length: int
    video_input: frozenset[int] = frozenset()
    audio_input: frozenset[int] = frozenset()
    visual_reasoning: frozenset[int] = frozenset()
    audio_reasoning: frozenset[int] = frozenset()
    visual_span: frozenset[int] = frozenset()
    summary_span: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        for name in ROLE_NAMES:
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if self.length < 1:
            raise LayoutError("length must be >= 1")
        for name in ROLE_NAMES:
            indices = getattr(self, name)
            if indices and (min(indices) < 0 or max(indices) >= self.length):
                raise LayoutError(f"{name} index out of range [0, {self.length})")
        if self.video_input & self.audio_input:
            raise LayoutError("video_input and audio_input must be disjoint")
        if not self.visual_reasoning <= self.visual_span:
            raise LayoutError("visual_reasoning must be a subset of visual_span")
        if self.visual_span & self.audio_reasoning:
            raise LayoutError("visual_span and audio_reasoning must be disjoint")
        inputs = self.video_input | self.audio_input
        reasoning = self.visual_reasoning | self.audio_reasoning | self.visual_span
        if inputs and reasoning and max(inputs) >= min(reasoning):
            raise LayoutError("input positions must precede reasoning positions")

    def role_flags(self) -> dict[str, np.ndarray]:
        """Boolean membership arrays (length L) per role, for O(L) row work."""
        flags = {}
        for name in ROLE_NAMES:
            arr = np.zeros(self.length, dtype=bool)
            indices = getattr(self, name)
            if indices:
                arr[sorted(indices)] = True
            flags[name] = arr
        return flags


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    """Immutable square visibility matrix. True = visible, False = blocked."""

    visible: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.visible, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("mask must be a square matrix")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "visible", arr)

    @property
    def length(self) -> int:
        return self.visible.shape[0]

    def is_visible(self, i: int, j: int) -> bool:
        return bool(self.visible[i, j])

    def blocked_cells(self) -> set[tuple[int, int]]:
        rows, cols = np.nonzero(~self.visible)
        return set(zip(rows.tolist(), cols.tolist()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskMatrix):
            return NotImplemented
        return self.visible.shape == other.visible.shape and bool(
            np.array_equal(self.visible, other.visible)
        )

    def __hash__(self) -> int:
        return hash((self.length, self.visible.tobytes()))


def build_causal(length: int) -> MaskMatrix:
    """Plain causal mask: cell (i, j) visible iff j <= i."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return MaskMatrix(np.tril(np.ones((length, length), dtype=bool)))


def build_maam(layout: TokenLayout) -> MaskMatrix:
    """Asymmetric-visibility mask: blocks exactly the three rule families."""
    n = layout.length
    flags = layout.role_flags()
    visible = np.ones((n, n), dtype=bool)
    q_visual = flags["visual_reasoning"]
    q_audio = flags["audio_reasoning"]
    visible[np.ix_(q_visual, flags["audio_input"])] = False
    visible[np.ix_(q_audio, flags["video_input"])] = False
    visible[np.ix_(q_audio, flags["visual_span"])] = False
    return MaskMatrix(visible)


def compose(causal: MaskMatrix, maam: MaskMatrix) -> MaskMatrix:
    """Cell blocked iff blocked in either operand (-inf absorbs addition)."""
    if causal.length != maam.length:
        raise ValueError(
            f"length mismatch: {causal.length} != {maam.length}")
    return MaskMatrix(causal.visible & maam.visible)


def build_composite(layout: TokenLayout) -> MaskMatrix:
    """Causal visibility with the asymmetric rules applied on top."""
    return compose(build_causal(layout.length), build_maam(layout))


def incremental_row(layout: TokenLayout, i: int) -> np.ndarray:
    """Visibility row for query position ``i`` over keys 0..i.

    Equals row ``i`` of the composed mask restricted to columns <= i, computed
    with O(L) boolean work and no LxL materialization; this is the decode-time
    path where each step appends a single query row.
    """
    if not 0 <= i < layout.length:
        raise IndexError(f"row {i} out of range [0, {layout.length})")
    row = np.ones(i + 1, dtype=bool)
    flags = layout.role_flags()
    if flags["visual_reasoning"][i]:
        row &= ~flags["audio_input"][: i + 1]
    if flags["audio_reasoning"][i]:
        row &= ~flags["video_input"][: i + 1]
        row &= ~flags["visual_span"][: i + 1]
    row.setflags(write=False)
    return row


@dataclass(frozen=True)
class MarkerTable:
    """Token ids of modality indicators and control tags for layout location.

    ``video``/``audio`` give (start, end) indicator ids delimiting the input
    payloads; ``tag_open``/``tag_close`` map each control-tag name (mod, v, a,
    sum, ans) to its token id. With ``include_indicators`` the indicator
    tokens themselves join the input sets; by default only the payload
    between them does.
    """

    video: tuple[int, int]
    audio: tuple[int, int]
    tag_open: Mapping[str, int] = field(default_factory=dict)
    tag_close: Mapping[str, int] = field(default_factory=dict)
    include_indicators: bool = False


def _find_pair(tokens: Sequence[int], start_id: int, end_id: int,
               label: str) -> tuple[int, int] | None:
    starts = [k for k, t in enumerate(tokens) if t == start_id]
    ends = [k for k, t in enumerate(tokens) if t == end_id]
    if not starts and not ends:
        return None
    if len(starts) > 1 or len(ends) > 1:
        raise LayoutError(f"duplicated {label} marker")
    if not starts or not ends:
        raise LayoutError(f"unpaired {label} marker")
    if ends[0] < starts[0]:
        raise LayoutError(f"{label} end marker precedes its start")
    return starts[0], ends[0]


def locate_layout(tokens: Sequence[int], markers: MarkerTable) -> TokenLayout:
    """Scan a token sequence and derive its layout from marker ids.

    Input sets span the ranges delimited by the modality indicators; the
    reasoning sets are the strict interiors of the v/a tag pairs, with the
    visual span additionally covering both v boundary tags. Absent pairs
    simply produce empty sets (unimodal probing layouts are legal).
    """
    tokens = list(tokens)
    if not tokens:
        raise LayoutError("empty token sequence")

    video = _find_pair(tokens, markers.video[0], markers.video[1], "video")
    audio = _find_pair(tokens, markers.audio[0], markers.audio[1], "audio")

    pairs: dict[str, tuple[int, int]] = {}
    for name in ("mod", "v", "a", "sum", "ans"):
        if name not in markers.tag_open or name not in markers.tag_close:
            continue
        pair = _find_pair(tokens, markers.tag_open[name],
                          markers.tag_close[name], f"<{name}>")
        if pair is not None:
            pairs[name] = pair

    spans = sorted(pairs.items(), key=lambda kv: kv[1][0])
    for (outer, (o_start, o_end)), (inner, (i_start, _)) in zip(spans, spans[1:]):
        if i_start < o_end:
            raise LayoutError(
                f"NestedTag: <{inner}> pair inside or crossing <{outer}> pair")

    indicator_edge = max(
        [pos for pair in (video, audio) if pair is not None for pos in pair],
        default=-1,
    )
    tag_edge = min((start for start, _ in pairs.values()), default=len(tokens))
    if tag_edge <= indicator_edge:
        raise LayoutError("reasoning tags precede input markers")

    def indicator_range(pair: tuple[int, int] | None) -> frozenset[int]:
        if pair is None:
            return frozenset()
        start, end = pair
        if markers.include_indicators:
            return frozenset(range(start, end + 1))
        return frozenset(range(start + 1, end))

    def interior(name: str) -> frozenset[int]:
        if name not in pairs:
            return frozenset()
        start, end = pairs[name]
        return frozenset(range(start + 1, end))

    visual_span = frozenset()
    if "v" in pairs:
        start, end = pairs["v"]
        visual_span = frozenset(range(start, end + 1))

    return TokenLayout(
        length=len(tokens),
        video_input=indicator_range(video),
        audio_input=indicator_range(audio),
        visual_reasoning=interior("v"),
        audio_reasoning=interior("a"),
        visual_span=visual_span,
        summary_span=interior("sum"),
    )


# --- Declarative layout specs -------------------------------------------

def _ranges_to_set(ranges: Iterable[Sequence[int]], role: str) -> frozenset[int]:
    indices: set[int] = set()
    for r in ranges:
        if len(r) != 2:
            raise ValueError(f"{role}: each range must be [first, last]")
        first, last = int(r[0]), int(r[1])
        if last < first:
            raise ValueError(f"{role}: range [{first}, {last}] is reversed")
        indices.update(range(first, last + 1))
    return frozenset(indices)


def layout_from_spec(spec: Mapping) -> TokenLayout:
    """Resolve a declarative ``{role: [[first, last], ...]}`` record."""
    if "length" not in spec:
        raise ValueError("layout spec needs a 'length' field")
    known = set(ROLE_NAMES) | {"length"}
    unknown = set(spec) - known
    if unknown:
        raise ValueError(f"unknown layout roles: {sorted(unknown)}")
    roles = {
        name: _ranges_to_set(spec.get(name, []), name) for name in ROLE_NAMES
    }
    return TokenLayout(length=int(spec["length"]), **roles)


def load_layout_spec(path: str | Path) -> TokenLayout:
    with open(path, encoding="utf-8") as fh:
        return layout_from_spec(json.load(fh))


# --- Mask export formats --------------------------------------------------

def mask_to_text(mask: MaskMatrix) -> str:
    """Dense grid of 0/1 characters, one row per line. 1 = visible."""
    return "\n".join(
        "".join("1" if cell else "0" for cell in row) for row in mask.visible
    ) + "\n"


def mask_from_text(text: str) -> MaskMatrix:
    rows = [line for line in text.splitlines() if line]
    grid = [[c == "1" for c in line] for line in rows]
    return MaskMatrix(np.array(grid, dtype=bool))


_RLE_MAGIC = b"MRL1"


def mask_to_rle(mask: MaskMatrix) -> bytes:
    """Compact run-length record over the row-major flattened grid."""
    flat = mask.visible.ravel()
    runs: list[int] = []
    first_bit = bool(flat[0])
    current, count = flat[0], 0
    for bit in flat:
        if bit == current:
            count += 1
        else:
            runs.append(count)
            current, count = bit, 1
    runs.append(count)
    out = bytearray(_RLE_MAGIC)
    out += struct.pack("<IBI", mask.length, int(first_bit), len(runs))
    out += struct.pack(f"<{len(runs)}I", *runs)
    return bytes(out)


def mask_from_rle(blob: bytes) -> MaskMatrix:
    if blob[:4] != _RLE_MAGIC:
        raise ValueError("not a mask run-length record")
    length, first_bit, n_runs = struct.unpack_from("<IBI", blob, 4)
    runs = struct.unpack_from(f"<{n_runs}I", blob, 4 + struct.calcsize("<IBI"))
    flat = np.empty(length * length, dtype=bool)
    bit = bool(first_bit)
    pos = 0
    for run in runs:
        flat[pos:pos + run] = bit
        pos += run
        bit = not bit
    if pos != length * length:
        raise ValueError("run lengths do not cover the grid")
    return MaskMatrix(flat.reshape(length, length))
