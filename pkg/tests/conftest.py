"""Shared fixtures: the L=6 layout, a brute-force mask oracle, and a random
valid-layout generator used by the property and acceptance suites."""

from __future__ import annotations

import numpy as np
import pytest

from sffuse.mask_engine import MaskMatrix, TokenLayout


@pytest.fixture
def fixture_layout() -> TokenLayout:
    """L=6 with video {0}, audio {1}, visual reasoning/span {2}, audio reasoning {3}."""
    return TokenLayout(
        length=6,
        video_input={0},
        audio_input={1},
        visual_reasoning={2},
        audio_reasoning={3},
        visual_span={2},
    )


def brute_force_mask(layout: TokenLayout) -> MaskMatrix:
    """Literal per-cell evaluation of the causal and asymmetric-visibility
    rules, kept loop-based and independent of the engine's vectorized path."""
    n = layout.length
    visible = np.ones((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if j > i:
                visible[i, j] = False
            if i in layout.visual_reasoning and j in layout.audio_input:
                visible[i, j] = False
            if i in layout.audio_reasoning and j in layout.video_input:
                visible[i, j] = False
            if i in layout.audio_reasoning and j in layout.visual_span:
                visible[i, j] = False
    return MaskMatrix(visible)


def random_layout(rng: np.random.Generator, max_length: int = 64) -> TokenLayout:
    """A random valid layout, covering degenerate role sets as well."""
    length = int(rng.integers(1, max_length + 1))
    boundary = int(rng.integers(0, length + 1))
    input_positions = list(range(boundary))
    reasoning_positions = list(range(boundary, length))

    video: set[int] = set()
    audio: set[int] = set()
    for pos in input_positions:
        draw = rng.random()
        if draw < 0.4:
            video.add(pos)
        elif draw < 0.8:
            audio.add(pos)

    visual_span: set[int] = set()
    visual_reasoning: set[int] = set()
    audio_reasoning: set[int] = set()
    if reasoning_positions and rng.random() < 0.9:
        span_len = int(rng.integers(0, len(reasoning_positions) + 1))
        start = int(rng.integers(0, len(reasoning_positions) - span_len + 1))
        span = reasoning_positions[start:start + span_len]
        visual_span = set(span)
        mode = rng.random()
        if mode < 0.4 and len(span) > 2:
            visual_reasoning = set(span[1:-1])
        elif mode < 0.8:
            visual_reasoning = set(visual_span)
        else:
            visual_reasoning = {p for p in span if rng.random() < 0.5}
    remaining = [p for p in reasoning_positions if p not in visual_span]
    audio_reasoning = {p for p in remaining if rng.random() < 0.4}

    return TokenLayout(
        length=length,
        video_input=video,
        audio_input=audio,
        visual_reasoning=visual_reasoning,
        audio_reasoning=audio_reasoning,
        visual_span=visual_span,
    )
