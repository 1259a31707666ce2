"""Answer string normalization shared by reward scoring and the PEM pipeline.

Both the answer-accuracy reward and the pipeline's per-setting correctness
rate compare strings through the same normalizer so a sample counted correct
during annotation is also rewarded at training time.
"""

from __future__ import annotations

# Punctuation stripped from the end of an answer ("collie." == "collie").
# Brackets are kept so "(a)" and "a" stay distinct.
_TERMINAL_PUNCTUATION = ".,;:!?"


def normalize_answer(
    text: str,
    *,
    casefold: bool = True,
    collapse_whitespace: bool = True,
    strip_terminal_punctuation: bool = True,
) -> str:
    """Canonicalize an answer string for exact comparison.

    Pipeline: Unicode case-fold, trim, collapse internal whitespace runs to a
    single space, then strip terminal punctuation. Each step can be switched
    off for stricter matching.
    """
    result = text.strip()
    if casefold:
        result = result.casefold()
    if collapse_whitespace:
        result = " ".join(result.split())
    if strip_terminal_punctuation:
        while result and result[-1] in _TERMINAL_PUNCTUATION:
            result = result[:-1].rstrip()
    return result


def answers_match(candidate: str, reference: str, **options: bool) -> bool:
    """True iff the two answers are equal after normalization."""
    return normalize_answer(candidate, **options) == normalize_answer(reference, **options)
