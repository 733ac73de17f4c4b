"""Caption cleanup heuristics.

Base-model continuations fail in a few recurring ways: a sentence repeated
inside one caption, prompt scaffolding echoed after the caption, blank
output, and several captions for one patch collapsing into duplicates.
Repairable cases are fixed in place, hopeless ones are marked for
deletion. All rules are exact-match and deterministic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

#: Prompt scaffolding tokens; everything from the first occurrence on is cut.
DEFAULT_ARTIFACT_MARKERS = ("###", "Raw:", "Caption:")

# Split AFTER terminal punctuation followed by whitespace, capturing the
# whitespace so the original text can be rebuilt byte-identically.
_SENTENCE_SPLIT = re.compile(r"((?<=[.!?])\s+)")


@dataclass(frozen=True)
class RefineOutcome:
    action: str  # kept | fixed | deleted
    text: str | None  # None exactly when deleted
    reason: str  # clean | repeat | artifact | repeat_artifact | blank

    def __post_init__(self) -> None:
        if (self.action == "deleted") != (self.text is None):
            raise ValueError("deleted outcomes and only those have no text")


def _normalize(text: str) -> str:
    return " ".join(text.split()).casefold()


def _drop_repeated_sentences(text: str) -> str:
    parts = _SENTENCE_SPLIT.split(text)
    # parts alternate sentence, separator, sentence, ... starting and ending
    # with a sentence chunk (possibly empty).
    pieces: list[str] = []
    seen: set[str] = set()
    for i in range(0, len(parts), 2):
        sentence = parts[i]
        sep_before = parts[i - 1] if i > 0 else ""
        key = _normalize(sentence)
        if key and key in seen:
            continue  # drop the duplicate and the separator before it
        if key:
            seen.add(key)
        pieces.append(sep_before)
        pieces.append(sentence)
    return "".join(pieces)


def _truncate_artifacts(text: str, markers: tuple[str, ...]) -> str:
    cut = len(text)
    for marker in markers:
        idx = text.find(marker)
        if idx != -1:
            cut = min(cut, idx)
    if cut == len(text):
        return text
    return text[:cut].rstrip()


def fix_caption(
    text: str, markers: tuple[str, ...] = DEFAULT_ARTIFACT_MARKERS
) -> RefineOutcome:
    """Repair one caption or mark it for deletion.

    Repeated sentences (exact after whitespace collapsing and case folding)
    beyond their first occurrence are dropped, then everything from the
    first prompt-artifact marker onward is cut. Unchanged input is ``kept``,
    a repaired one ``fixed``, and input that ends up empty ``deleted``.
    The function is idempotent and never lengthens the text.
    """
    deduped = _drop_repeated_sentences(text)
    cleaned = _truncate_artifacts(deduped, markers)
    if not cleaned.strip():
        return RefineOutcome(action="deleted", text=None, reason="blank")
    if cleaned == text:
        return RefineOutcome(action="kept", text=text, reason="clean")
    had_repeat = deduped != text
    had_artifact = cleaned != deduped
    if had_repeat and had_artifact:
        reason = "repeat_artifact"
    elif had_repeat:
        reason = "repeat"
    else:
        reason = "artifact"
    return RefineOutcome(action="fixed", text=cleaned, reason=reason)


def dedupe_captions(captions: list[str]) -> list[int]:
    """Indices of captions that duplicate an earlier one for the same patch
    (exact match after normalization); the earliest copy survives."""
    seen: dict[str, int] = {}
    doomed: list[int] = []
    for i, caption in enumerate(captions):
        key = _normalize(caption)
        if key in seen:
            doomed.append(i)
        else:
            seen[key] = i
    return doomed
