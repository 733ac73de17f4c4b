"""Corpus analytics: tokenization, MTLD lexical diversity, and dataset
statistics reports.

The tokenizer is a deliberately simple, fully deterministic rule set
(whitespace split, punctuation detachment, apostrophe contractions), good
enough for length and frequency statistics. MTLD follows the standard
bidirectional factor-count construction with partial factors.
"""

from __future__ import annotations

import csv
import json
import statistics
import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol

MTLD_THRESHOLD = 0.72
TOP_WORDS = 50
TOP_KEYS = 20
#: Keys whose value distributions are tabulated in the report.
VALUE_KEYS = ("highway", "natural", "landuse", "waterway", "surface")

_PUNCT = set(string.punctuation)


class EmptyInput(Exception):
    """MTLD request over zero tokens."""


# ---------------------------------------------------------------------------
# Tokenization


def tokenize(text: str) -> list[str]:
    """Deterministic word tokenizer.

    Rules: split on whitespace; peel leading and trailing punctuation
    characters off each chunk as single-character tokens; split the core at
    apostrophes so contractions separate ("it's" -> "it", "'s"); case is
    preserved; no empty tokens. Internal punctuation (hyphens, decimal
    points) stays inside the token.
    """
    tokens: list[str] = []
    for chunk in text.split():
        lead: list[str] = []
        while chunk and chunk[0] in _PUNCT and not (
            chunk[0] == "'" and len(chunk) > 1 and chunk[1] not in _PUNCT
        ):
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail: list[str] = []
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            core = chunk
            start = 0
            for i in range(1, len(core)):
                if core[i] == "'":
                    if start < i:
                        tokens.append(core[start:i])
                    start = i
            tokens.append(core[start:])
        tokens.extend(reversed(trail))
    return tokens


# ---------------------------------------------------------------------------
# MTLD


def _mtld_pass(tokens: list[str], threshold: float) -> float:
    """One directional pass; returns the factor count (full + partial)."""
    factors = 0.0
    types: set[str] = set()
    count = 0
    for token in tokens:
        count += 1
        types.add(token)
        if len(types) / count < threshold:
            factors += 1.0
            types.clear()
            count = 0
    if count > 0:
        ttr = len(types) / count
        factors += (1.0 - ttr) / (1.0 - threshold)
    return factors


def mtld(tokens: list[str], threshold: float = MTLD_THRESHOLD) -> float | None:
    """Measure of Textual Lexical Diversity: mean of forward and backward
    factor passes, partial factors weighted by (1 - TTR)/(1 - threshold).

    Tokens are lower-cased internally. Returns None (undefined) when either
    pass accumulates zero factors, which happens for short sequences whose
    type-token ratio never falls below the threshold. Raises EmptyInput for
    an empty sequence.
    """
    if not tokens:
        raise EmptyInput("MTLD is undefined for zero tokens")
    lowered = [t.lower() for t in tokens]
    forward = _mtld_pass(lowered, threshold)
    backward = _mtld_pass(list(reversed(lowered)), threshold)
    if forward == 0.0 or backward == 0.0:
        return None
    n = len(lowered)
    return (n / forward + n / backward) / 2.0


# ---------------------------------------------------------------------------
# Corpus statistics


class StatsSource(Protocol):
    """What corpus_stats needs from the pipeline store."""

    def done_patch_ids(self) -> list[str]: ...

    def refined_captions_for(self, patch_id: str) -> list[tuple[str, str, str]]:
        """Ordered (caption_id, task, text) rows."""
        ...

    def selected_tags_for(self, patch_id: str) -> dict[str, str]: ...


@dataclass
class StatsReport:
    patch_count: int
    caption_count: int
    total_tokens: int
    length_histogram: dict[int, int]
    median_length: float | None
    mean_length: float | None
    min_length: int | None
    max_length: int | None
    top_words: list[tuple[str, int]]
    top_keys: list[tuple[str, int]]
    top_values: dict[str, list[tuple[str, int]]]
    variation_histogram: dict[int, int]
    corpus_mtld: float | None
    mtld_threshold: float = MTLD_THRESHOLD
    stop_words_removed: int = 0
    extra: dict = field(default_factory=dict)


def load_stop_words(path: str | Path | None = None) -> frozenset[str]:
    """Stop-word list, one lowercase word per line; shipped asset by default."""
    if path is None:
        text = (
            resources.files("patchscribe")
            .joinpath("assets/stopwords.txt")
            .read_text("utf-8")
        )
    else:
        text = Path(path).read_text("utf-8")
    return frozenset(
        w.strip().lower() for w in text.splitlines() if w.strip() and not w.startswith("#")
    )


def corpus_stats(
    store: StatsSource,
    *,
    stop_words: frozenset[str] | None = None,
    top_words: int = TOP_WORDS,
    top_keys: int = TOP_KEYS,
    value_keys: tuple[str, ...] = VALUE_KEYS,
    threshold: float = MTLD_THRESHOLD,
) -> StatsReport:
    """Aggregate statistics over the refined captions of DONE patches.

    Deterministic: patches in patch_id order, captions in caption_id order
    within each patch; the corpus MTLD runs over that concatenated stream.
    """
    if stop_words is None:
        stop_words = load_stop_words()

    patch_ids = sorted(store.done_patch_ids())
    lengths: list[int] = []
    length_hist: Counter = Counter()
    word_freq: Counter = Counter()
    key_freq: Counter = Counter()
    value_freq: dict[str, Counter] = {k: Counter() for k in value_keys}
    variation_hist: Counter = Counter()
    stream: list[str] = []
    caption_count = 0
    stopped = 0

    for patch_id in patch_ids:
        rows = sorted(store.refined_captions_for(patch_id))
        variation_hist[len(rows)] += 1
        for _caption_id, _task, text in rows:
            caption_count += 1
            tokens = tokenize(text)
            lengths.append(len(tokens))
            length_hist[len(tokens)] += 1
            stream.extend(tokens)
            for token in tokens:
                word = token.lower()
                if word in stop_words or all(ch in _PUNCT for ch in word):
                    stopped += 1
                    continue
                word_freq[word] += 1
        tags = store.selected_tags_for(patch_id)
        for key, value in tags.items():
            key_freq[key] += 1
            if key in value_freq:
                value_freq[key][value] += 1

    def ranked(counter: Counter, k: int) -> list[tuple[str, int]]:
        # count desc, then lexicographic for a stable report
        return sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:k]

    corpus_mtld: float | None
    if stream:
        corpus_mtld = mtld(stream, threshold)
    else:
        corpus_mtld = None

    return StatsReport(
        patch_count=len(patch_ids),
        caption_count=caption_count,
        total_tokens=sum(lengths),
        length_histogram=dict(sorted(length_hist.items())),
        median_length=statistics.median(lengths) if lengths else None,
        mean_length=statistics.fmean(lengths) if lengths else None,
        min_length=min(lengths) if lengths else None,
        max_length=max(lengths) if lengths else None,
        top_words=ranked(word_freq, top_words),
        top_keys=ranked(key_freq, top_keys),
        top_values={k: ranked(c, top_keys) for k, c in value_freq.items() if c},
        variation_histogram=dict(sorted(variation_hist.items())),
        corpus_mtld=corpus_mtld,
        mtld_threshold=threshold,
        stop_words_removed=stopped,
    )


# ---------------------------------------------------------------------------
# Report files


def _write_csv(path: Path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_report(report: StatsReport, out_dir: str | Path) -> list[Path]:
    """Emit summary.json plus one CSV per table; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summary = {
        "patch_count": report.patch_count,
        "caption_count": report.caption_count,
        "total_tokens": report.total_tokens,
        "median_length": report.median_length,
        "mean_length": report.mean_length,
        "min_length": report.min_length,
        "max_length": report.max_length,
        "corpus_mtld": report.corpus_mtld,
        "mtld_threshold": report.mtld_threshold,
        "stop_words_removed": report.stop_words_removed,
        "variation_histogram": {str(k): v for k, v in report.variation_histogram.items()},
    }
    summary_path = out / "summary.json"
    summary_path.write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    written.append(summary_path)

    tables: list[tuple[str, list[str], Iterable[Iterable]]] = [
        ("lengths.csv", ["token_count", "captions"], report.length_histogram.items()),
        ("word_freq.csv", ["word", "count"], report.top_words),
        ("key_freq.csv", ["key", "count"], report.top_keys),
        (
            "value_freq.csv",
            ["key", "value", "count"],
            (
                (key, value, count)
                for key in sorted(report.top_values)
                for value, count in report.top_values[key]
            ),
        ),
        (
            "variation_histogram.csv",
            ["captions_per_patch", "patches"],
            report.variation_histogram.items(),
        ),
    ]
    for name, header, rows in tables:
        path = out / name
        _write_csv(path, header, rows)
        written.append(path)
    return written
