"""Prompt assembly for the three captioning tasks.

Task 1 (area description) and Task 2 (linear-feature description) fill a
template with interpreted attributes and tag sentences plus one fixed
worked example. Task 3 (caption variation) carries five sampled
raw/revision pairs as few-shot examples. Placeholders use ``{name}``
syntax; substitution is a single pass, so braces inside substituted values
(geometry strings) are never re-interpreted.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .geometry import AreaAttributes, NonAreaAttributes

#: Exact sentence substituted for the cropped placeholder.
CROPPED_SENTENCE = "Some parts of the geometry extended out of this ROI."

_PLACEHOLDER = re.compile(r"\{([a-z][a-z0-9_]*)\}")

_EXAMPLES_PER_TASK = 5
_REVISIONS_PER_RAW = 5


class MissingPlaceholder(Exception):
    """Template references a placeholder with no provided value."""


class EmptyCaption(Exception):
    """Caption input is empty or whitespace-only."""


class MetaExampleError(Exception):
    """Meta-example file violates the 5 raws x 5 revisions structure."""


@dataclass(frozen=True)
class MetaExample:
    raw: str
    revisions: tuple[str, ...]


@dataclass(frozen=True)
class MetaExampleSet:
    task1: tuple[MetaExample, ...]
    task2: tuple[MetaExample, ...]

    def for_task(self, task: str) -> tuple[MetaExample, ...]:
        if task == "task1":
            return self.task1
        if task == "task2":
            return self.task2
        raise ValueError(f"meta examples exist for task1/task2, not {task!r}")


def _asset_text(name: str) -> str:
    return resources.files("patchscribe").joinpath(f"assets/{name}").read_text("utf-8")


def load_template(task: str) -> str:
    """Shipped template text for task1 / task2 / task3."""
    if task not in {"task1", "task2", "task3"}:
        raise ValueError(f"unknown task {task!r}")
    return _asset_text(f"{task}_template.txt")


def load_meta_examples(path: str | Path | None = None) -> MetaExampleSet:
    """Load the revision few-shot pool: per task, exactly 5 raw captions
    with exactly 5 revisions each. Reads the shipped asset when ``path`` is
    omitted."""
    if path is None:
        text = _asset_text("meta_examples.jsonl")
    else:
        text = Path(path).read_text("utf-8")
    buckets: dict[str, list[MetaExample]] = {"task1": [], "task2": []}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise MetaExampleError(f"line {number}: invalid JSON: {e.msg}") from e
        task = rec.get("task")
        if task not in buckets:
            raise MetaExampleError(f"line {number}: unknown task {task!r}")
        raw = rec.get("raw")
        revisions = rec.get("revisions")
        if not isinstance(raw, str) or not raw.strip():
            raise MetaExampleError(f"line {number}: missing raw caption")
        if (
            not isinstance(revisions, list)
            or len(revisions) != _REVISIONS_PER_RAW
            or not all(isinstance(r, str) and r.strip() for r in revisions)
        ):
            raise MetaExampleError(
                f"line {number}: need exactly {_REVISIONS_PER_RAW} non-empty revisions"
            )
        buckets[task].append(MetaExample(raw=raw, revisions=tuple(revisions)))
    for task, examples in buckets.items():
        if len(examples) != _EXAMPLES_PER_TASK:
            raise MetaExampleError(
                f"{task}: need exactly {_EXAMPLES_PER_TASK} raw captions, "
                f"got {len(examples)}"
            )
    return MetaExampleSet(task1=tuple(buckets["task1"]), task2=tuple(buckets["task2"]))


def render(template: str, values: dict[str, str]) -> str:
    """One-pass ``{name}`` substitution; unknown names raise
    MissingPlaceholder listing every offender."""
    missing: list[str] = []

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            missing.append(name)
            return match.group(0)
        return values[name]

    out = _PLACEHOLDER.sub(sub, template)
    if missing:
        raise MissingPlaceholder(f"no value for placeholder(s): {sorted(set(missing))}")
    return out


def assemble_task1(
    attrs: AreaAttributes, tag_interps: list[str], template: str | None = None
) -> str:
    """Prompt describing the selected area element."""
    if template is None:
        template = load_template("task1")
    return render(
        template,
        {
            "location": attrs.coarse_location,
            "shape": attrs.shape,
            "size": f"{attrs.normalized_size:.3f}",
            "geometry": attrs.simplified_geometry,
            "cropped": CROPPED_SENTENCE if attrs.is_cropped else "",
            "tags": "\n".join(tag_interps),
        },
    )


def assemble_task2(
    attrs: NonAreaAttributes, tag_interps: list[str], template: str | None = None
) -> str:
    """Prompt describing the selected linear element."""
    if template is None:
        template = load_template("task2")
    start, end = attrs.endpoint_locations
    return render(
        template,
        {
            "endpoints": f"{start} to {end}",
            "sinuosity": attrs.sinuosity,
            "normalized_length": f"{attrs.normalized_length:.3f}",
            "length": str(attrs.length_m),
            "orientation": attrs.orientation,
            "geometry": attrs.simplified_geometry,
            "cropped": CROPPED_SENTENCE if attrs.is_cropped else "",
            "tags": "\n".join(tag_interps),
        },
    )


def sample_task3_examples(
    meta: MetaExampleSet, task: str, rng: random.Random
) -> list[tuple[str, str]]:
    """Five-shot pool for one revision prompt: every raw caption of the task
    appears exactly once, paired with one of its five revisions chosen
    uniformly, in uniformly shuffled order. Fully determined by ``rng``
    state: five revision draws in raw order, then one shuffle."""
    pairs = [
        (ex.raw, ex.revisions[rng.randrange(_REVISIONS_PER_RAW)])
        for ex in meta.for_task(task)
    ]
    rng.shuffle(pairs)
    return pairs


def assemble_task3(
    caption: str, examples: list[tuple[str, str]], template: str | None = None
) -> str:
    """Prompt asking for one stylistic variation of ``caption``."""
    if not caption or not caption.strip():
        raise EmptyCaption("cannot revise an empty caption")
    if len(examples) != _EXAMPLES_PER_TASK:
        raise ValueError(f"need exactly {_EXAMPLES_PER_TASK} examples")
    if template is None:
        template = load_template("task3")
    shots = "\n".join(f"Raw: {raw}\nRevision: {rev}\n" for raw, rev in examples)
    return render(template, {"examples": shots.rstrip("\n"), "caption": caption})
