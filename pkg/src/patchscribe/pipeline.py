"""Resumable four-stage captioning pipeline.

Stages move patches through the store's status machine:

    fetch    NEW          -> OSM_FETCHED   (cache map elements)
    caption  OSM_FETCHED  -> CAPTIONED     (or UNUSABLE; raw caption via LLM)
    augment  CAPTIONED    -> CAPTIONED     (task3 revisions up to a target)
    refine   CAPTIONED    -> DONE          (fix + dedupe; or stay for re-augment)

Each stage claims patches with leased compare-and-swap, processes them
independently, and commits every logical step in one store transaction, so
a killed run resumes cleanly. Per-patch failures are recorded on the row
and never abort the batch.

All randomness is drawn from ``random.Random`` instances seeded with
strings of the form ``"{seed}:{patch_id}:{purpose}"``, which makes results
independent of worker count and claim order.
"""

from __future__ import annotations

import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path as FsPath
from typing import Callable, Optional, Protocol

from . import osm, prompts, refine
from .geometry import (
    DEFAULT_SIMPLIFY_EPSILON,
    Path,
    RingSet,
    clip_and_normalize,
    area_attributes,
    nonarea_attributes,
    rings_to_path,
)
from .llm import CompletionRequest
from .store import (
    STATE_DELETED,
    STATE_REFINED,
    STATUS_CAPTIONED,
    STATUS_NEW,
    STATUS_OSM_FETCHED,
    PipelineStore,
    PatchRow,
)
from .tagwiki import TagWiki, interpret_all, load_wiki

log = logging.getLogger(__name__)

DEFAULT_LEASE_S = 300.0
#: Probability that a patch targets exactly two caption variations;
#: otherwise the target is uniform over three to five.
DEFAULT_TWO_PROBABILITY = 0.88
_RAW_TASKS = ("task1", "task2")


class Fetcher(Protocol):
    def __call__(self, patch: PatchRow) -> list[osm.OsmElement]: ...


class CompletionClient(Protocol):
    def complete(self, req: CompletionRequest): ...


@dataclass
class StageReport:
    """Counts for one stage pass; emitted as a structured log line."""

    stage: str
    processed: int = 0
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0
    extra: dict = field(default_factory=dict)

    def bump(self, outcome: str) -> None:
        self.processed += 1
        setattr(self, outcome, getattr(self, outcome) + 1)

    def note(self, key: str, n: int = 1) -> None:
        self.extra[key] = self.extra.get(key, 0) + n

    def to_json(self) -> str:
        body = {
            "record": "stage_report",
            "stage": self.stage,
            "processed": self.processed,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "skipped": self.skipped,
        }
        body.update(self.extra)
        return json.dumps(body, sort_keys=True)


class OverpassFetcher:
    """Two-step live fetch: bbox intersection plus center enclosure."""

    def __init__(self, client: osm.OverpassClient, timeout_s: int = 180):
        self.client = client
        self.timeout_s = timeout_s

    def __call__(self, patch: PatchRow) -> list[osm.OsmElement]:
        as_of = osm.snapshot_date(patch.frame.capture_time)
        step1 = osm.parse_response(
            self.client.query(
                osm.build_query_step1(patch.geo_bbox, as_of, self.timeout_s)
            )
        )
        step2 = osm.parse_response(
            self.client.query(
                osm.build_query_step2(patch.geo_bbox, as_of, self.timeout_s)
            )
        )
        return osm.merge_dedupe(step1, step2)


class FixtureFetcher:
    """Offline fetch backend reading canned per-patch response bodies.

    The fixture file maps patch_id to {"step1": body, "step2": body} where
    each body is an Overpass JSON response (object or string). Parse times
    are pinned to the patch capture time so repeated runs build identical
    caches.
    """

    def __init__(self, path: str | FsPath):
        self.path = FsPath(path)
        raw = json.loads(self.path.read_text("utf-8"))
        self._by_patch: dict[str, dict] = {
            pid: {
                step: body if isinstance(body, str) else json.dumps(body)
                for step, body in steps.items()
            }
            for pid, steps in raw.items()
        }

    def __call__(self, patch: PatchRow) -> list[osm.OsmElement]:
        steps = self._by_patch.get(patch.patch_id)
        if steps is None:
            raise osm.BackendUnavailable(
                f"no fixture entry for patch {patch.patch_id}"
            )
        when = patch.frame.capture_time
        step1 = osm.parse_response(steps.get("step1", '{"elements": []}'), when)
        step2 = osm.parse_response(steps.get("step2", '{"elements": []}'), when)
        return osm.merge_dedupe(step1, step2)


def _drive(
    store: PipelineStore,
    status: str,
    handle: Callable[[PatchRow], str],
    *,
    stage: str,
    workers: int = 1,
    batch: Optional[int] = None,
    lease_s: float = DEFAULT_LEASE_S,
) -> StageReport:
    """Claim-and-process loop shared by all stages.

    ``handle`` returns the outcome bucket ("succeeded" / "skipped"); any
    exception it raises is recorded on the patch row as a failure and the
    loop continues with the next claim.
    """
    report = StageReport(stage=stage)
    lock = threading.Lock()
    budget = [-1 if batch is None else batch]
    claimed: list[str] = []

    def take_ticket() -> bool:
        with lock:
            if budget[0] == 0:
                return False
            if budget[0] > 0:
                budget[0] -= 1
            return True

    def loop() -> None:
        while take_ticket():
            patch = store.claim(status, lease_s=lease_s)
            if patch is None:
                return
            with lock:
                claimed.append(patch.patch_id)
            try:
                outcome = handle(patch)
            except Exception as e:  # per-patch isolation: note and move on
                log.warning("%s: %s failed: %s", stage, patch.patch_id, e)
                store.note_error(patch.patch_id, f"{type(e).__name__}: {e}")
                outcome = "failed"
            with lock:
                report.bump(outcome)

    if workers <= 1:
        loop()
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(loop) for _ in range(workers)]
            for f in futures:
                f.result()
    # leases pin each patch to one visit per pass; hand the leftovers back
    # so the next stage (or a rerun) can claim them right away
    for patch_id in claimed:
        store.release(patch_id)
    log.info("%s", report.to_json())
    return report


# ---------------------------------------------------------------------------
# Stage 1: fetch


def run_fetch(
    store: PipelineStore,
    fetcher: Fetcher,
    *,
    workers: int = 1,
    batch: Optional[int] = None,
    lease_s: float = DEFAULT_LEASE_S,
) -> StageReport:
    """Fetch and cache map context for every NEW patch.

    A fetch failure leaves the patch in NEW with the error recorded;
    rerunning on an already-fetched corpus is a no-op.
    """

    def handle(patch: PatchRow) -> str:
        elements = fetcher(patch)
        store.finish_fetch(
            patch.patch_id,
            osm.elements_to_json(elements),
            datetime.now(timezone.utc).isoformat(),
        )
        return "succeeded"

    return _drive(
        store,
        STATUS_NEW,
        handle,
        stage="fetch",
        workers=workers,
        batch=batch,
        lease_s=lease_s,
    )


# ---------------------------------------------------------------------------
# Stage 2: caption


class _NotAnArea(Exception):
    pass


def _assemble_prompt(
    patch: PatchRow,
    elements: list[osm.OsmElement],
    wiki: TagWiki,
    *,
    area_threshold: float,
    min_length_factor: float,
    epsilon: float,
) -> Optional[tuple[str, str, osm.OsmElement]]:
    """Pick the element to caption and build its prompt.

    Returns (task, prompt, element), or None when the patch supports
    neither task. The area task is preferred; the linear task is the
    fallback when no area element passes the coverage filter.
    """
    frame = patch.frame
    element = osm.select_area_element(elements, frame, area_threshold)
    if element is not None:
        if not isinstance(element.geometry, RingSet):
            raise _NotAnArea(
                f"selected area element {element.kind}/{element.id} has no rings"
            )
        clipped, cropped = clip_and_normalize(element.geometry, frame)
        assert isinstance(clipped, RingSet)
        attrs = area_attributes(clipped, cropped, epsilon=epsilon)
        prompt = prompts.assemble_task1(attrs, interpret_all(element.tags, wiki))
        return "task1", prompt, element

    element = osm.select_nonarea_element(elements, frame, min_length_factor)
    if element is None:
        return None
    g = element.geometry
    path = rings_to_path(g) if isinstance(g, RingSet) else g
    clipped, cropped = clip_and_normalize(path, frame)
    assert isinstance(clipped, Path)
    attrs = nonarea_attributes(clipped, frame, cropped, epsilon=epsilon)
    prompt = prompts.assemble_task2(attrs, interpret_all(element.tags, wiki))
    return "task2", prompt, element


def run_caption(
    store: PipelineStore,
    client: CompletionClient,
    *,
    wiki: Optional[TagWiki] = None,
    workers: int = 1,
    batch: Optional[int] = None,
    lease_s: float = DEFAULT_LEASE_S,
    area_threshold: float = osm.AREA_FRACTION_THRESHOLD,
    min_length_factor: float = osm.MIN_LENGTH_FACTOR,
    epsilon: float = DEFAULT_SIMPLIFY_EPSILON,
) -> StageReport:
    """Write the raw caption for every fetched patch.

    Patches that support neither task become UNUSABLE. A completion
    failure leaves the patch in OSM_FETCHED for a later retry.
    """
    the_wiki = wiki if wiki is not None else load_wiki()

    def handle(patch: PatchRow) -> str:
        cached = store.load_cached_elements(patch.patch_id)
        if cached is None:
            raise RuntimeError("fetched patch has no cached elements")
        elements = [
            osm.project_element(e, patch.geo_bbox, patch.frame)
            for e in osm.elements_from_json(cached[0])
        ]
        picked = _assemble_prompt(
            patch,
            elements,
            the_wiki,
            area_threshold=area_threshold,
            min_length_factor=min_length_factor,
            epsilon=epsilon,
        )
        if picked is None:
            store.mark_unusable(patch.patch_id)
            return "skipped"
        task, prompt, element = picked
        response = client.complete(CompletionRequest(prompt=prompt))
        text = response.text.strip()
        if not text:
            raise RuntimeError("completion returned an empty caption")
        store.finish_caption(
            patch.patch_id, task, element.kind, element.id, element.tags, text
        )
        return "succeeded"

    report = _drive(
        store,
        STATUS_OSM_FETCHED,
        handle,
        stage="caption",
        workers=workers,
        batch=batch,
        lease_s=lease_s,
    )
    return report


# ---------------------------------------------------------------------------
# Stage 3: augment


def draw_target(rng: random.Random, two_probability: float = DEFAULT_TWO_PROBABILITY) -> int:
    """Per-patch caption-count target: 2 with ``two_probability``, else
    uniform over {3, 4, 5}."""
    if rng.random() < two_probability:
        return 2
    return rng.choice((3, 4, 5))


def run_augment(
    store: PipelineStore,
    client: CompletionClient,
    *,
    meta: Optional[prompts.MetaExampleSet] = None,
    seed: int = 0,
    two_probability: float = DEFAULT_TWO_PROBABILITY,
    workers: int = 1,
    batch: Optional[int] = None,
    lease_s: float = DEFAULT_LEASE_S,
) -> StageReport:
    """Top every captioned patch up to its target count with task3
    revisions of the raw caption.

    The target is drawn once per patch from the configured distribution
    and persisted, so reruns and regrown caption sets aim at the same
    number. Patches already at target are skipped.
    """
    the_meta = meta if meta is not None else prompts.load_meta_examples()

    def handle(patch: PatchRow) -> str:
        pid = patch.patch_id
        captions = store.captions_for(pid)
        if not captions:
            raise RuntimeError("captioned patch has no caption rows")
        raw = captions[0]
        if raw.state == STATE_DELETED or not raw.text:
            raise RuntimeError("raw caption is gone; cannot revise")
        target = patch.target_count
        if target is None:
            target = draw_target(
                random.Random(f"{seed}:{pid}:target"), two_probability
            )
            store.set_target(pid, target)
        live = sum(1 for c in captions if c.state != STATE_DELETED)
        if live >= target:
            return "skipped"
        next_seq = captions[-1].seq + 1
        while live < target:
            rng = random.Random(f"{seed}:{pid}:examples:{next_seq}")
            examples = prompts.sample_task3_examples(the_meta, raw.task, rng)
            prompt = prompts.assemble_task3(raw.text, examples)
            response = client.complete(CompletionRequest(prompt=prompt))
            text = response.text.strip()
            if not text:
                raise RuntimeError("completion returned an empty revision")
            store.add_revision(pid, text, revision_of=raw.caption_id)
            live += 1
            next_seq += 1
        return "succeeded"

    return _drive(
        store,
        STATUS_CAPTIONED,
        handle,
        stage="augment",
        workers=workers,
        batch=batch,
        lease_s=lease_s,
    )


# ---------------------------------------------------------------------------
# Stage 4: refine


def run_refine(
    store: PipelineStore,
    *,
    markers: tuple[str, ...] = refine.DEFAULT_ARTIFACT_MARKERS,
    workers: int = 1,
    batch: Optional[int] = None,
    lease_s: float = DEFAULT_LEASE_S,
) -> StageReport:
    """Fix and dedupe each full caption set, promoting survivors to DONE.

    A patch whose set shrinks below two usable captions, or which loses
    all captions of either task family, stays CAPTIONED so augment can
    grow the set back; patches still short of their target are skipped.
    """

    def handle(patch: PatchRow) -> str:
        pid = patch.patch_id
        target = patch.target_count
        captions = store.captions_for(pid, include_deleted=False)
        if target is None or len(captions) < target:
            return "skipped"

        # caption_id -> (state, text, reason); dedupe may flip entries below
        updates: dict[str, tuple[str, Optional[str], Optional[str]]] = {}
        kept: list[tuple[str, str, str]] = []  # caption_id, task, fixed text
        for c in captions:
            outcome = refine.fix_caption(c.text or "", markers)
            if outcome.action == "deleted":
                updates[c.caption_id] = (STATE_DELETED, c.text, outcome.reason)
            else:
                updates[c.caption_id] = (STATE_REFINED, outcome.text, outcome.reason)
                kept.append((c.caption_id, c.task, outcome.text or ""))

        doomed = set(refine.dedupe_captions([text for _, _, text in kept]))
        survivors: list[tuple[str, str]] = []  # task, caption_id
        for i, (caption_id, task, text) in enumerate(kept):
            if i in doomed:
                updates[caption_id] = (STATE_DELETED, text, "duplicate")
            else:
                survivors.append((task, caption_id))

        done = (
            len(survivors) >= 2
            and any(task in _RAW_TASKS for task, _ in survivors)
            and any(task == "task3" for task, _ in survivors)
        )
        store.apply_refine(
            pid,
            [(cid, state, text, reason) for cid, (state, text, reason) in updates.items()],
            done,
        )
        return "succeeded" if done else "skipped"

    report = _drive(
        store,
        STATUS_CAPTIONED,
        handle,
        stage="refine",
        workers=workers,
        batch=batch,
        lease_s=lease_s,
    )
    return report


# ---------------------------------------------------------------------------
# Orchestration


def run_all(
    store: PipelineStore,
    fetcher: Fetcher,
    client: CompletionClient,
    *,
    wiki: Optional[TagWiki] = None,
    meta: Optional[prompts.MetaExampleSet] = None,
    seed: int = 0,
    two_probability: float = DEFAULT_TWO_PROBABILITY,
    workers: int = 1,
    batch: Optional[int] = None,
    lease_s: float = DEFAULT_LEASE_S,
    max_rounds: int = 8,
) -> list[StageReport]:
    """Drive every stage to quiescence: fetch, caption, then alternate
    augment and refine until no patch is left in CAPTIONED (or nothing
    moves anymore)."""
    reports = [
        run_fetch(store, fetcher, workers=workers, batch=batch, lease_s=lease_s),
        run_caption(
            store, client, wiki=wiki, workers=workers, batch=batch, lease_s=lease_s
        ),
    ]
    for _ in range(max_rounds):
        if not store.patch_ids_by_status(STATUS_CAPTIONED):
            break
        augment = run_augment(
            store,
            client,
            meta=meta,
            seed=seed,
            two_probability=two_probability,
            workers=workers,
            lease_s=lease_s,
        )
        refined = run_refine(store, workers=workers, lease_s=lease_s)
        reports.extend([augment, refined])
        if augment.succeeded == 0 and refined.succeeded == 0:
            log.warning("pipeline quiesced with patches still in CAPTIONED")
            break
    return reports
