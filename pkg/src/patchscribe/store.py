"""SQLite-backed pipeline state store.

Holds one row per patch plus its caption records and a write-once cache of
fetched map elements. Every logical stage step commits in a single
transaction so a crash between any two steps leaves the store in a state a
restarted run can resume from. Worker coordination uses compare-and-swap
claims with lease timestamps; an expired lease makes the row claimable
again.

Patch statuses and the allowed transitions:

    NEW -> OSM_FETCHED -> UNUSABLE
                       -> CAPTIONED -> DONE

UNUSABLE and DONE are terminal. A refine pass that cannot promote a patch
leaves it in CAPTIONED; nothing ever moves a patch backward.

An optional ``fault_hook`` callable fires at every write point, once just
before commit (suffix ``:pre``, raising rolls the transaction back) and
once just after (suffix ``:post``). Tests use it to simulate crashes at
arbitrary write boundaries.
"""

from __future__ import annotations

import json
import sqlite3
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional

from .geometry import PatchFrame
from .imagesource import _parse_time
from .osm import GeoBBox

STATUS_NEW = "NEW"
STATUS_OSM_FETCHED = "OSM_FETCHED"
STATUS_UNUSABLE = "UNUSABLE"
STATUS_CAPTIONED = "CAPTIONED"
STATUS_DONE = "DONE"

STATUSES = (
    STATUS_NEW,
    STATUS_OSM_FETCHED,
    STATUS_UNUSABLE,
    STATUS_CAPTIONED,
    STATUS_DONE,
)

STATE_RAW = "raw"
STATE_REFINED = "refined"
STATE_DELETED = "deleted"

_SCHEMA = """
CREATE TABLE IF NOT EXISTS patches (
    patch_id      TEXT PRIMARY KEY,
    status        TEXT NOT NULL,
    frame_json    TEXT NOT NULL,
    geo_bbox_json TEXT NOT NULL,
    image_ref     TEXT NOT NULL,
    task          TEXT,
    selected_kind TEXT,
    selected_id   INTEGER,
    selected_tags_json TEXT,
    target_count  INTEGER,
    error         TEXT,
    lease_until   REAL
);
CREATE INDEX IF NOT EXISTS idx_patches_status ON patches(status);

CREATE TABLE IF NOT EXISTS captions (
    caption_id  TEXT PRIMARY KEY,
    patch_id    TEXT NOT NULL REFERENCES patches(patch_id),
    seq         INTEGER NOT NULL,
    task        TEXT NOT NULL,
    revision_of TEXT,
    state       TEXT NOT NULL,
    text        TEXT,
    reason      TEXT,
    UNIQUE (patch_id, seq)
);

CREATE TABLE IF NOT EXISTS osm_cache (
    patch_id     TEXT PRIMARY KEY,
    elements_json TEXT NOT NULL,
    fetched_at   TEXT NOT NULL
);
"""


class TransitionError(Exception):
    """A guarded status update matched no row (wrong current status)."""


class FaultInjected(Exception):
    """Raised by test fault hooks to abort a write mid-flight."""


@dataclass(frozen=True)
class PatchRow:
    patch_id: str
    status: str
    frame: PatchFrame
    geo_bbox: GeoBBox
    image_ref: str
    task: Optional[str]
    selected_kind: Optional[str]
    selected_id: Optional[int]
    selected_tags: Optional[dict]
    target_count: Optional[int]
    error: Optional[str]
    lease_until: Optional[float]


@dataclass(frozen=True)
class CaptionRow:
    caption_id: str
    patch_id: str
    seq: int
    task: str
    revision_of: Optional[str]
    state: str
    text: Optional[str]
    reason: Optional[str]


def frame_to_json(frame: PatchFrame) -> str:
    return json.dumps(
        {
            "width_px": frame.width_px,
            "height_px": frame.height_px,
            "gsd_m": frame.gsd_m,
            "capture_time": frame.capture_time.isoformat(),
        },
        sort_keys=True,
    )


def frame_from_json(raw: str) -> PatchFrame:
    d = json.loads(raw)
    return PatchFrame.from_pixels(
        d["width_px"], d["height_px"], d["gsd_m"], _parse_time(d["capture_time"])
    )


def caption_id_for(patch_id: str, seq: int) -> str:
    # zero padding keeps lexicographic order equal to sequence order
    return f"{patch_id}/c{seq:03d}"


class PipelineStore:
    """Single-file store; safe for use from several threads in one process."""

    def __init__(
        self,
        path: str | Path,
        fault_hook: Optional[Callable[[str], None]] = None,
        clock: Callable[[], float] = time.time,
    ):
        self.path = Path(path)
        self.fault_hook = fault_hook
        self._clock = clock
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(str(self.path), check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA foreign_keys=ON")
        with self._conn:
            self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        self._conn.close()

    def _fire(self, event: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(event)

    @contextmanager
    def _txn(self, event: str) -> Iterator[sqlite3.Connection]:
        with self._lock:
            with self._conn:
                yield self._conn
                self._fire(f"{event}:pre")
        self._fire(f"{event}:post")

    # -- registration ------------------------------------------------

    def add_patch(
        self,
        patch_id: str,
        frame: PatchFrame,
        geo_bbox: GeoBBox,
        image_ref: str,
    ) -> bool:
        """Register a patch in NEW. Returns False if already present."""
        with self._txn("register") as conn:
            cur = conn.execute(
                "INSERT OR IGNORE INTO patches"
                " (patch_id, status, frame_json, geo_bbox_json, image_ref)"
                " VALUES (?, ?, ?, ?, ?)",
                (
                    patch_id,
                    STATUS_NEW,
                    frame_to_json(frame),
                    json.dumps(
                        [
                            geo_bbox.min_lon,
                            geo_bbox.min_lat,
                            geo_bbox.max_lon,
                            geo_bbox.max_lat,
                        ]
                    ),
                    image_ref,
                ),
            )
            return cur.rowcount == 1

    # -- reads ---------------------------------------------------------

    def _row_to_patch(self, row: sqlite3.Row) -> PatchRow:
        return PatchRow(
            patch_id=row["patch_id"],
            status=row["status"],
            frame=frame_from_json(row["frame_json"]),
            geo_bbox=GeoBBox(*json.loads(row["geo_bbox_json"])),
            image_ref=row["image_ref"],
            task=row["task"],
            selected_kind=row["selected_kind"],
            selected_id=row["selected_id"],
            selected_tags=(
                json.loads(row["selected_tags_json"])
                if row["selected_tags_json"] is not None
                else None
            ),
            target_count=row["target_count"],
            error=row["error"],
            lease_until=row["lease_until"],
        )

    def get_patch(self, patch_id: str) -> Optional[PatchRow]:
        row = self._conn.execute(
            "SELECT * FROM patches WHERE patch_id = ?", (patch_id,)
        ).fetchone()
        return self._row_to_patch(row) if row is not None else None

    def all_patch_ids(self) -> list[str]:
        rows = self._conn.execute(
            "SELECT patch_id FROM patches ORDER BY patch_id"
        ).fetchall()
        return [r["patch_id"] for r in rows]

    def patch_ids_by_status(self, status: str) -> list[str]:
        rows = self._conn.execute(
            "SELECT patch_id FROM patches WHERE status = ? ORDER BY patch_id",
            (status,),
        ).fetchall()
        return [r["patch_id"] for r in rows]

    def status_counts(self) -> dict[str, int]:
        rows = self._conn.execute(
            "SELECT status, COUNT(*) AS n FROM patches GROUP BY status"
        ).fetchall()
        return {r["status"]: r["n"] for r in rows}

    # -- worker claims ---------------------------------------------------

    def claim(
        self,
        status: str,
        lease_s: float = 300.0,
        now: Optional[float] = None,
    ) -> Optional[PatchRow]:
        """Claim one patch in `status` whose lease is absent or expired.

        Compare-and-swap: the lease write re-checks status and lease under
        the same condition, so two workers can never hold the same patch.
        """
        t = self._clock() if now is None else now
        for _ in range(8):
            with self._lock:
                row = self._conn.execute(
                    "SELECT patch_id FROM patches"
                    " WHERE status = ? AND (lease_until IS NULL OR lease_until <= ?)"
                    " ORDER BY patch_id LIMIT 1",
                    (status, t),
                ).fetchone()
                if row is None:
                    return None
                patch_id = row["patch_id"]
                with self._conn:
                    cur = self._conn.execute(
                        "UPDATE patches SET lease_until = ?"
                        " WHERE patch_id = ? AND status = ?"
                        " AND (lease_until IS NULL OR lease_until <= ?)",
                        (t + lease_s, patch_id, status, t),
                    )
                if cur.rowcount == 1:
                    return self.get_patch(patch_id)
            # lost the race; try the next candidate
        return None

    def release(self, patch_id: str) -> None:
        with self._txn("release") as conn:
            conn.execute(
                "UPDATE patches SET lease_until = NULL WHERE patch_id = ?",
                (patch_id,),
            )

    def note_error(self, patch_id: str, message: str) -> None:
        """Record a processing error without changing status.

        The lease is left in place so the current run moves on to other
        patches; the row becomes claimable again once the lease expires (or
        after an explicit release).
        """
        with self._txn("error_note") as conn:
            conn.execute(
                "UPDATE patches SET error = ? WHERE patch_id = ?",
                (message, patch_id),
            )

    # -- stage transitions ------------------------------------------------

    def _guarded_status(
        self,
        conn: sqlite3.Connection,
        patch_id: str,
        from_status: str,
        to_status: str,
        extra_sql: str = "",
        extra_args: tuple = (),
    ) -> None:
        cur = conn.execute(
            f"UPDATE patches SET status = ?, error = NULL, lease_until = NULL"
            f"{extra_sql} WHERE patch_id = ? AND status = ?",
            (to_status, *extra_args, patch_id, from_status),
        )
        if cur.rowcount != 1:
            raise TransitionError(
                f"{patch_id}: expected status {from_status} for move to {to_status}"
            )

    def finish_fetch(self, patch_id: str, elements_json: str, fetched_at: str) -> None:
        with self._txn("fetch_done") as conn:
            conn.execute(
                "INSERT OR REPLACE INTO osm_cache"
                " (patch_id, elements_json, fetched_at) VALUES (?, ?, ?)",
                (patch_id, elements_json, fetched_at),
            )
            self._guarded_status(conn, patch_id, STATUS_NEW, STATUS_OSM_FETCHED)

    def load_cached_elements(self, patch_id: str) -> Optional[tuple[str, str]]:
        row = self._conn.execute(
            "SELECT elements_json, fetched_at FROM osm_cache WHERE patch_id = ?",
            (patch_id,),
        ).fetchone()
        if row is None:
            return None
        return row["elements_json"], row["fetched_at"]

    def mark_unusable(self, patch_id: str) -> None:
        with self._txn("unusable") as conn:
            self._guarded_status(
                conn, patch_id, STATUS_OSM_FETCHED, STATUS_UNUSABLE
            )

    def finish_caption(
        self,
        patch_id: str,
        task: str,
        selected_kind: str,
        selected_id: int,
        selected_tags: dict,
        text: str,
    ) -> str:
        """Store the raw caption (seq 0) and move the patch to CAPTIONED."""
        caption_id = caption_id_for(patch_id, 0)
        with self._txn("caption_done") as conn:
            conn.execute(
                "INSERT INTO captions"
                " (caption_id, patch_id, seq, task, revision_of, state, text)"
                " VALUES (?, ?, 0, ?, NULL, ?, ?)",
                (caption_id, patch_id, task, STATE_RAW, text),
            )
            self._guarded_status(
                conn,
                patch_id,
                STATUS_OSM_FETCHED,
                STATUS_CAPTIONED,
                extra_sql=(
                    ", task = ?, selected_kind = ?, selected_id = ?,"
                    " selected_tags_json = ?"
                ),
                extra_args=(
                    task,
                    selected_kind,
                    selected_id,
                    json.dumps(selected_tags, sort_keys=True),
                ),
            )
        return caption_id

    def set_target(self, patch_id: str, target: int) -> None:
        with self._txn("target_set") as conn:
            conn.execute(
                "UPDATE patches SET target_count = ? WHERE patch_id = ?",
                (target, patch_id),
            )

    def add_revision(self, patch_id: str, text: str, revision_of: str) -> str:
        """Append one task3 revision as a raw caption; returns its id."""
        with self._txn("revision_added") as conn:
            row = conn.execute(
                "SELECT COALESCE(MAX(seq), -1) + 1 AS next FROM captions"
                " WHERE patch_id = ?",
                (patch_id,),
            ).fetchone()
            seq = row["next"]
            caption_id = caption_id_for(patch_id, seq)
            conn.execute(
                "INSERT INTO captions"
                " (caption_id, patch_id, seq, task, revision_of, state, text)"
                " VALUES (?, ?, ?, 'task3', ?, ?, ?)",
                (caption_id, patch_id, seq, revision_of, STATE_RAW, text),
            )
        return caption_id

    def apply_refine(
        self,
        patch_id: str,
        updates: list[tuple[str, str, Optional[str], Optional[str]]],
        done: bool,
    ) -> None:
        """Apply refine outcomes and either promote to DONE or stay put.

        `updates` holds (caption_id, state, text, reason) tuples. A patch
        that cannot be promoted keeps status CAPTIONED (and its lease, so
        the running pass visits it only once); a later augment pass tops
        its caption set back up.
        """
        with self._txn("refine_done") as conn:
            for caption_id, state, text, reason in updates:
                conn.execute(
                    "UPDATE captions SET state = ?, text = ?, reason = ?"
                    " WHERE caption_id = ?",
                    (state, text, reason, caption_id),
                )
            if done:
                self._guarded_status(conn, patch_id, STATUS_CAPTIONED, STATUS_DONE)

    # -- caption reads ---------------------------------------------------

    def _row_to_caption(self, row: sqlite3.Row) -> CaptionRow:
        return CaptionRow(
            caption_id=row["caption_id"],
            patch_id=row["patch_id"],
            seq=row["seq"],
            task=row["task"],
            revision_of=row["revision_of"],
            state=row["state"],
            text=row["text"],
            reason=row["reason"],
        )

    def captions_for(
        self, patch_id: str, include_deleted: bool = True
    ) -> list[CaptionRow]:
        sql = "SELECT * FROM captions WHERE patch_id = ?"
        if not include_deleted:
            sql += " AND state != 'deleted'"
        sql += " ORDER BY seq"
        rows = self._conn.execute(sql, (patch_id,)).fetchall()
        return [self._row_to_caption(r) for r in rows]

    def live_caption_count(self, patch_id: str) -> int:
        row = self._conn.execute(
            "SELECT COUNT(*) AS n FROM captions"
            " WHERE patch_id = ? AND state != 'deleted'",
            (patch_id,),
        ).fetchone()
        return row["n"]

    # -- corpus statistics interface --------------------------------------

    def done_patch_ids(self) -> list[str]:
        return self.patch_ids_by_status(STATUS_DONE)

    def refined_captions_for(self, patch_id: str) -> list[tuple[str, str, str]]:
        rows = self._conn.execute(
            "SELECT caption_id, task, text FROM captions"
            " WHERE patch_id = ? AND state = 'refined' ORDER BY seq",
            (patch_id,),
        ).fetchall()
        return [(r["caption_id"], r["task"], r["text"]) for r in rows]

    def selected_tags_for(self, patch_id: str) -> dict:
        row = self._conn.execute(
            "SELECT selected_tags_json FROM patches WHERE patch_id = ?",
            (patch_id,),
        ).fetchone()
        if row is None or row["selected_tags_json"] is None:
            return {}
        return json.loads(row["selected_tags_json"])
