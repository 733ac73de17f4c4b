from datetime import datetime, timezone

import pytest

from patchscribe.geometry import PatchFrame
from patchscribe.osm import GeoBBox
from patchscribe.store import (
    STATE_DELETED,
    STATE_RAW,
    STATE_REFINED,
    STATUS_CAPTIONED,
    STATUS_DONE,
    STATUS_NEW,
    STATUS_OSM_FETCHED,
    STATUS_UNUSABLE,
    FaultInjected,
    PipelineStore,
    TransitionError,
    caption_id_for,
)

T0 = datetime(2021, 8, 3, 10, 0, tzinfo=timezone.utc)
FRAME = PatchFrame.from_pixels(448, 448, 0.6, T0)
BBOX = GeoBBox(10.0, 50.0, 10.004, 50.004)


@pytest.fixture
def store(tmp_path):
    s = PipelineStore(tmp_path / "s.db")
    yield s
    s.close()


def add(store, pid="p000"):
    assert store.add_patch(pid, FRAME, BBOX, f"{pid}.jpg")
    return pid


def to_captioned(store, pid, text="A forest covers the patch."):
    store.finish_fetch(pid, "[]", T0.isoformat())
    store.finish_caption(pid, "task1", "way", 7, {"landuse": "forest"}, text)


class TestRegistration:
    def test_add_and_reread(self, store):
        add(store)
        patch = store.get_patch("p000")
        assert patch.status == STATUS_NEW
        assert patch.frame.ground_area_m2 == pytest.approx(72253.44)
        assert patch.geo_bbox == BBOX
        assert patch.image_ref == "p000.jpg"
        assert patch.task is None and patch.target_count is None

    def test_add_is_idempotent(self, store):
        add(store)
        assert store.add_patch("p000", FRAME, BBOX, "p000.jpg") is False
        assert store.status_counts() == {STATUS_NEW: 1}

    def test_missing_patch(self, store):
        assert store.get_patch("nope") is None

    def test_reopen_preserves_state(self, tmp_path):
        s1 = PipelineStore(tmp_path / "s.db")
        s1.add_patch("p000", FRAME, BBOX, "p000.jpg")
        s1.finish_fetch("p000", "[]", T0.isoformat())
        s1.close()
        s2 = PipelineStore(tmp_path / "s.db")
        assert s2.get_patch("p000").status == STATUS_OSM_FETCHED
        assert s2.load_cached_elements("p000") == ("[]", T0.isoformat())
        s2.close()


class TestClaims:
    def test_claim_respects_status(self, store):
        add(store)
        assert store.claim(STATUS_CAPTIONED) is None
        claimed = store.claim(STATUS_NEW)
        assert claimed.patch_id == "p000"

    def test_claim_excludes_leased(self, store):
        add(store)
        assert store.claim(STATUS_NEW, lease_s=10, now=100.0) is not None
        assert store.claim(STATUS_NEW, lease_s=10, now=105.0) is None

    def test_expired_lease_is_reclaimable(self, store):
        add(store)
        store.claim(STATUS_NEW, lease_s=10, now=100.0)
        reclaimed = store.claim(STATUS_NEW, lease_s=10, now=110.0)
        assert reclaimed is not None and reclaimed.patch_id == "p000"

    def test_two_claims_get_distinct_patches(self, store):
        add(store, "p000")
        add(store, "p001")
        a = store.claim(STATUS_NEW, lease_s=60, now=0.0)
        b = store.claim(STATUS_NEW, lease_s=60, now=0.0)
        assert {a.patch_id, b.patch_id} == {"p000", "p001"}
        assert store.claim(STATUS_NEW, lease_s=60, now=0.0) is None

    def test_release_clears_lease(self, store):
        add(store)
        store.claim(STATUS_NEW, lease_s=1000, now=0.0)
        store.release("p000")
        assert store.claim(STATUS_NEW, lease_s=10, now=1.0) is not None

    def test_claim_order_is_by_patch_id(self, store):
        for pid in ("p002", "p000", "p001"):
            add(store, pid)
        assert store.claim(STATUS_NEW, now=0.0).patch_id == "p000"
        assert store.claim(STATUS_NEW, now=0.0).patch_id == "p001"

    def test_injected_clock(self, tmp_path):
        s = PipelineStore(tmp_path / "c.db", clock=lambda: 1_000_000.0)
        s.add_patch("p000", FRAME, BBOX, "p000.jpg")
        s.claim(STATUS_NEW, lease_s=10, now=0.0)
        # default now comes from the injected clock, far past the lease
        assert s.claim(STATUS_NEW, lease_s=10) is not None
        s.close()


class TestTransitions:
    def test_fetch_then_caption_then_done(self, store):
        pid = add(store)
        store.finish_fetch(pid, '[{"x": 1}]', T0.isoformat())
        assert store.get_patch(pid).status == STATUS_OSM_FETCHED
        assert store.load_cached_elements(pid)[0] == '[{"x": 1}]'
        store.finish_caption(pid, "task1", "way", 7, {"landuse": "forest"}, "A wood.")
        patch = store.get_patch(pid)
        assert patch.status == STATUS_CAPTIONED
        assert patch.task == "task1"
        assert patch.selected_kind == "way" and patch.selected_id == 7
        assert patch.selected_tags == {"landuse": "forest"}
        store.apply_refine(
            pid, [(caption_id_for(pid, 0), STATE_REFINED, "A wood.", "clean")], True
        )
        assert store.get_patch(pid).status == STATUS_DONE

    def test_unusable_branch(self, store):
        pid = add(store)
        store.finish_fetch(pid, "[]", T0.isoformat())
        store.mark_unusable(pid)
        assert store.get_patch(pid).status == STATUS_UNUSABLE

    def test_guarded_transition_rejects_wrong_status(self, store):
        pid = add(store)
        with pytest.raises(TransitionError):
            store.mark_unusable(pid)  # still NEW
        with pytest.raises(TransitionError):
            store.finish_caption(pid, "task1", "way", 1, {}, "text")

    def test_double_fetch_rejected(self, store):
        pid = add(store)
        store.finish_fetch(pid, "[]", T0.isoformat())
        with pytest.raises(TransitionError):
            store.finish_fetch(pid, "[]", T0.isoformat())

    def test_error_note_keeps_status_and_lease(self, store):
        pid = add(store)
        store.claim(STATUS_NEW, lease_s=1000, now=0.0)
        store.note_error(pid, "boom")
        patch = store.get_patch(pid)
        assert patch.status == STATUS_NEW
        assert patch.error == "boom"
        assert patch.lease_until == 1000.0
        # error clears once the patch finally moves on
        store.finish_fetch(pid, "[]", T0.isoformat())
        assert store.get_patch(pid).error is None


class TestCaptions:
    def test_raw_caption_is_seq_zero(self, store):
        pid = add(store)
        to_captioned(store, pid)
        rows = store.captions_for(pid)
        assert len(rows) == 1
        assert rows[0].caption_id == "p000/c000"
        assert rows[0].seq == 0
        assert rows[0].task == "task1"
        assert rows[0].revision_of is None
        assert rows[0].state == STATE_RAW

    def test_revisions_get_sequential_ids(self, store):
        pid = add(store)
        to_captioned(store, pid)
        first = store.add_revision(pid, "Rewrite one.", "p000/c000")
        second = store.add_revision(pid, "Rewrite two.", "p000/c000")
        assert (first, second) == ("p000/c001", "p000/c002")
        rows = store.captions_for(pid)
        assert [r.seq for r in rows] == [0, 1, 2]
        assert all(r.task == "task3" for r in rows[1:])
        assert all(r.revision_of == "p000/c000" for r in rows[1:])

    def test_live_count_ignores_deleted(self, store):
        pid = add(store)
        to_captioned(store, pid)
        store.add_revision(pid, "Rewrite.", "p000/c000")
        assert store.live_caption_count(pid) == 2
        store.apply_refine(
            pid, [("p000/c001", STATE_DELETED, "Rewrite.", "duplicate")], False
        )
        assert store.live_caption_count(pid) == 1
        assert store.get_patch(pid).status == STATUS_CAPTIONED

    def test_caption_id_format(self):
        assert caption_id_for("p007", 0) == "p007/c000"
        assert caption_id_for("p007", 12) == "p007/c012"

    def test_target_count_persists(self, store):
        pid = add(store)
        to_captioned(store, pid)
        store.set_target(pid, 4)
        assert store.get_patch(pid).target_count == 4


class TestStatsSource:
    def test_done_ids_sorted_and_refined_rows(self, store):
        for pid in ("p001", "p000"):
            add(store, pid)
            to_captioned(store, pid, f"Caption for {pid}.")
            store.add_revision(pid, f"Rewrite for {pid}.", f"{pid}/c000")
            store.apply_refine(
                pid,
                [
                    (f"{pid}/c000", STATE_REFINED, f"Caption for {pid}.", "clean"),
                    (f"{pid}/c001", STATE_REFINED, f"Rewrite for {pid}.", "clean"),
                ],
                True,
            )
        assert store.done_patch_ids() == ["p000", "p001"]
        rows = store.refined_captions_for("p000")
        assert rows == [
            ("p000/c000", "task1", "Caption for p000."),
            ("p000/c001", "task3", "Rewrite for p000."),
        ]
        assert store.selected_tags_for("p000") == {"landuse": "forest"}

    def test_refined_rows_exclude_deleted_and_raw(self, store):
        pid = add(store)
        to_captioned(store, pid)
        store.add_revision(pid, "Rewrite.", "p000/c000")
        store.add_revision(pid, "Another.", "p000/c000")
        store.apply_refine(
            pid,
            [
                ("p000/c000", STATE_REFINED, "A forest covers the patch.", "clean"),
                ("p000/c001", STATE_DELETED, "Rewrite.", "duplicate"),
            ],
            False,
        )
        ids = [cid for cid, _, _ in store.refined_captions_for(pid)]
        assert ids == ["p000/c000"]  # c002 still raw, c001 deleted

    def test_selected_tags_empty_before_caption(self, store):
        pid = add(store)
        assert store.selected_tags_for(pid) == {}
        assert store.selected_tags_for("ghost") == {}


class TestFaultHook:
    def test_pre_fault_rolls_back_whole_step(self, tmp_path):
        def bomb(event):
            if event == "caption_done:pre":
                raise FaultInjected(event)

        s = PipelineStore(tmp_path / "f.db", fault_hook=bomb)
        s.add_patch("p000", FRAME, BBOX, "p000.jpg")
        s.finish_fetch("p000", "[]", T0.isoformat())
        with pytest.raises(FaultInjected):
            s.finish_caption("p000", "task1", "way", 1, {}, "A wood.")
        # the caption insert and the status change both vanished
        assert s.get_patch("p000").status == STATUS_OSM_FETCHED
        assert s.captions_for("p000") == []
        s.fault_hook = None
        s.finish_caption("p000", "task1", "way", 1, {}, "A wood.")
        assert s.get_patch("p000").status == STATUS_CAPTIONED
        s.close()

    def test_post_fault_leaves_commit_in_place(self, tmp_path):
        def bomb(event):
            if event == "fetch_done:post":
                raise FaultInjected(event)

        s = PipelineStore(tmp_path / "f.db", fault_hook=bomb)
        s.add_patch("p000", FRAME, BBOX, "p000.jpg")
        with pytest.raises(FaultInjected):
            s.finish_fetch("p000", "[]", T0.isoformat())
        assert s.get_patch("p000").status == STATUS_OSM_FETCHED
        s.close()

    def test_events_fire_in_pairs(self, tmp_path):
        events = []
        s = PipelineStore(tmp_path / "f.db", fault_hook=events.append)
        s.add_patch("p000", FRAME, BBOX, "p000.jpg")
        s.finish_fetch("p000", "[]", T0.isoformat())
        assert events == [
            "register:pre",
            "register:post",
            "fetch_done:pre",
            "fetch_done:post",
        ]
        s.close()
