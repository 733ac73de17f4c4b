"""Prompt assembly tests: placeholder filling, the cropped-sentence rule,
example sampling statistics, and template hygiene."""

import json
import random
import re
from collections import Counter

import pytest

from patchscribe.geometry import AreaAttributes, NonAreaAttributes
from patchscribe.prompts import (
    CROPPED_SENTENCE,
    EmptyCaption,
    MetaExampleError,
    MissingPlaceholder,
    assemble_task1,
    assemble_task2,
    assemble_task3,
    load_meta_examples,
    load_template,
    render,
    sample_task3_examples,
)

UNRESOLVED = re.compile(r"\{[a-z][a-z0-9_]*\}")


def area_attrs(cropped=False):
    return AreaAttributes(
        coarse_location="center",
        shape="square",
        normalized_size=0.3,
        simplified_geometry="{[(0.000, 0.500), (0.120, 0.400), (0.000, 0.500)]}",
        is_cropped=cropped,
    )


def nonarea_attrs(cropped=False):
    return NonAreaAttributes(
        endpoint_locations=("center-bottom", "center-top"),
        sinuosity="straight",
        normalized_length=1.004,
        length_m=270,
        orientation="S_N",
        simplified_geometry="{[(0.500, 0.000), (0.500, 1.000)]}",
        is_cropped=cropped,
    )


class TestRender:
    def test_basic_fill(self):
        assert render("a {x} c", {"x": "b"}) == "a b c"

    def test_missing_placeholder(self):
        with pytest.raises(MissingPlaceholder) as exc:
            render("a {x} {y}", {"x": "b"})
        assert "y" in str(exc.value)

    def test_braces_in_values_not_rescanned(self):
        out = render("geom: {g}", {"g": "{[(0.000, 0.500)]}"})
        assert out == "geom: {[(0.000, 0.500)]}"
        assert not UNRESOLVED.search(out)

    def test_unused_values_allowed(self):
        assert render("{a}", {"a": "1", "b": "2"}) == "1"


class TestTask1:
    def test_cropped_true_inserts_exact_sentence(self):
        out = assemble_task1(area_attrs(cropped=True), ["landuse: farmland."])
        assert CROPPED_SENTENCE in out
        assert "Some parts of the geometry extended out of this ROI." in out

    def test_cropped_false_omits_sentence(self):
        out = assemble_task1(area_attrs(cropped=False), [])
        assert "extended out of this ROI" not in out

    def test_attribute_literals_appear(self):
        out = assemble_task1(area_attrs(), [])
        task_block = out[out.rindex("###Task###"):]
        assert "center" in task_block
        assert "square" in task_block
        assert "0.300" in task_block
        assert "{[(0.000, 0.500), (0.120, 0.400), (0.000, 0.500)]}" in task_block

    def test_tag_interpretations_joined_by_newlines(self):
        out = assemble_task1(area_attrs(), ["first tag.", "second tag."])
        assert "first tag.\nsecond tag." in out

    def test_structure_sections_present(self):
        out = assemble_task1(area_attrs(), [])
        assert "###Instruction###" in out
        assert "###Captioning Objective###" in out
        assert out.rstrip().endswith("Caption:")

    def test_uncertainty_directive_present(self):
        out = assemble_task1(area_attrs(), [])
        assert "uncertainty" in out
        assert '"possible"' in out and '"may"' in out

    def test_no_unresolved_placeholders(self):
        out = assemble_task1(area_attrs(cropped=True), ["x: y."])
        assert not UNRESOLVED.search(out)

    def test_deterministic(self):
        a = assemble_task1(area_attrs(), ["x: y."])
        b = assemble_task1(area_attrs(), ["x: y."])
        assert a == b


class TestTask2:
    def test_orientation_and_length_literals(self):
        out = assemble_task2(nonarea_attrs(), [])
        task_block = out[out.rindex("###Task###"):]
        assert "S_N" in task_block
        assert "270 meters" in task_block
        assert "1.004" in task_block
        assert "center-bottom to center-top" in task_block

    def test_empty_tag_section_valid(self):
        out = assemble_task2(nonarea_attrs(), [])
        assert not UNRESOLVED.search(out)
        assert out.rstrip().endswith("Caption:")

    def test_cropped_rule_shared_with_task1(self):
        out = assemble_task2(nonarea_attrs(cropped=True), [])
        assert CROPPED_SENTENCE in out
        out2 = assemble_task2(nonarea_attrs(cropped=False), [])
        assert CROPPED_SENTENCE not in out2

    def test_one_shot_example_present(self):
        assert "###Example###" in assemble_task2(nonarea_attrs(), [])


class TestMetaExamples:
    def test_shipped_asset_is_5x5_per_task(self):
        meta = load_meta_examples()
        for task in ("task1", "task2"):
            examples = meta.for_task(task)
            assert len(examples) == 5
            for ex in examples:
                assert len(ex.revisions) == 5
                assert ex.raw.strip()

    def test_wrong_revision_count_rejected(self, tmp_path):
        p = tmp_path / "meta.jsonl"
        rec = {"task": "task1", "raw": "r", "revisions": ["a", "b", "c", "d"]}
        p.write_text(json.dumps(rec) + "\n", encoding="utf-8")
        with pytest.raises(MetaExampleError):
            load_meta_examples(p)

    def test_wrong_raw_count_rejected(self, tmp_path):
        p = tmp_path / "meta.jsonl"
        rec = {"task": "task1", "raw": "r", "revisions": list("abcde")}
        lines = [json.dumps(rec)] * 4
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(MetaExampleError) as exc:
            load_meta_examples(p)
        assert "task1" in str(exc.value)

    def test_invalid_json_line_reported(self, tmp_path):
        p = tmp_path / "meta.jsonl"
        p.write_text("not json\n", encoding="utf-8")
        with pytest.raises(MetaExampleError) as exc:
            load_meta_examples(p)
        assert "line 1" in str(exc.value)


class TestSampling:
    def test_structure_every_raw_once(self):
        meta = load_meta_examples()
        pairs = sample_task3_examples(meta, "task1", random.Random(1))
        assert len(pairs) == 5
        raws = {p[0] for p in pairs}
        assert raws == {ex.raw for ex in meta.task1}
        for raw, rev in pairs:
            owner = next(ex for ex in meta.task1 if ex.raw == raw)
            assert rev in owner.revisions

    def test_seed_determinism(self):
        meta = load_meta_examples()
        a = sample_task3_examples(meta, "task2", random.Random(42))
        b = sample_task3_examples(meta, "task2", random.Random(42))
        assert a == b

    def test_revision_choice_uniform_over_seeds(self):
        meta = load_meta_examples()
        raw0 = meta.task1[0]
        counts = Counter()
        n = 10_000
        for seed in range(n):
            pairs = sample_task3_examples(meta, "task1", random.Random(seed))
            rev = next(r for raw, r in pairs if raw == raw0.raw)
            counts[raw0.revisions.index(rev)] += 1
        for idx in range(5):
            assert abs(counts[idx] / n - 0.2) <= 0.02, counts

    def test_order_is_shuffled(self):
        meta = load_meta_examples()
        orders = {
            tuple(raw for raw, _ in sample_task3_examples(meta, "task1", random.Random(s)))
            for s in range(30)
        }
        assert len(orders) > 1


class TestTask3:
    def pairs(self):
        meta = load_meta_examples()
        return sample_task3_examples(meta, "task1", random.Random(0))

    def test_caption_appears_exactly_once_in_input_slot(self):
        caption = "A unique caption body that appears nowhere else."
        out = assemble_task3(caption, self.pairs())
        assert out.count(caption) == 1
        assert f"Raw: {caption}" in out

    def test_contains_exactly_five_example_pairs(self):
        out = assemble_task3("Some caption.", self.pairs())
        assert out.count("Revision:") == 6  # 5 examples + 1 open slot
        assert out.count("Raw:") == 6

    def test_whitespace_caption_rejected(self):
        with pytest.raises(EmptyCaption):
            assemble_task3("   \n", self.pairs())

    def test_wrong_example_count_rejected(self):
        with pytest.raises(ValueError):
            assemble_task3("ok", self.pairs()[:3])

    def test_ends_with_open_revision_slot(self):
        out = assemble_task3("Some caption.", self.pairs())
        assert out.rstrip().endswith("Revision:")

    def test_no_unresolved_placeholders(self):
        out = assemble_task3("Some caption.", self.pairs())
        assert not UNRESOLVED.search(out)


class TestTemplates:
    def test_all_templates_load(self):
        for task in ("task1", "task2", "task3"):
            assert "###Instruction###" in load_template(task)

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            load_template("task9")
