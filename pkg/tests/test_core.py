"""Domain types: box/range validation, cropping, metadata checks, and the
JSON interchange round-trips."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomapqa.core import (
    ALL_TASKS,
    AnswerValue,
    BBox,
    BenchItem,
    Choice,
    Component,
    LegendUnit,
    LonLatRange,
    MapMetadata,
    TASK_ABILITY,
    TASK_QTYPE,
    answer_to_text,
    crop,
    validate_metadata,
)


def make_image(width: int = 100, height: int = 100) -> np.ndarray:
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def minimal_metadata(width: int = 200, height: int = 200) -> MapMetadata:
    legend_box = BBox(120, 20, 190, 120)
    return MapMetadata(
        sheet_name="Test Quadrangle",
        scale="1:24000",
        lonlat=LonLatRange(-105.0, -104.5, 37.0, 37.5),
        neighbors=("North Sheet", "South Sheet"),
        components=(
            Component("title", BBox(10, 2, 100, 12)),
            Component("legend", legend_box),
            Component("main_map", BBox(10, 20, 110, 120)),
        ),
        legend_units=(
            LegendUnit(BBox(150, 30, 185, 40), BBox(125, 30, 145, 40), "Gray limestone", (93, 28, 28)),
        ),
        rock_areas={"Gray limestone": 0.6, "Red shale": 0.4},
        fault_grid=tuple(tuple(v == 1 for v in row) for row in ((1, 0, 0), (0, 0, 0), (0, 0, 1))),
        language="English",
    )


class TestBBox:
    def test_task_registry_is_complete(self):
        assert len(ALL_TASKS) == 25
        assert set(TASK_ABILITY) == set(ALL_TASKS) == set(TASK_QTYPE)

    def test_valid_box(self):
        assert BBox(0, 0, 10, 10).violations() == []

    def test_degenerate_box_named(self):
        bad = BBox(5, 0, 5, 10).violations("components[0].bbox")
        assert len(bad) == 1 and "components[0].bbox" in bad[0] and "x_min" in bad[0]

    def test_negative_coordinates(self):
        assert any(">= 0" in v for v in BBox(-1, 0, 5, 5).violations())


class TestCrop:
    def test_identity_crop(self):
        image = make_image()
        out = crop(image, BBox(0, 0, 100, 100))
        assert np.array_equal(out, image)

    def test_dimension_arithmetic(self):
        out = crop(make_image(), BBox(10, 20, 30, 50))
        assert out.shape == (30, 20, 3)

    def test_origin_alignment(self):
        image = make_image()
        out = crop(image, BBox(10, 20, 30, 50))
        assert np.array_equal(out[0, 0], image[20, 10])

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError, match="x_min"):
            crop(make_image(), BBox(0, 0, 0, 10))

    def test_out_of_bounds_names_edge(self):
        with pytest.raises(ValueError, match="x_max"):
            crop(make_image(), BBox(0, 0, 101, 10))
        with pytest.raises(ValueError, match="y_max"):
            crop(make_image(), BBox(0, 0, 10, 101))

    @given(
        x0=st.integers(0, 40), y0=st.integers(0, 40),
        w=st.integers(1, 40), h=st.integers(1, 40),
    )
    @settings(max_examples=50, deadline=None)
    def test_idempotent_under_identity(self, x0, y0, w, h):
        image = make_image()
        box = BBox(x0, y0, x0 + w, y0 + h)
        first = crop(image, box)
        again = crop(first, BBox(0, 0, w, h))
        assert np.array_equal(first, again)

    @given(
        x0=st.integers(0, 30), y0=st.integers(0, 30),
        w=st.integers(5, 40), h=st.integers(5, 40),
        ix=st.integers(0, 4), iy=st.integers(0, 4),
    )
    @settings(max_examples=50, deadline=None)
    def test_nested_crop_composition(self, x0, y0, w, h, ix, iy):
        image = make_image()
        outer = BBox(x0, y0, x0 + w, y0 + h)
        ix, iy = min(ix, w - 3), min(iy, h - 3)
        inner = BBox(ix, iy, ix + 3, iy + 3)
        composed = crop(crop(image, outer), inner)
        direct = crop(image, inner.translated(x0, y0))
        assert np.array_equal(composed, direct)


class TestValidateMetadata:
    def test_well_formed(self):
        assert validate_metadata(minimal_metadata(), (200, 200)) == []

    def test_rock_area_sum_violation(self):
        meta = minimal_metadata()
        # independent sum oracle over the fixture's fractions
        fractions = {"a": 0.5, "b": 0.5, "c": 0.3}
        assert sum(fractions.values()) == pytest.approx(1.3)
        bad_meta = MapMetadata(
            sheet_name=meta.sheet_name,
            scale=meta.scale,
            lonlat=meta.lonlat,
            neighbors=meta.neighbors,
            components=meta.components,
            legend_units=meta.legend_units,
            rock_areas=fractions,
            fault_grid=meta.fault_grid,
            language=meta.language,
        )
        violations = validate_metadata(bad_meta, (200, 200))
        assert len(violations) == 1 and "rock_areas" in violations[0]

    def test_degenerate_bbox_named_in_report(self):
        meta = minimal_metadata()
        bad_meta = MapMetadata(
            components=(Component("title", BBox(10, 5, 10, 12)),),
        )
        violations = validate_metadata(bad_meta, (200, 200))
        assert any("components[0] (title).bbox" in v and "x_min" in v for v in violations)

    def test_bbox_exceeding_image(self):
        bad_meta = MapMetadata(components=(Component("title", BBox(10, 5, 300, 12)),))
        assert any("exceeds image bounds" in v for v in validate_metadata(bad_meta, (200, 200)))

    def test_duplicate_named_component(self):
        bad_meta = MapMetadata(
            components=(
                Component("title", BBox(0, 0, 10, 10)),
                Component("title", BBox(20, 0, 30, 10)),
            )
        )
        assert any("at most one" in v for v in validate_metadata(bad_meta, (200, 200)))

    def test_fault_grid_shape(self):
        bad_meta = MapMetadata(fault_grid=((True, False), (False, True)))
        assert any("3x3" in v for v in validate_metadata(bad_meta, (200, 200)))

    def test_non_canonical_scale(self):
        bad_meta = MapMetadata(scale="1:24,000")
        assert any("canonical" in v for v in validate_metadata(bad_meta, (200, 200)))


class TestSerialization:
    def test_metadata_round_trip(self):
        meta = minimal_metadata()
        assert MapMetadata.from_dict(meta.to_dict()) == meta

    def test_bench_item_round_trip(self):
        item = BenchItem(
            id="m:rock_by_color:000",
            map_id="m",
            ability="referring",
            task="rock_by_color",
            qtype="MCQ",
            question_text="Which rock?",
            choices=(Choice("A", "a"), Choice("B", "b"), Choice("C", "c"), Choice("D", "d")),
            ground_truth=AnswerValue.choice("B"),
        )
        assert BenchItem.from_dict(item.to_dict()) == item
        assert item.violations() == []

    def test_answer_value_round_trips(self):
        values = [
            AnswerValue.choice("C"),
            AnswerValue.text("1:24000"),
            AnswerValue.bbox(BBox(1, 2, 3, 4)),
            AnswerValue.names(["b", "a", "a"]),
            AnswerValue.lonlat(LonLatRange(-105, -104, 37, 38)),
            AnswerValue.essay("long text"),
        ]
        for value in values:
            assert AnswerValue.from_dict(value.to_dict()) == value

    def test_name_set_canonicalized(self):
        assert AnswerValue.names(["b", "a", "b"]).value == ("a", "b")

    def test_answer_to_text_shapes(self):
        assert answer_to_text(AnswerValue.bbox(BBox(1, 2, 3, 4))) == "[1, 2, 3, 4]"
        assert answer_to_text(AnswerValue.names(["b", "a"])) == "a, b"
        assert answer_to_text(AnswerValue.choice("D")) == "D"

    def test_mcq_invariants_flagged(self):
        item = BenchItem(
            id="x", map_id="m", ability="referring", task="rock_by_color", qtype="MCQ",
            question_text="q",
            choices=(Choice("A", "a"), Choice("B", "b")),
            ground_truth=AnswerValue.choice("A"),
        )
        assert any("exactly 4 choices" in v for v in item.violations())
