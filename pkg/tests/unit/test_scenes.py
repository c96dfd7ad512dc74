"""Unit tests for scene sampling, importance labelling and rendering."""

from collections import Counter

import numpy as np
import pytest

from druformer.exceptions import SceneSamplingError
from druformer.geometry import BoxCxCyWh, iou, to_xyxy
from druformer.rng import make_rng
from druformer.scenes import (
    PALETTE,
    GeneratorConfig,
    Participant,
    SceneSpec,
    annotate,
    ego_lane,
    importance_rule,
    point_in_polygon,
    render,
    render_uint8,
    sample_scene,
)


def _road_scene(*participants: Participant, layout: str = "wide-road", intention: str = "go-straight") -> SceneSpec:
    return SceneSpec(0, layout, ego_lane(layout), list(participants), intention)


def _pedestrian(cx: float, cy: float) -> Participant:
    return Participant("pedestrian", BoxCxCyWh(cx, cy, 0.04, 0.06))


def _vehicle(cx: float, cy: float) -> Participant:
    return Participant("vehicle", BoxCxCyWh(cx, cy, 0.1, 0.1))


def _red_signal(governs: str = "straight", state: str = "red") -> Participant:
    return Participant("signal", BoxCxCyWh(0.76, 0.15, 0.04, 0.08), state, governs)


class TestImportanceRule:
    """Tests for the labelling cascade."""

    def test_in_lane_pedestrian_chosen(self) -> None:
        """Test that the pedestrian inside the ego lane is important."""
        spec = _road_scene(_pedestrian(0.75, 0.6), _pedestrian(0.5, 0.6))
        assert importance_rule(spec) == 1

    def test_intention_selects_branch(self, fork_scene: SceneSpec) -> None:
        """Test that the turning direction decides which pedestrian matters."""
        assert importance_rule(fork_scene, "turn-left") == 0
        assert importance_rule(fork_scene, "go-straight") == 1
        assert importance_rule(fork_scene, "turn-right") is None
        assert importance_rule(fork_scene, "stop") is None

    def test_annotate_marks_ambiguity(self, fork_scene: SceneSpec) -> None:
        """Test that annotate labels the scene and flags intention dependence."""
        annotated = annotate(fork_scene)
        assert annotated.important_idx == 0
        assert annotated.intention_ambiguous
        assert annotate(annotated).important_idx == 0

    def test_empty_scene(self) -> None:
        """Test that a scene without participants has no important object."""
        assert importance_rule(_road_scene()) is None

    def test_pedestrian_beats_closer_vehicle(self) -> None:
        """Test that an in-lane pedestrian outranks an in-lane vehicle."""
        spec = _road_scene(_vehicle(0.5, 0.7), _pedestrian(0.5, 0.3))
        assert importance_rule(spec) == 1

    def test_nearest_vehicle_in_lane(self) -> None:
        """Test that the nearest in-lane vehicle is chosen when no pedestrian is in the way."""
        spec = _road_scene(_vehicle(0.5, 0.4), _vehicle(0.5, 0.7), _pedestrian(0.2, 0.5))
        assert importance_rule(spec) == 1

    def test_red_signal_without_vehicle(self) -> None:
        """Test that a red signal on the intended branch is important."""
        spec = _road_scene(_red_signal(), layout="intersection")
        assert importance_rule(spec) == 0
        assert importance_rule(spec, "turn-left") is None

    def test_green_signal_ignored(self) -> None:
        """Test that green signals are never important."""
        assert importance_rule(_road_scene(_red_signal(state="green"), layout="intersection")) is None

    def test_signal_distance_threshold(self) -> None:
        """Test that a near vehicle outranks a red signal and a far one does not."""
        near = _road_scene(_red_signal(), _vehicle(0.5, 0.7), layout="intersection")
        far = _road_scene(_red_signal(), _vehicle(0.5, 0.1), layout="intersection")
        assert importance_rule(near) == 1
        assert importance_rule(far) == 0

    def test_intention_ignored_off_intersections(self) -> None:
        """Test that roads without junctions label the same for every intention."""
        spec = _road_scene(_vehicle(0.5, 0.5))
        assert {importance_rule(spec, name) for name in ("go-straight", "turn-left", "stop")} == {0}
        assert not annotate(spec).intention_ambiguous

    def test_point_in_polygon(self) -> None:
        """Test the ray-casting containment test on a unit square."""
        square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        assert point_in_polygon((0.5, 0.5), square)
        assert not point_in_polygon((1.5, 0.5), square)


class TestSampling:
    """Tests for the procedural generator."""

    def test_deterministic(self) -> None:
        """Test that equal seeds produce identical scenes."""
        config = GeneratorConfig()
        first = sample_scene(make_rng(5, 3), config, 3)
        second = sample_scene(make_rng(5, 3), config, 3)
        assert first.to_dict() == second.to_dict()

    def test_scene_invariants(self) -> None:
        """Test participant counts, frame containment and collision freedom."""
        config = GeneratorConfig()
        for scene_id in range(200):
            spec = sample_scene(make_rng(11, scene_id), config, scene_id)
            assert config.min_participants <= len(spec.participants) <= config.max_participants
            boxes = [to_xyxy(p.box) for p in spec.participants]
            for i, box in enumerate(boxes):
                assert box.x0 >= -1e-12 and box.y0 >= -1e-12
                assert box.x1 <= 1.0 + 1e-12 and box.y1 <= 1.0 + 1e-12
                for other in boxes[i + 1 :]:
                    assert iou(box, other) < config.collision_iou
            assert spec.important_idx == importance_rule(spec)
            if spec.layout != "intersection":
                assert spec.intention == "go-straight"

    def test_layout_frequencies(self) -> None:
        """Test that layout frequencies follow the configured distribution."""
        config = GeneratorConfig(min_participants=0, max_participants=0)
        counts = Counter(sample_scene(make_rng(0, i), config, i).layout for i in range(10_000))
        for layout, expected in zip(("wide-road", "narrow-road", "intersection"), config.layout_probs):
            assert abs(counts[layout] / 10_000 - expected) < 0.02

    def test_placement_attempts_exhausted(self) -> None:
        """Test that exhausting placement attempts raises SceneSamplingError."""
        config = GeneratorConfig(min_participants=8, max_participants=8, max_tries=3)
        with pytest.raises(SceneSamplingError):
            sample_scene(make_rng(0), config)

    def test_config_validation(self) -> None:
        """Test generator configuration checks."""
        with pytest.raises(ValueError, match="sum to 1"):
            GeneratorConfig(layout_probs=(0.5, 0.5, 0.5))
        with pytest.raises(ValueError, match="at least 8"):
            GeneratorConfig(image_size=4)

    def test_signal_requires_state(self) -> None:
        """Test that signals must carry a state and a governed branch."""
        with pytest.raises(ValueError):
            Participant("signal", BoxCxCyWh(0.5, 0.5, 0.04, 0.08))


class TestRendering:
    """Tests for flat-colour rasterisation."""

    def test_layout_colours(self) -> None:
        """Test background, lane and participant colours at known pixels."""
        raster = render_uint8(_road_scene(_vehicle(0.5, 0.6)), 128)

        assert raster.shape == (128, 128, 3)
        assert tuple(raster[5, 5]) == PALETTE["background"]
        assert tuple(raster[120, 64]) == PALETTE["lane"]
        assert tuple(raster[120, 20]) == PALETTE["road"]
        assert tuple(raster[77, 64]) == PALETTE["vehicle"]

    def test_minimum_footprint(self) -> None:
        """Test that a sub-pixel participant still covers at least 3×3 pixels."""
        raster = render_uint8(_road_scene(_pedestrian(0.5, 0.6)), 16)
        mask = np.all(raster == PALETTE["pedestrian"], axis=-1)
        assert mask.sum() >= 9

    def test_render_range_and_determinism(self, fork_scene: SceneSpec) -> None:
        """Test that rendering is channel-first, in [0, 1] and repeatable."""
        first = render(fork_scene, 32).image
        second = render(fork_scene, 32).image

        assert first.shape == (3, 32, 32)
        assert 0.0 <= first.min() and first.max() <= 1.0
        assert np.array_equal(first, second)
