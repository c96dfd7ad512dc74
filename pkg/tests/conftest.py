"""Test fixtures for the test suite."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from druformer import DRUConfig, GeneratorConfig, PEConfig, RunConfig
from druformer.commands import cmd_gen_data, cmd_pretrain_pe, cmd_train
from druformer.config import DataConfig, TrainConfig
from druformer.dataset import Dataset, generate_scenes, read_dataset, write_dataset
from druformer.geometry import BoxCxCyWh
from druformer.rng import make_rng
from druformer.scenes import Participant, SceneSpec, ego_lane


@pytest.fixture
def rng() -> np.random.Generator:
    """Provide a seeded random generator."""
    return make_rng(1234)


def build_tiny_config() -> RunConfig:
    """Run configuration with 16×16 images and single-layer transformers."""
    return RunConfig(
        pe=PEConfig(
            image_h=16,
            image_w=16,
            downsample=8,
            backbone_channels=(4, 8),
            d_s=16,
            d_d=8,
            n_queries=4,
            enc_layers=1,
            dec_layers=1,
            n_heads=2,
            ffn_hidden=8,
        ),
        dru=DRUConfig(layers=1, heads=2, ffn_hidden=8, top_k=3),
        train=TrainConfig(epochs=2, pretrain_epochs=1, batch_size=4, seed=7, validate_every=1),
        generator=GeneratorConfig(image_size=16, max_participants=4),
        data=DataConfig(n_scenes=20),
    )


@pytest.fixture
def tiny_config() -> RunConfig:
    """Provide a run configuration small enough for unit and integration tests."""
    return build_tiny_config()


@pytest.fixture
def tiny_dataset(tiny_config: RunConfig, tmp_path: Path) -> Dataset:
    """Provide a 20-scene dataset of 16×16 images written to a temporary directory."""
    scenes = generate_scenes(tiny_config.generator, 20, seed=3)
    write_dataset(scenes, tmp_path / "data", tiny_config.generator, seed=3)
    return read_dataset(tmp_path / "data")


@pytest.fixture
def fork_scene() -> SceneSpec:
    """Provide an intersection with one pedestrian on the left branch and one straight ahead."""
    return SceneSpec(
        scene_id=0,
        layout="intersection",
        lane=ego_lane("intersection"),
        participants=[
            Participant("pedestrian", BoxCxCyWh(0.15, 0.4, 0.04, 0.06)),
            Participant("pedestrian", BoxCxCyWh(0.5, 0.15, 0.04, 0.06)),
        ],
        intention="turn-left",
    )


@dataclass
class TrainedRun:
    """Artifacts of one generate → pretrain → train pass on the tiny configuration."""

    config: RunConfig
    config_path: Path
    data: Path
    pe_checkpoint: Path
    full_checkpoint: Path


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory: pytest.TempPathFactory) -> TrainedRun:
    """Provide a dataset and both checkpoints, built once per session."""
    root = tmp_path_factory.mktemp("run")
    config = build_tiny_config()
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config.to_dict()), encoding="utf-8")
    cmd_gen_data(config, root / "data", n=20, seed=3)
    pe_checkpoint = cmd_pretrain_pe(config, root / "data", root / "pe")
    full_checkpoint = cmd_train(config, root / "data", root / "full", pe_checkpoint=pe_checkpoint)
    return TrainedRun(config, config_path, root / "data", pe_checkpoint, full_checkpoint)
