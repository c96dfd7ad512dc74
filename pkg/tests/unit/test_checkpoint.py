"""Unit tests for the binary checkpoint format."""

from pathlib import Path

import numpy as np
import pytest

from druformer.checkpoint import MAGIC, Checkpoint, load_checkpoint, model_hash, save_checkpoint
from druformer.config import RunConfig, config_hash
from druformer.exceptions import CheckpointError
from druformer.model import DRUformer
from druformer.rng import make_rng


@pytest.fixture
def checkpoint(tiny_config: RunConfig) -> Checkpoint:
    """Provide a checkpoint of a freshly initialised tiny model."""
    model = DRUformer(tiny_config, make_rng(0))
    return Checkpoint(
        stage="full",
        config_hash=config_hash(tiny_config),
        model_hash=model_hash(model),
        tensors=model.state_dict(),
        metadata={"epoch": 1},
    )


class TestCheckpoint:
    """Tests for saving and loading checkpoints."""

    def test_round_trip(self, checkpoint: Checkpoint, tmp_path: Path) -> None:
        """Test that tensors and metadata are restored bit-exactly."""
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, checkpoint)
        loaded = load_checkpoint(path, expected_stage="full", expected_config_hash=checkpoint.config_hash)

        assert loaded.metadata == {"epoch": 1}
        assert loaded.model_hash == checkpoint.model_hash
        assert set(loaded.tensors) == set(checkpoint.tensors)
        for name, value in checkpoint.tensors.items():
            assert np.array_equal(loaded.tensors[name], value)
        assert not path.with_name("model.ckpt.tmp").exists()

    def test_restores_model_outputs(self, tiny_config: RunConfig, checkpoint: Checkpoint, tmp_path: Path) -> None:
        """Test that a reloaded model reproduces the saved model's outputs."""
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, checkpoint)
        original = DRUformer(tiny_config, make_rng(0))
        restored = DRUformer(tiny_config, make_rng(99))
        restored.load_state_dict(load_checkpoint(path).tensors)

        images = make_rng(1).uniform(size=(2, 3, 16, 16))
        assert np.array_equal(original(images, [0, 1]).logits.data, restored(images, [0, 1]).logits.data)

    def test_prefix_selection(self, checkpoint: Checkpoint) -> None:
        """Test extracting a sub-module's tensors by prefix."""
        pe = checkpoint.with_prefix("pe.")
        assert pe and all(not name.startswith("pe.") for name in pe)
        assert "backbone.kernels.0" in pe

    def test_bad_magic(self, tmp_path: Path) -> None:
        """Test that files without the magic are rejected."""
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_truncated_payload(self, checkpoint: Checkpoint, tmp_path: Path) -> None:
        """Test that a truncated payload is detected."""
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, checkpoint)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_corrupt_header(self, tmp_path: Path) -> None:
        """Test that an unreadable header is rejected."""
        path = tmp_path / "bad.ckpt"
        path.write_bytes(MAGIC + (4).to_bytes(8, "little") + b"{{{{")
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(path)

    def test_stage_and_hash_mismatch(self, checkpoint: Checkpoint, tmp_path: Path) -> None:
        """Test refusal of a wrong stage or config hash."""
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, checkpoint)
        with pytest.raises(CheckpointError, match="pe_pretrain"):
            load_checkpoint(path, expected_stage="pe_pretrain")
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(path, expected_config_hash="0" * 16)

    def test_unknown_stage(self, checkpoint: Checkpoint, tmp_path: Path) -> None:
        """Test that only known stages can be saved."""
        checkpoint.stage = "finetune"
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "x.ckpt", checkpoint)

    def test_model_hash_tracks_architecture(self, tiny_config: RunConfig) -> None:
        """Test that the model hash depends on shapes, not values."""
        baseline = model_hash(DRUformer(tiny_config, make_rng(0)))
        assert model_hash(DRUformer(tiny_config, make_rng(1))) == baseline
        tiny_config.dru.use_dru = False
        assert model_hash(DRUformer(tiny_config, make_rng(0))) != baseline
