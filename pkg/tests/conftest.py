import pytest
import torch

from vidssl.config import ExperimentConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    """Gradient-check scale: 4-frame 8x8 clips, 8-dim embeddings, float64."""
    cfg = ExperimentConfig()
    cfg.data.train_clips = 8
    cfg.data.test_clips = 4
    cfg.data.video_frames = cfg.data.clip_frames = 4
    cfg.data.video_height = cfg.data.height = 8
    cfg.data.video_width = cfg.data.width = 8
    cfg.data.sprite_size_min = 1.0
    cfg.data.sprite_size_max = 1.8
    cfg.train.embed_dim = 8
    cfg.train.encoder_channels = [4, 8]
    cfg.train.generator_channels = [4]
    cfg.train.generator_hidden = 8
    cfg.train.drop_count = 1
    cfg.train.batch_size = 4
    cfg.train.queue_capacity = 16
    cfg.train.dtype = "float64"
    return cfg


@pytest.fixture
def small_cfg():
    """Fast-training scale used by the loop and CLI tests."""
    cfg = ExperimentConfig()
    cfg.data.train_clips = 32
    cfg.data.test_clips = 8
    cfg.train.batch_size = 8
    cfg.train.queue_capacity = 32
    cfg.train.warmup_epochs = 1
    cfg.train.adversarial_epochs = 1
    cfg.eval.probe_epochs = 5
    return cfg
