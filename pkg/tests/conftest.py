import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from actprompt.config import EncoderConfig, TemporalConfig, TrainConfig  # noqa: E402
from actprompt.data import Dataset, SyntheticSpec, generate_synthetic  # noqa: E402
from actprompt.model import ActPromptModel  # noqa: E402

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

# 16x16 frames, 2x2 patch grid, D=8, two layers; no warm-up so it builds instantly.
TINY = EncoderConfig(image_size=16, patch_size=8, channels=3, embed_dim=8, video_dim=6,
                     num_layers=2, num_heads=2, vocab_size=64, max_tokens=8, pretrain_steps=0)
SMALL = EncoderConfig(image_size=16, patch_size=8, channels=3, embed_dim=16, video_dim=8,
                      num_layers=3, num_heads=2, vocab_size=128, max_tokens=10, pretrain_steps=0)


@pytest.fixture
def tiny_model():
    return ActPromptModel(TINY, TemporalConfig(T=1)).double()


@pytest.fixture
def small_config():
    return TrainConfig(encoder=SMALL, epochs=2, data_ratio=0.5, batch_size=4)


@pytest.fixture(scope="session")
def small_synthetic():
    spec = SyntheticSpec(num_videos=8, clips_per_video=4, image_size=16, square_size=4)
    videos, records = generate_synthetic(spec, seed=3)
    return Dataset(records, videos)


def randomize_(model, seed=0, scale=0.3):
    """Give every trainable tensor generic nonzero values (for gradient checks)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in model.trainable_named_parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def default_run():
    """Default config, 50-video synthetic set, 10 epochs, plus held-out accuracy before/after."""
    import warnings

    from actprompt.train import PreparedData, finetune, triplet_accuracy

    config = TrainConfig()
    videos, records = generate_synthetic(SyntheticSpec(num_videos=50, clips_per_video=6), seed=0)
    held_v, held_r = generate_synthetic(SyntheticSpec(num_videos=50, prefix="held"), seed=1)
    model = ActPromptModel(config.encoder, config.temporal, config.prompt, config.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        held = PreparedData(model, Dataset(held_r, held_v), config)
        pre = triplet_accuracy(model, held, config)
        result = finetune(config, Dataset(records, videos), model=model)
        post = triplet_accuracy(model, held, config)
    return {"result": result, "pre": pre, "post": post, "config": config}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
