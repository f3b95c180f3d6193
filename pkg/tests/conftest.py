import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cascade_i2v.codec import CodecConfig, ConvAutoencoder, LatentCodecModel  # noqa: E402
from cascade_i2v.config import micro_profile  # noqa: E402
from cascade_i2v.data import MovingShapesDataset  # noqa: E402

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: uses the trained toy artifacts (trains them if absent)")


@pytest.fixture(scope="session")
def micro():
    return micro_profile()


@pytest.fixture(scope="session")
def micro_dataset(micro):
    return MovingShapesDataset.generate(12, 5, H=32, W=32, native_fps=micro.native_fps,
                                        max_seconds=micro.max_seconds)


@pytest.fixture(scope="session")
def micro_codec_ckpt():
    """Untrained but fully valid autoencoder checkpoint for the micro profile."""
    torch.manual_seed(0)
    cfg = CodecConfig(hidden_channels=8, steps=0)
    model = LatentCodecModel(ConvAutoencoder(cfg.downsample, cfg.latent_channels, 8), cfg)
    return model.to_checkpoint(losses=[])


# trained toy artifacts, built on first use and cached under tests/.artifacts

@pytest.fixture(scope="session")
def codec_ckpt():
    import artifacts
    return artifacts.codec_checkpoint()


@pytest.fixture(scope="session")
def base_ckpt():
    import artifacts
    return artifacts.base_checkpoint()


@pytest.fixture(scope="session")
def refine_ckpt():
    import artifacts
    return artifacts.refine_checkpoint()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
