import numpy as np
import pytest
import torch

from datagen import DatagenConfig, build_dataset
from models import EncoderSpec, ModelSpec

TILE = 64


def tiny_datagen_config(**overrides) -> DatagenConfig:
    values = dict(
        seed=3,
        tile_size=TILE,
        splits={
            "T": {"train": 8, "val": 4},
            "S": {"train": 8, "val": 4},
            "Ev": {"train": 0, "val": 8},
        },
        building_count_range=(1, 3),
        workers=1,
    )
    values.update(overrides)
    return DatagenConfig(**values)


def tiny_spec(family: str = "inverted_residual", **kw) -> ModelSpec:
    return ModelSpec(
        encoder=EncoderSpec(family, width_multiplier=kw.pop("width_multiplier", 0.5)),
        decoder_channels=kw.pop("decoder_channels", (32, 24, 16, 16, 8)),
        tile_size=kw.pop("tile_size", TILE),
        **kw,
    )


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    """T / S / Ev datasets at 64 px, generated once per test session."""
    root = tmp_path_factory.mktemp("data")
    build_dataset(tiny_datagen_config(), root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _cpu_only(monkeypatch):
    import config

    monkeypatch.setattr(config, "DEVICE", "cpu")
    torch.set_num_threads(1)
