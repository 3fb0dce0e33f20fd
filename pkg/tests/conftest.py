import numpy as np
import pytest

from coast.blocks import Image, write_image
from coast.config import TrainConfig
from coast.network import CoastConfig
import models  # noqa: F401
from db import init_db


def smooth_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth synthetic scene: a ramp, a couple of low-frequency waves and one soft edge."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    fx, fy = rng.uniform(1.0, 3.0, 2)
    px, py = rng.uniform(0.0, 2 * np.pi, 2)
    img = 0.5 + 0.2 * np.sin(2 * np.pi * fx * xx + px) * np.cos(2 * np.pi * fy * yy + py)
    img += 0.15 * (xx - 0.5) + 0.1 * np.tanh((yy - rng.uniform(0.3, 0.7)) * 20)
    return np.clip(np.round(img * 255) / 255, 0.0, 1.0)


def write_image_set(directory, rng, count: int, height: int, width: int, suffix: str = ".pgm"):
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = directory / f"img{i:02d}{suffix}"
        write_image(Image(smooth_image(rng, height, width)), path)
        paths.append(path)
    return paths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image_dir(tmp_path, rng):
    directory = tmp_path / "train"
    write_image_set(directory, rng, 3, 24, 20)
    return directory


@pytest.fixture
def test_images_dir(tmp_path):
    directory = tmp_path / "test"
    write_image_set(directory, np.random.default_rng(99), 2, 16, 16)
    return directory


@pytest.fixture
def tiny_coast():
    return CoastConfig(phases=2, blocks=1, channels=4)


@pytest.fixture
def tiny_config(tmp_path, image_dir, tiny_coast):
    return TrainConfig(
        image_dir=image_dir,
        patch_count=16,
        patch_side=4,
        batch_size=8,
        epochs=2,
        learning_rate=1e-3,
        seed=7,
        ratios=(0.25, 0.5),
        per_base=2,
        coast=tiny_coast,
        out_dir=tmp_path / "runs",
        timings=False,
        run_name="tiny",
    )


@pytest.fixture
def session():
    factory = init_db("sqlite:///:memory:")
    s = factory()
    yield s
    s.close()
