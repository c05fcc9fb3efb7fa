import numpy as np
import pytest
import torch
from PIL import Image

from dclgan.config import AblationFlags, DataConfig, NCEConfig, NetConfig, TrainConfig


def write_images(directory, n, size=64, seed=0, prefix="img"):
    """Smooth synthetic RGB images with a coloured disc, saved as PNG."""
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = (size, size) if isinstance(size, int) else size
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    yy, xx = yy / max(h - 1, 1), xx / max(w - 1, 1)
    paths = []
    for i in range(n):
        c = rng.uniform(0, 1, (3, 3))
        img = np.stack(
            [c[k, 0] * xx + c[k, 1] * yy + c[k, 2] * np.sin(6 * (xx + yy) * (i + 1) / 4) for k in range(3)], -1
        )
        img = (img - img.min()) / (img.max() - img.min() + 1e-9)
        cx, cy = rng.uniform(0.2, 0.8, 2)
        img[(xx - cx) ** 2 + (yy - cy) ** 2 < 0.02] = rng.uniform(0, 1, 3)
        p = directory / f"{prefix}{i:03d}.png"
        Image.fromarray((img * 255).astype(np.uint8)).save(p)
        paths.append(p)
    return paths


@pytest.fixture
def image_dirs(tmp_path):
    dx, dy = tmp_path / "trainA", tmp_path / "trainB"
    write_images(dx, 5, 40, seed=1, prefix="a")
    write_images(dy, 7, 40, seed=2, prefix="b")
    return dx, dy


def tiny_config(tmp_dirs=None, **kw) -> TrainConfig:
    """Small networks and images so a step takes well under a second."""
    ablation = kw.pop("ablation", {})
    data = DataConfig(load_size=36, crop_size=32, flip=True)
    if tmp_dirs is not None:
        data.dir_x, data.dir_y = map(str, tmp_dirs)
    cfg = TrainConfig(
        ablation=AblationFlags(**ablation),
        net=NetConfig(base_width=8),
        nce=NCEConfig(num_patches=32),
        data=data,
        **kw,
    )
    return cfg.validate()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
