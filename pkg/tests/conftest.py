import dataclasses

import pytest
import torch

from etm.config import TrainConfig
from etm.data import DomainSpec, generate_domain

torch.set_num_threads(1)

PALETTES = {
    "src": [(0.45, 0.45, 0.45), (0.85, 0.2, 0.2), (0.2, 0.75, 0.25), (0.2, 0.3, 0.85)],
    "A": [(0.35, 0.42, 0.3), (0.9, 0.55, 0.15), (0.25, 0.65, 0.6), (0.55, 0.3, 0.8)],
    "B": [(0.6, 0.52, 0.62), (0.75, 0.25, 0.5), (0.5, 0.75, 0.2), (0.25, 0.6, 0.9)],
}


def tiny_config(**kw):
    base = dict(domains=["src", "A", "B"], channels=(8, 8, 16, 16), head_width=8, disc_width=4,
                iter_max=3, source_iters=2, source_batch_size=2, batch_size=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    out = {}
    for k, (name, palette) in enumerate(PALETTES.items()):
        spec = DomainSpec(name, "source" if name == "src" else "target", palette,
                          texture_noise_sigma=0.05, image_size=(32, 32), samples=6, val_samples=4)
        out[name] = (generate_domain(spec, k), generate_domain(spec, k, "val"))
    return out


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)
