import numpy as np
import pytest
import torch
from PIL import Image


class TinyBackbone(torch.nn.Module):
    """Stand-in emotion backbone with the real output contract."""

    def __init__(self, logits_dim: int = 10):
        super().__init__()
        torch.manual_seed(0)
        self.pool = torch.nn.AdaptiveAvgPool2d(8)
        self.embed = torch.nn.Linear(3 * 8 * 8, 1280)
        self.head = torch.nn.Linear(3 * 8 * 8, logits_dim)

    def forward(self, x):
        z = self.pool(x).flatten(1)
        return self.embed(z), self.head(z)


def save_exported(model, path):
    n = torch.export.Dim("n", min=1)
    program = torch.export.export(model, (torch.zeros(2, 3, 224, 224),),
                                  dynamic_shapes={"x": {0: n}})
    torch.export.save(program, str(path))


@pytest.fixture(scope="session")
def backbone_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "backbone.pt2"
    save_exported(TinyBackbone(), path)
    return str(path)


@pytest.fixture(scope="session")
def bad_backbone_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "bad.pt2"
    save_exported(TinyBackbone(logits_dim=7), path)
    return str(path)


def make_image(path, seed: int, size=(48, 40)):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(base, "RGB").save(path)


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("images")
    for i in range(10):
        make_image(d / f"img{i:03d}.png", seed=i, size=(40 + 4 * i, 36 + 2 * i))
    return str(d)
