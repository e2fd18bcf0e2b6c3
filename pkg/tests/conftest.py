import numpy as np
import pytest

from y11.io_formats import write_ppm
from y11.tensor import Tensor


@pytest.fixture
def small_ppm(tmp_path):
    """An 80x48 noise image on disk, small enough for fast end-to-end runs."""
    rng = np.random.default_rng(7)
    image = Tensor(rng.random((1, 3, 48, 80), dtype=np.float32))
    path = tmp_path / "fixture.ppm"
    path.write_bytes(write_ppm(image))
    return path


def random_tensor(rng: np.random.Generator, n: int, c: int, h: int, w: int) -> Tensor:
    return Tensor(rng.standard_normal((n, c, h, w)).astype(np.float32))
