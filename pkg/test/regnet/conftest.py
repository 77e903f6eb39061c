import numpy as np
import pytest

from cbct_toxicity.volio import Volume


def blob(n=16, center_mm=(15.0, 15.0, 15.0), sigma_mm=5.0, spacing=2.0):
    like = Volume(np.zeros((1, n, n, n)), (spacing,) * 3)
    points = like.physical_grid()
    offset = points - np.reshape(center_mm, (3, 1, 1, 1))
    data = np.exp(-(offset**2).sum(axis=0) / (2 * sigma_mm**2))
    return Volume(data[np.newaxis].astype(np.float32), like.spacing_mm)


@pytest.fixture
def make_blob():
    return blob
