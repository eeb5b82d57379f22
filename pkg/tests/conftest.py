import numpy as np
import pytest

from contextflow.geometry import SpatialSlice


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def random_slice(rng, n, d=3, p=2, time=0.0, spread=1.0):
    return SpatialSlice(
        time=time,
        expr=rng.standard_normal((n, d)),
        coords=spread * rng.uniform(0, 1, size=(n, 2)),
        lr_features=rng.standard_normal((n, p)) if p else None,
        labels=np.asarray([f"t{k % 2}" for k in range(n)], dtype=object),
    )
