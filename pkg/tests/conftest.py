import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
sys.path.insert(0, str(Path(__file__).resolve().parent))

import pytest  # noqa: E402

from fmsam.config import preset  # noqa: E402
from fmsam.data import PoolingHierarchy, SynthConfig, synth_motion  # noqa: E402

# 4 joints -> 12 coordinate rows, pooled 12 -> 8 -> 6 -> 4
TINY_HIERARCHY = PoolingHierarchy(
    (12, 8, 6, 4),
    (((0, 3), (1, 4), (2, 5), (6,), (7,), (8,), (9,), (10, 11)),
     ((0, 1), (2, 3), (4,), (5,), (6,), (7,)),
     ((0, 1), (2, 3), (4,), (5,))),
)


def tiny_dataset(seed=0, **kw):
    ds = synth_motion(SynthConfig(n_joints=4, length=30, **kw), seed=seed)
    ds.hierarchy = TINY_HIERARCHY
    return ds


@pytest.fixture
def tiny_data():
    return tiny_dataset()


@pytest.fixture
def tiny_config():
    return preset("tiny")
