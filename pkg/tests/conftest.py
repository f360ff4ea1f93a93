import numpy as np
import pytest

from ctfuse import synthgen
from ctfuse.preprocess import Volume


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A tiny 2-class, 2-source dataset for fast structural tests."""
    root = tmp_path_factory.mktemp("small_ds")
    spec = synthgen.SynthSpec(
        n_scans_per_class_per_source=3, n_classes=2, n_sources=2,
        volume_side=32, seed=11, val_fraction=0.34,
    )
    manifest = synthgen.generate_dataset(spec, root)
    return spec, manifest


def random_volume(rng: np.random.Generator, side: int = 7) -> Volume:
    return Volume(data=rng.uniform(0, 255, size=(side, side, side)), stage_tag="raw")
