import numpy as np
import pytest

from quantmcu import refengine
from quantmcu.netgraph import LayerSpec, NetworkSpec
from quantmcu.pipeline import PlanContext

REF_SEED = 42
REF_CAL_SEED = 123
REF_CAL_SAMPLES = 8


def reference_net() -> NetworkSpec:
    """Desk-scale reference: 6 spatial layers + fc, split 2x2 at depth 3.

    The MAC mass sits in the second conv, so the bitwidth of its (wide,
    post-relu) input map dominates both the patch stage's computation and
    the peak adjacent-pair footprint; that is the map the search has a
    real incentive to shrink. The second conv itself has no relu, keeping
    the split map's entropy (the omega denominator) high.
    """
    return NetworkSpec(
        name="refnet",
        input_shape=(32, 32, 3),
        layers=(
            LayerSpec("conv", kernel=3, stride=1, padding=1, out_channels=32,
                      activation="relu"),
            LayerSpec("conv", kernel=3, stride=1, padding=1, out_channels=24,
                      activation="none"),
            LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("conv", kernel=3, stride=1, padding=1, out_channels=16,
                      activation="relu"),
            LayerSpec("conv", kernel=3, stride=1, padding=1, out_channels=16,
                      activation="relu"),
            LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("fc", out_channels=10),
        ),
        patch_grid=(2, 2),
        patch_depth=3,
    )


def reference_calibration_arrays(n_samples: int = REF_CAL_SAMPLES):
    rng = np.random.default_rng(REF_CAL_SEED)
    return [rng.uniform(0.0, 1.0, (32, 32, 3)).astype(np.float32)
            for _ in range(n_samples)]


def write_calibration(directory, arrays) -> None:
    for i, arr in enumerate(arrays):
        refengine.save_tensor(directory / f"sample_{i:03d}.qmtn", arr)


@pytest.fixture(scope="session")
def refnet():
    return reference_net()


@pytest.fixture(scope="session")
def refweights(refnet):
    return refengine.synthetic_weights(refnet, REF_SEED)


@pytest.fixture(scope="session")
def refcal():
    return refengine.calibration_from_arrays(reference_calibration_arrays())


@pytest.fixture(scope="session")
def refctx(refnet, refweights, refcal):
    return PlanContext(refnet, refweights, refcal)
