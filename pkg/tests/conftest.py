import numpy as np
import pytest

from normgd.matrixfns import PolarMethod
from normgd.norms import make_norm
from normgd.params import BlockLayout, ParamVector, RngState

# One layout that makes sense in every geometry: two square matrix blocks and a
# bias-style vector block (treated as a column matrix by the spectral norms).
MIXED_BLOCKS = (("m1", (2, 2)), ("m2", (2, 3)), ("v", (3,)))

GEOMETRIES = ["euclidean", "preconditioned", "linf", "block_l12",
              "spectral_max", "spectral_sum"]


@pytest.fixture
def mixed_layout():
    return BlockLayout.of(*MIXED_BLOCKS)


def norm_for(variant: str, layout: BlockLayout, precond_seed: int = 123):
    """Construct each geometry with reasonable parameters for tests."""
    if variant == "preconditioned":
        rng = RngState(precond_seed)
        diag = np.exp(rng.uniform(layout.total_dim) * 2.0 - 1.0)
        return make_norm(variant, layout, diag=diag)
    if variant in ("spectral_max", "spectral_sum"):
        return make_norm(variant, layout, polar_method=PolarMethod.exact())
    return make_norm(variant, layout)


def all_norms(layout: BlockLayout):
    return {v: norm_for(v, layout) for v in GEOMETRIES}


def vec(layout: BlockLayout, data) -> ParamVector:
    return ParamVector(layout, np.asarray(data, dtype=np.float64))


def rand_vec(layout: BlockLayout, seed: int) -> ParamVector:
    return ParamVector(layout, RngState(seed).normal(layout.total_dim))
