import numpy as np
import pytest

from emis.data import SynthSpec, generate_synthetic
from emis.head import HeadDims, HeadParams, init_params

from scalar_oracle import OracleHead


@pytest.fixture(scope="session")
def default_synth():
    """The stock synthetic benchmark; generated once per session."""
    return generate_synthetic(SynthSpec())


def oracle_from_params(params: HeadParams) -> OracleHead:
    def mlp(a):
        return (a.w1.tolist(), a.b1.tolist(), a.w2.tolist(), a.b2.tolist())

    return OracleHead(attn_is=mlp(params.attn_is), attn_em=mlp(params.attn_em),
                      proj=(params.proj_w.tolist(), params.proj_b.tolist()),
                      gamma=float(params.gamma))


def random_params(dims: HeadDims, seed: int) -> HeadParams:
    return init_params(dims, seed=seed)


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
