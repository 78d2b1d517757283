import numpy as np
import pytest

from photosfm.manifold import normalize, s2_retract, tangent_basis


def random_illum_triple(rng, max_tilt=1.2, min_sin_phase=0.05):
    """Consistent (sun, emit, normal) unit triple, illuminated and visible."""
    while True:
        n = normalize(rng.normal(size=3))
        b = tangent_basis(n)
        s = s2_retract(n, rng.uniform(0.02, max_tilt) * normalize(rng.normal(size=2)), basis=b)
        e = s2_retract(n, rng.uniform(0.02, max_tilt) * normalize(rng.normal(size=2)), basis=b)
        h = float(s @ e)
        if s @ n > 1e-2 and e @ n > 1e-2 and np.sqrt(1 - min(h * h, 1.0)) > min_sin_phase:
            return s, e, n


@pytest.fixture
def rng():
    return np.random.default_rng(987654321)
