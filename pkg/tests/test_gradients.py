import pytest

from gradcases import CASES


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("layer", sorted(CASES))
def test_analytic_matches_central_differences(layer, seed):
    assert CASES[layer](seed) < 1e-3
