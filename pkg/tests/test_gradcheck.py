import numpy as np
import pytest
import torch

from monodisp.gradcheck import GRAD_TERMS, check_term, excluded_elements, relative_error, run_suite
from monodisp.warp import horizontal_resample


@pytest.mark.parametrize("term", GRAD_TERMS)
def test_term_gradients_match_finite_differences(term):
    rng = np.random.default_rng(100)
    for _ in range(3):
        r = check_term(term, rng)
        assert r.n_checked > 0
        assert r.max_rel_error <= 1e-4, r


def test_sampler_gradient_wrt_source_and_disparity():
    rng = np.random.default_rng(101)
    src = torch.from_numpy(rng.random((1, 2, 4, 7))).requires_grad_(True)
    disp = torch.from_numpy(rng.uniform(0.1, 2.9, (1, 4, 7)))
    disp = (disp.floor() + 0.5 * (disp - disp.floor()) + 0.25).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda s, d: horizontal_resample(s, d, 1), (src, disp), eps=1e-6, atol=1e-7)


def test_exclusion_flags_elements_near_integer_coordinates():
    d = torch.full((2, 1, 3, 5), 1.3, dtype=torch.float64)
    d[0, 0, 1, 2] = 2.0 + 1e-4
    x = torch.arange(5, dtype=torch.float64).expand(1, 3, 5)

    def kinks(dd):
        c = x - dd[0]
        return (c - c.detach().round()).reshape(-1)

    mask = excluded_elements(kinks, d, 1e-3)
    assert mask[0, 0, 1, 2] and int(mask.sum()) == 1


def test_relative_error_floor():
    a = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64)
    n = torch.tensor([0.0, 1.0 + 1e-6, 2.0], dtype=torch.float64)
    err = relative_error(a, n)
    assert err[0] == 0 and err[1] == pytest.approx(1e-6 / (1 + 1e-6))


def test_suite_reports_each_term():
    results = run_suite(n_instances=2, seed=7)
    assert set(results) == set(GRAD_TERMS)
    assert all(r.passed() for r in results.values())
