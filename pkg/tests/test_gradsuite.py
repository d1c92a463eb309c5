import numpy as np
import pytest

from dualstain import gradsuite as gs


@pytest.mark.parametrize("name", sorted(gs.CHECKS))
def test_each_check_passes_a_few_trials(name):
    fn, tol = gs.CHECKS[name]
    rng = np.random.default_rng(7)
    errs = [fn(rng) for _ in range(3)]
    assert all(np.isfinite(errs)) and max(errs) < tol


def test_suite_is_seed_deterministic():
    a = gs.run_suite(["eiou", "spp"], trials=4, seed=1)
    b = gs.run_suite(["eiou", "spp"], trials=4, seed=1)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_result_flags_failure():
    assert not gs.SuiteResult("x", 1, 1e-3, 1e-4).ok
    assert not gs.SuiteResult("x", 1, float("nan"), 1e-4).ok
    assert gs.SuiteResult("x", 1, 1e-6, 1e-4).ok
