import numpy as np
import pytest

from streamreason.errors import ParamError
from streamreason.sampling import sample_token, truncated_distribution


def test_tie_break_by_id():
    order, p = truncated_distribution([1.0, 3.0, 3.0, 0.0], 2, 1.0, 1.0)
    assert order.tolist() == [1, 2] and np.allclose(p, [0.5, 0.5])


def test_top_p_prefix():
    logits = np.log([0.5, 0.3, 0.15, 0.05])
    order, p = truncated_distribution(logits, 4, 0.75, 1.0)
    assert order.tolist() == [0, 1]
    assert np.isclose(p.sum(), 1.0)


def test_top_k_one_is_greedy_and_consumes_rng():
    a, b = np.random.default_rng(3), np.random.default_rng(3)
    assert sample_token([0.0, 2.0, 1.0], 1, 1.0, 1.0, a) == 1
    b.random()
    assert a.random() == b.random()


def test_untruncated_sampling_matches_softmax():
    logits = np.array([0.0, 1.0, -1.0, 0.5])
    rng = np.random.default_rng(0)
    draws = np.bincount([sample_token(logits, 4, 1.0, 1.0, rng) for _ in range(20000)], minlength=4) / 20000
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.max(np.abs(draws - p)) < 0.015


@pytest.mark.parametrize("args", [(0, 1.0, 1.0), (3, 0.0, 1.0), (3, 1.5, 1.0), (3, 1.0, 0.0)])
def test_bad_params(args):
    with pytest.raises(ParamError):
        truncated_distribution([0.0, 1.0], *args)


def test_non_finite_logits():
    with pytest.raises(ParamError):
        truncated_distribution([0.0, np.nan], 2, 1.0, 1.0)
