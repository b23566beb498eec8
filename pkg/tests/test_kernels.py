import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentserve import _pykernels, kernels

ck = pytest.importorskip("agentserve._ckernels")

tokens_st = st.lists(st.integers(-2 ** 63, 2 ** 63 - 1), max_size=300).map(
    lambda xs: np.array(xs, dtype=np.int64))


def test_backend_selected():
    assert kernels.BACKEND == "cython"


@settings(max_examples=300, deadline=None)
@given(tokens_st, st.integers(1, 80))
def test_block_keys_match(tokens, bs):
    assert np.array_equal(ck.block_keys(tokens, bs), _pykernels.block_keys(tokens, bs))


@settings(max_examples=300, deadline=None)
@given(tokens_st, tokens_st)
def test_prefix_len_match(a, b):
    assert ck.common_prefix_len(a, b) == _pykernels.common_prefix_len(a, b)


@settings(max_examples=200, deadline=None)
@given(tokens_st, st.integers(0, 300))
def test_prefix_len_oracle(a, cut):
    b = a.copy()
    if cut < len(b):
        b[cut] ^= 1
    expected = min(cut, len(a))
    for impl in (ck, _pykernels):
        assert impl.common_prefix_len(a, b) == expected


def test_keys_chain_on_prefix():
    a = np.arange(200, dtype=np.int64)
    b = a.copy()
    b[130] = -1
    ka, kb = kernels.block_keys(a, 64), kernels.block_keys(b, 64)
    assert len(ka) == 4 and ka[0] == kb[0] and ka[1] == kb[1] and ka[2] != kb[2]
    assert ka[3] != kb[3]  # chained: a later block differs once an earlier one does


def test_ragged_block_differs_from_full():
    a = np.arange(64, dtype=np.int64)
    assert kernels.block_keys(a[:63], 64)[0] != kernels.block_keys(a, 64)[0]


def test_empty():
    assert len(kernels.block_keys(np.zeros(0, np.int64), 64)) == 0
    assert kernels.common_prefix_len(np.zeros(0, np.int64), np.arange(3)) == 0
