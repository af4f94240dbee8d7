import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from qwalk.signs import SignStream, counter_word, mix64, sample_sign, sign_block, sign_sequence, uniform01, uniform_block


def test_mix64_reference_values():
    assert mix64(0) == 0
    assert mix64(1) == 0x5692161D100B05E5
    assert counter_word(42, 7, 3) == 0xBB8EC052B5FD1C52


def test_frozen_sign_prefixes():
    assert [sample_sign(0, 0, k) for k in range(16)] == [1, -1, -1, 1, -1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1, 1]
    assert [sample_sign(42, 3, k) for k in range(16)] == [-1, 1, -1, -1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, -1]


def test_frozen_uniform():
    assert uniform01(1, 2, 3) == 0.06897516535052706


@given(st.integers(0, 2**63 - 1), st.integers(0, 2**40), st.integers(0, 2**40))
def test_repeat_query_identical(seed, pid, step):
    s = SignStream(seed)
    assert s(pid, step) == s(pid, step) == sample_sign(seed, pid, step)


@settings(deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(0, 10**6), st.integers(0, 10**6))
def test_bulk_matches_reference(seed, pid, k0):
    block = sign_block(seed, [pid, pid + 1], k0, 5)
    for r, p in enumerate((pid, pid + 1)):
        assert block[r].tolist() == [sample_sign(seed, p, k0 + j) for j in range(5)]


def test_uniform_block_matches_reference():
    got = uniform_block(9, np.arange(20), 100)
    assert got.tolist() == [uniform01(9, p, 100) for p in range(20)]
    assert ((got >= 0) & (got < 1)).all()


def test_order_independent_access():
    full = sign_sequence(5, 11, 1000)
    assert np.array_equal(sign_sequence(5, 11, 300, start=700), full[700:])


def test_streams_differ_by_seed_and_path():
    a = sign_sequence(1, 0, 256)
    assert not np.array_equal(a, sign_sequence(2, 0, 256))
    assert not np.array_equal(a, sign_sequence(1, 1, 256))
