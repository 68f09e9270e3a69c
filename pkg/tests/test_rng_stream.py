import numpy as np
import pytest
from scipy.special import ndtri

from errors import UsageError
from rng_stream import RngStream, StreamRecord, derive_stream_id, sample_standard_gaussian


def test_same_key_same_values():
    a = RngStream(42, 3)
    b = RngStream(42, 3)
    np.testing.assert_array_equal(a.standard_normal(100), b.standard_normal(100))


def test_sequential_equals_positional(stream):
    first = stream.standard_normal(7)
    second = stream.standard_normal(13)
    np.testing.assert_array_equal(np.concatenate([first, second]), stream.normal_at(0, 20))
    assert stream.counter == 20


def test_positions_inside_a_block(stream):
    whole = stream.raw_at(0, 11)
    for start in range(1, 8):
        np.testing.assert_array_equal(stream.raw_at(start, 3), whole[start:start + 3])


def test_uniform_transform_is_open_interval(stream):
    raw = stream.raw_at(0, 1000)
    u = stream.uniform_at(0, 1000)
    expected = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    np.testing.assert_array_equal(u, expected)
    assert u.min() > 0.0 and u.max() < 1.0


def test_normal_is_inverse_cdf_of_uniform(stream):
    np.testing.assert_array_equal(stream.normal_at(5, 50), ndtri(stream.uniform_at(5, 50)))


def test_different_stream_ids_differ():
    a = RngStream(1, 0).standard_normal(32)
    b = RngStream(1, 1).standard_normal(32)
    assert not np.array_equal(a, b)


def test_gaussian_moments():
    z = sample_standard_gaussian(RngStream(0, 0), 200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.01


def test_replay_from_record(stream):
    stream.skip(17)
    record = stream.state()
    assert record == StreamRecord(1234, 7, 17)
    ahead = stream.standard_normal(5)
    np.testing.assert_array_equal(RngStream.at(record).standard_normal(5), ahead)


def test_fork_and_copy_are_independent(stream):
    stream.skip(3)
    clone = stream.copy()
    clone.skip(10)
    assert stream.counter == 3
    child = stream.fork(99)
    assert (child.seed, child.stream_id, child.counter) == (1234, 99, 0)


def test_zero_draws_do_not_advance(stream):
    assert stream.standard_normal(0).size == 0
    assert stream.counter == 0


@pytest.mark.parametrize("kwargs", [{"seed": -1}, {"seed": 1, "stream_id": 2 ** 64}])
def test_rejects_out_of_range_keys(kwargs):
    with pytest.raises(UsageError):
        RngStream(**kwargs)


def test_negative_skip_rejected(stream):
    with pytest.raises(UsageError):
        stream.skip(-1)


def test_derive_stream_id_is_order_sensitive():
    assert derive_stream_id(1, 2) != derive_stream_id(2, 1)
    assert derive_stream_id(5, 3) == 5 * 1_000_003 + 3
    assert 0 <= derive_stream_id(2 ** 63, 2 ** 63, 7) < 2 ** 64
