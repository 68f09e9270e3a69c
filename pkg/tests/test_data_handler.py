import numpy as np
import pytest

from data_handler import MIN_TASK_SIZE, make_tasks, ordered_batches, sample_batch, split_dataset
from errors import UsageError
from rng_stream import RngStream


def test_tasks_share_input_pool():
    task_a, task_b = make_tasks(seed=0, n_samples=600)
    assert len(task_a) == len(task_b) == 600
    rows_a = {tuple(row) for row in task_a.inputs}
    rows_b = {tuple(row) for row in task_b.inputs}
    assert rows_a == rows_b
    assert set(np.unique(task_a.targets)) == {0, 1}
    assert set(np.unique(task_b.targets)) == {0, 1}


def test_tasks_have_different_labels():
    task_a, task_b = make_tasks(seed=1, n_samples=600)
    lookup = {tuple(row): y for row, y in zip(task_a.inputs, task_a.targets)}
    same = np.mean([lookup[tuple(row)] == y for row, y in zip(task_b.inputs, task_b.targets)])
    assert 0.2 < same < 0.9


def test_tasks_are_deterministic():
    a1, b1 = make_tasks(seed=4, n_samples=512)
    a2, b2 = make_tasks(seed=4, n_samples=512)
    np.testing.assert_array_equal(a1.inputs, a2.inputs)
    np.testing.assert_array_equal(b1.targets, b2.targets)


def test_task_size_floor():
    with pytest.raises(UsageError):
        make_tasks(seed=0, n_samples=MIN_TASK_SIZE - 1)


def test_split_sizes_and_disjoint():
    task_a, _ = make_tasks(seed=2, n_samples=512)
    train, val, test = split_dataset(task_a, 64, 32, seed=2)
    assert (len(train), len(val), len(test)) == (416, 64, 32)
    rows = [{tuple(r) for r in part.inputs} for part in (train, val, test)]
    assert not rows[0] & rows[1] and not rows[0] & rows[2] and not rows[1] & rows[2]


def test_split_rejects_oversized_holdout():
    task_a, _ = make_tasks(seed=2, n_samples=512)
    with pytest.raises(UsageError):
        split_dataset(task_a, 300, 300, seed=0)


def test_sample_batch_consumes_stream():
    task_a, _ = make_tasks(seed=3, n_samples=512)
    stream = RngStream(3, 4)
    batch = sample_batch(task_a, 16, stream)
    assert len(batch) == 16
    assert stream.counter == 16
    again = sample_batch(task_a, 16, RngStream(3, 4))
    np.testing.assert_array_equal(batch.inputs, again.inputs)


def test_ordered_batches_wrap_around():
    task_a, _ = make_tasks(seed=0, n_samples=512)
    batches = list(ordered_batches(task_a, 200, 3))
    assert [len(b) for b in batches] == [200, 200, 200]
    np.testing.assert_array_equal(batches[2].inputs[:112], task_a.inputs[400:])
    np.testing.assert_array_equal(batches[2].inputs[112:], task_a.inputs[:88])


def test_ordered_batches_requires_positive_count():
    task_a, _ = make_tasks(seed=0, n_samples=512)
    with pytest.raises(UsageError):
        list(ordered_batches(task_a, 8, 0))


def test_tasks_share_input_marginal():
    task_a, task_b = make_tasks(seed=5, n_samples=512)
    gap = np.abs(task_a.inputs.mean(axis=0) - task_b.inputs.mean(axis=0))
    assert np.all(gap < 0.05)
