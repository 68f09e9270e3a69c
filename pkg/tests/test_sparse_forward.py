import numpy as np
import pytest

from errors import StructuralError, UsageError
from mlp_model import MlpModel
from quantizer import DecomposedModel, dequantize, quantize_uniform4
from rng_stream import RngStream
from sensitivity_analyzer import count_for_fraction, random_mask
from sparse_forward import (BENCH_COLUMNS, bench_crossover, bench_step_timing, forward_decomposed,
                            forward_sparse_add, forward_sparse_addmm, relative_difference,
                            sparse_csr)


def _instance(s, rows, cols, sparsity, batch):
    W = s.standard_normal(rows * cols).reshape(rows, cols)
    k = count_for_fraction(1.0 - sparsity, rows * cols)
    layout = np.sort(np.argsort(s.uniform(rows * cols), kind="stable")[:k])
    values = W.reshape(-1)[layout].copy()
    dense = W.copy()
    dense.reshape(-1)[layout] = 0.0
    x = s.standard_normal(cols * batch).reshape(cols, batch)
    return quantize_uniform4(dense), values, layout, x


def test_forward_paths_agree_with_dense():
    s = RngStream(60, 0)
    sparsities = (0.9, 0.99, 0.999)
    for trial in range(1000):
        rows, cols = 10 + trial % 40, 10 + (trial * 7) % 50
        q, values, layout, x = _instance(s, rows, cols, sparsities[trial % 3], 1 + trial % 4)
        full = dequantize(q)
        full.reshape(-1)[layout] = values
        reference = full @ x
        assert relative_difference(forward_sparse_add(q, values, layout, x), reference) <= 1e-9
        assert relative_difference(forward_sparse_addmm(q, values, layout, x), reference) <= 1e-9


def test_vector_input():
    s = RngStream(61, 0)
    q, values, layout, x = _instance(s, 8, 5, 0.9, 1)
    out = forward_sparse_addmm(q, values, layout, x[:, 0])
    assert out.shape == (8,)
    np.testing.assert_allclose(out, forward_sparse_add(q, values, layout, x[:, 0]), rtol=1e-12)


def test_csr_matches_scatter():
    layout = np.array([1, 4, 5])
    matrix = sparse_csr(np.array([1.0, 2.0, 3.0]), layout, (2, 3)).toarray()
    np.testing.assert_array_equal(matrix, [[0.0, 1.0, 0.0], [0.0, 2.0, 3.0]])


def test_shape_checks():
    q = quantize_uniform4(np.ones((3, 4)))
    with pytest.raises(StructuralError):
        forward_sparse_add(q, [1.0], [0], np.ones(5))
    with pytest.raises(StructuralError):
        forward_sparse_addmm(q, [1.0, 2.0], [0], np.ones(4))
    with pytest.raises(StructuralError):
        forward_sparse_add(q, [1.0], [12], np.ones(4))


def test_forward_decomposed_matches_model_view():
    model = MlpModel.initialize([3, 6, 4, 2], "relu", RngStream(62, 0))
    mask = random_mask(model.params, 0.1, RngStream(63, 0))
    decomposed = DecomposedModel.from_params(model, model.params, mask)
    inputs = RngStream(64, 0).standard_normal(15).reshape(5, 3)
    expected = model.forward(inputs, decomposed.weights(decomposed.packed().values))
    for path in ("sparse_add", "sparse_addmm"):
        np.testing.assert_allclose(forward_decomposed(decomposed, inputs, path=path), expected,
                                   rtol=1e-9, atol=1e-12)
    with pytest.raises(UsageError):
        forward_decomposed(decomposed, inputs, path="dense")


def test_bench_report_is_complete():
    frame = bench_crossover([(16, 16), (32, 8)], [1, 4], [0.9, 0.99], repeats=3, warmup=0)
    assert list(frame.columns) == BENCH_COLUMNS + ["spread"]
    assert len(frame) == 2 * 2 * 2 * 2
    cells = frame.groupby(["rows", "cols", "batch", "sparsity"])["path"].apply(set)
    assert all(paths == {"sparse_add", "sparse_addmm"} for paths in cells)
    assert (frame["median_us"] > 0).all()


def test_bench_requires_repeats():
    with pytest.raises(UsageError):
        bench_crossover([(4, 4)], [1], [0.9], repeats=2)


def test_step_timing_columns():
    frame = bench_step_timing([1000, 10_000], fraction=0.01, repeats=3)
    assert list(frame.columns) == ["d", "k", "full_us", "packed_us", "ratio"]
    assert list(frame["k"]) == [10, 100]
