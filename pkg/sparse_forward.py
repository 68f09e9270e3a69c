# sparse_forward.py
"""
분해된 레이어(양자화 dense + 희소 값)의 두 가지 forward 경로와 벤치마크.

  SparseAdd   : dense에 희소 값을 scatter-add 한 뒤 matmul 한 번 (큰 배치 학습에 유리)
  SparseAddMM : dense matmul + CSR 희소 행렬-벡터 곱 (배치 1 추론에 유리)

x는 (in,) 또는 (in, n) 이며 결과는 W·x 입니다.
"""
import time
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from threadpoolctl import threadpool_limits

from errors import NumericError, StructuralError, UsageError
from mlp_model import apply_activation
from quantizer import DecomposedModel, QuantizedTensor, dequantize, quantize_uniform4
from rng_stream import RngStream
from sensitivity_analyzer import count_for_fraction

PATHS = ("sparse_add", "sparse_addmm")
BENCH_COLUMNS = ["path", "rows", "cols", "batch", "sparsity", "median_us"]
EQUIVALENCE_RTOL = 1e-9

DenseLike = Union[QuantizedTensor, np.ndarray]


def _dense_matrix(dense_q: DenseLike) -> np.ndarray:
    if isinstance(dense_q, QuantizedTensor):
        return dequantize(dense_q)
    return np.asarray(dense_q, dtype=np.float64)


def _check_chain(W: np.ndarray, sparse_values: np.ndarray, sparse_layout: np.ndarray,
                 x: np.ndarray) -> None:
    if W.ndim != 2:
        raise StructuralError(f"가중치는 2차원이어야 합니다: {W.shape}")
    if x.shape[0] != W.shape[1]:
        raise StructuralError(f"입력 길이 {x.shape[0]} != 가중치 열 수 {W.shape[1]}")
    if sparse_values.size != sparse_layout.size:
        raise StructuralError(f"희소 값 {sparse_values.size}개 != 위치 {sparse_layout.size}개")
    if sparse_layout.size and (sparse_layout.min() < 0 or sparse_layout.max() >= W.size):
        raise StructuralError(f"희소 위치가 범위 [0, {W.size})를 벗어났습니다.")


def sparse_csr(sparse_values: np.ndarray, sparse_layout: np.ndarray,
               shape: Tuple[int, int]) -> csr_matrix:
    """평탄 인덱스 오름차순 = 행 우선 순서이므로 그대로 CSR 배열이 됩니다."""
    rows, cols = np.divmod(np.asarray(sparse_layout, dtype=np.int64), shape[1])
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=shape[0]))])
    return csr_matrix((np.asarray(sparse_values, dtype=np.float64), cols, indptr), shape=shape)


def forward_sparse_addmm(dense_q: DenseLike, sparse_values, sparse_layout, x) -> np.ndarray:
    """Dequantize(Q)·x + SparseMV(sparse, x)."""
    W = _dense_matrix(dense_q)
    x = np.asarray(x, dtype=np.float64)
    values = np.asarray(sparse_values, dtype=np.float64).reshape(-1)
    layout = np.asarray(sparse_layout, dtype=np.int64).reshape(-1)
    _check_chain(W, values, layout, x)
    out = W @ x
    if layout.size:
        out = out + sparse_csr(values, layout, W.shape) @ x
    return out


def forward_sparse_add(dense_q: DenseLike, sparse_values, sparse_layout, x) -> np.ndarray:
    """(Dequantize(Q) ⊕ scatter(sparse))·x."""
    W = _dense_matrix(dense_q).copy()
    x = np.asarray(x, dtype=np.float64)
    values = np.asarray(sparse_values, dtype=np.float64).reshape(-1)
    layout = np.asarray(sparse_layout, dtype=np.int64).reshape(-1)
    _check_chain(W, values, layout, x)
    flat = W.reshape(-1)
    flat[layout] += values
    return W @ x


FORWARD_PATHS: Dict[str, Callable] = {
    "sparse_add": forward_sparse_add,
    "sparse_addmm": forward_sparse_addmm,
}


def relative_difference(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(b)), np.finfo(np.float64).tiny)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / scale


def forward_decomposed(decomposed: DecomposedModel, inputs: np.ndarray,
                       values: Optional[np.ndarray] = None, path: str = "sparse_add") -> np.ndarray:
    """분해된 모델 전체 forward. 가중치는 path로, 편향은 복원값으로 더합니다."""
    if path not in FORWARD_PATHS:
        raise UsageError(f"path는 {PATHS} 중 하나여야 합니다: {path}")
    forward = FORWARD_PATHS[path]
    model = decomposed.model
    values = decomposed.packed().values if values is None else np.asarray(values, dtype=np.float64)
    slices = decomposed.layout.layer_slices()
    h = np.asarray(inputs, dtype=np.float64)
    for i in range(model.n_layers):
        w_layer = decomposed.layers[f"layer{i}.weight"]
        b_layer = decomposed.layers[f"layer{i}.bias"]
        dense = w_layer.dense_q if w_layer.quantized else w_layer.frozen_dense
        out = forward(dense, values[slices[w_layer.name]], w_layer.sparse_layout, h.T).T
        h = out + b_layer.reconstruct(values[slices[b_layer.name]])
        if i < model.n_layers - 1:
            h = apply_activation(model.activation, h)
    return h


# --- 벤치마크 ---
def _median_us(fn: Callable[[], np.ndarray], repeats: int, warmup: int) -> Tuple[float, float]:
    """(중앙값 µs, 상대 IQR). warm-up 반복은 제외합니다."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append((time.perf_counter_ns() - t0) / 1e3)
    times = np.asarray(times)
    median = float(np.median(times))
    q75, q25 = np.percentile(times, [75, 25])
    return median, float((q75 - q25) / median) if median > 0 else 0.0


def _bench_instance(rows: int, cols: int, batch: int, sparsity: float, stream: RngStream):
    W = stream.standard_normal(rows * cols).reshape(rows, cols)
    k = count_for_fraction(1.0 - sparsity, rows * cols) if sparsity < 1.0 else 0
    layout = np.sort(np.argsort(stream.uniform(rows * cols), kind="stable")[:k])
    values = W.reshape(-1)[layout].copy()
    dense = W.copy()
    dense.reshape(-1)[layout] = 0.0
    x = stream.standard_normal(cols * batch).reshape(cols, batch)
    return quantize_uniform4(dense), values, layout, x


def bench_crossover(sizes: Iterable[Tuple[int, int]], batch_grid: Sequence[int],
                    sparsity_grid: Sequence[float], repeats: int = 5, warmup: int = 2,
                    seed: int = 0) -> pd.DataFrame:
    """
    (경로, 크기, 배치, 희소도) 셀마다 중앙값 시간을 잽니다.
    시간을 재기 전에 두 경로의 출력이 1e-9 상대 오차 안에서 같은지 먼저 확인합니다.
    BLAS는 단일 스레드로 고정합니다.
    """
    if repeats < 3:
        raise UsageError(f"repeats는 3 이상이어야 합니다: {repeats}")
    stream = RngStream(seed, stream_id=0xBE4C)
    rows_out = []
    with threadpool_limits(limits=1):
        for rows, cols in sizes:
            for batch in batch_grid:
                for sparsity in sparsity_grid:
                    dense_q, values, layout, x = _bench_instance(rows, cols, batch, sparsity, stream)
                    outputs = {path: fn(dense_q, values, layout, x) for path, fn in FORWARD_PATHS.items()}
                    gap = relative_difference(outputs["sparse_add"], outputs["sparse_addmm"])
                    if gap > EQUIVALENCE_RTOL:
                        raise NumericError("두 forward 경로의 결과가 다릅니다",
                                           rows=rows, cols=cols, batch=batch, gap=gap)
                    for path, fn in FORWARD_PATHS.items():
                        median, spread = _median_us(lambda: fn(dense_q, values, layout, x), repeats, warmup)
                        rows_out.append({
                            "path": path, "rows": rows, "cols": cols, "batch": batch,
                            "sparsity": sparsity, "median_us": median, "spread": spread,
                        })
    return pd.DataFrame(rows_out, columns=BENCH_COLUMNS + ["spread"])


def bench_step_timing(dims: Sequence[int], fraction: float = 1e-3, repeats: int = 5,
                      warmup: int = 1, seed: int = 0) -> pd.DataFrame:
    """
    섭동+업데이트 비용 비교: 전체 d 벡터 대 압축 k 벡터.
    forward는 제외하고, 가우시안 추출 + ±ε 섭동 + 업데이트만 잽니다.
    """
    stream = RngStream(seed, stream_id=0x57E9)
    rows = []

    def perturb_update(vector: np.ndarray) -> Callable[[], np.ndarray]:
        def run():
            z = stream.standard_normal(vector.size)
            plus = vector + 1e-3 * z
            minus = vector + (-1e-3) * z
            return vector + (-1e-2 * float(plus[0] - minus[0])) * z
        return run

    with threadpool_limits(limits=1):
        for d in dims:
            k = count_for_fraction(fraction, d)
            full_us, _ = _median_us(perturb_update(np.zeros(d)), repeats, warmup)
            packed_us, _ = _median_us(perturb_update(np.zeros(k)), repeats, warmup)
            rows.append({"d": d, "k": k, "full_us": full_us, "packed_us": packed_us,
                         "ratio": packed_us / full_us if full_us > 0 else float("nan")})
    return pd.DataFrame(rows, columns=["d", "k", "full_us", "packed_us", "ratio"])
