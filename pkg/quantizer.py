# quantizer.py
"""
희소/밀집 가중치 분해와 4비트 균등 양자화.

  W = W_sparse ⊕ W_dense
  W_sparse: 마스크 위치의 값만 모은 k개 float (학습 대상)
  W_dense : 마스크 위치를 0으로 만든 나머지 → 행별 대칭 4비트 양자화 (고정)

4비트 코드는 [-7, 7] 범위를 쓰고(-8 미사용), 2의 보수 니블 두 개를 한 바이트에
낮은 니블부터 행 우선 순서로 담습니다.
"""
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from errors import IntegrityError, NumericError, StructuralError
from mlp_model import Batch, LossKind, MlpModel
from optimizer import PackedParams
from sensitivity_analyzer import SparseMask

CODE_MAX = 7


@dataclass
class QuantizedTensor:
    codes: np.ndarray        # uint8, 바이트당 코드 2개
    scales: np.ndarray       # 행별 float64
    shape: Tuple[int, ...]

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8).reshape(-1)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(-1)
        if len(self.shape) != 2:
            raise StructuralError(f"양자화 텐서는 2차원이어야 합니다: {self.shape}")
        if self.scales.size != self.shape[0]:
            raise StructuralError(f"행 스케일 {self.scales.size}개 != 행 수 {self.shape[0]}")
        if self.codes.size != (self.shape[0] * self.shape[1] + 1) // 2:
            raise StructuralError(f"코드 바이트 수 {self.codes.size}가 형상 {self.shape}과 맞지 않습니다.")
        codes = self.unpacked().reshape(-1)
        bad = np.flatnonzero(np.abs(codes) > CODE_MAX)
        if bad.size:
            raise IntegrityError(f"4비트 코드 {int(codes[bad[0]])}가 [-{CODE_MAX}, {CODE_MAX}] 범위를 벗어났습니다 (위치 {int(bad[0])}).")

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    def unpacked(self) -> np.ndarray:
        return unpack_nibbles(self.codes, self.size).reshape(self.shape)


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    nibbles = (np.asarray(codes, dtype=np.int8).reshape(-1).astype(np.uint8)) & 0x0F
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(0))
    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, count: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    nibbles = np.empty(packed.size * 2, dtype=np.int8)
    nibbles[0::2] = (packed & 0x0F).astype(np.int8)
    nibbles[1::2] = (packed >> 4).astype(np.int8)
    nibbles[nibbles >= 8] -= 16
    return nibbles[:count]


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_uniform4(dense: np.ndarray) -> QuantizedTensor:
    """행별 대칭 반올림 양자화. scale = max|w_row| / 7 (0행이면 1)."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2:
        raise StructuralError(f"2차원 가중치만 양자화합니다: {dense.shape}")
    if not np.isfinite(dense).all():
        bad = dense[~np.isfinite(dense)]
        raise NumericError("유한하지 않은 값은 양자화할 수 없습니다", first_bad=float(bad[0]))
    amax = np.abs(dense).max(axis=1)
    scales = np.where(amax > 0, amax / CODE_MAX, 1.0)
    codes = np.clip(_round_half_away(dense / scales[:, None]), -CODE_MAX, CODE_MAX).astype(np.int8)
    return QuantizedTensor(pack_nibbles(codes), scales, dense.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.unpacked().astype(np.float64) * q.scales[:, None]


def decompose(W: np.ndarray, mask_layer) -> Tuple[np.ndarray, np.ndarray]:
    """W → (마스크 위치 값들, 마스크 위치를 0으로 만든 dense)."""
    W = np.asarray(W, dtype=np.float64)
    idx = np.asarray(mask_layer, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= W.size):
        raise StructuralError(f"마스크 인덱스가 범위 [0, {W.size})를 벗어났습니다.")
    flat = W.reshape(-1)
    sparse_values = flat[idx].copy()
    dense = flat.copy()
    dense[idx] = 0.0
    return sparse_values, dense.reshape(W.shape)


def reconstruct(sparse_values: np.ndarray, mask_layer, dense: np.ndarray) -> np.ndarray:
    """dense의 마스크 위치에 sparse_values를 채워 넣습니다 (분해의 역연산)."""
    out = np.array(dense, dtype=np.float64)
    out.reshape(-1)[np.asarray(mask_layer, dtype=np.int64)] = sparse_values
    return out


@dataclass
class DecomposedLayer:
    """
    한 레이어의 분해 결과. dense_q가 있으면 양자화된 것이고,
    없으면 dense(float) 그대로입니다 (편향, 또는 남는 좌표가 없는 레이어).
    """
    name: str
    shape: Tuple[int, ...]
    sparse_values: np.ndarray
    sparse_layout: np.ndarray
    dense_q: Optional[QuantizedTensor] = None
    dense: Optional[np.ndarray] = None
    mean_error: float = 0.0
    max_error: float = 0.0

    def __post_init__(self):
        if (self.dense_q is None) == (self.dense is None):
            raise StructuralError("dense_q와 dense 중 정확히 하나가 필요합니다", layer=self.name)
        self._frozen = dequantize(self.dense_q) if self.dense_q is not None else np.asarray(self.dense)
        if self._frozen.shape != tuple(self.shape):
            raise StructuralError(f"dense 형상 {self._frozen.shape} != {self.shape}", layer=self.name)

    @property
    def quantized(self) -> bool:
        return self.dense_q is not None

    @property
    def frozen_dense(self) -> np.ndarray:
        return self._frozen

    def max_scale(self) -> float:
        return float(self.dense_q.scales.max()) if self.quantized else 0.0

    def reconstruct(self, values: Optional[np.ndarray] = None) -> np.ndarray:
        values = self.sparse_values if values is None else values
        out = self._frozen.copy()
        flat = out.reshape(-1)
        flat[self.sparse_layout] += values
        return out


class _ReconstructedWeights(Mapping):
    """압축 값 벡터로부터 레이어 가중치를 요청 시점에 복원하는 뷰."""

    def __init__(self, decomposed: "DecomposedModel", values: np.ndarray):
        self.decomposed = decomposed
        self.values = values
        self.slices = decomposed.layout.layer_slices()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.decomposed.layers[name].reconstruct(self.values[self.slices[name]])

    def __iter__(self):
        return iter(self.decomposed.layers)

    def __len__(self) -> int:
        return len(self.decomposed.layers)


class DecomposedModel:
    """
    밀집 부분을 고정한 모델. 학습은 압축 값(PackedParams)만 바꿉니다.
    quantize=False면 dense를 float 그대로 고정합니다 (fixed-mask와 같은 궤적 검증용).
    """

    def __init__(self, model: MlpModel, layers: Dict[str, DecomposedLayer], layout: SparseMask):
        layout.check_shapes({name: layer.frozen_dense for name, layer in layers.items()})
        self.model = model
        self.layers = {name: layers[name] for name in sorted(layers)}
        self.layout = layout

    @classmethod
    def from_params(cls, model: MlpModel, params: Mapping, mask: SparseMask,
                    quantize: bool = True) -> "DecomposedModel":
        model.validate(params)
        mask.check_shapes(params)
        layers = {}
        for name in mask.names:
            W = np.asarray(params[name], dtype=np.float64)
            idx = mask.indices(name)
            values, dense = decompose(W, idx)
            has_remainder = idx.size < W.size
            if quantize and W.ndim == 2 and has_remainder:
                q = quantize_uniform4(dense)
                err = np.abs(dense - dequantize(q))
                layers[name] = DecomposedLayer(name, W.shape, values, idx, dense_q=q,
                                               mean_error=float(err.mean()), max_error=float(err.max()))
            else:
                layers[name] = DecomposedLayer(name, W.shape, values, idx, dense=dense)
        return cls(model, layers, mask)

    def check_layout(self, layout: SparseMask) -> None:
        if not self.layout.same_selection(layout):
            raise StructuralError("압축 값의 레이아웃이 고정 모델의 마스크와 다릅니다.")

    def packed(self) -> PackedParams:
        return PackedParams(np.concatenate([self.layers[n].sparse_values for n in self.layout.names]),
                            self.layout)

    def weights(self, values: np.ndarray) -> Mapping:
        return _ReconstructedWeights(self, np.asarray(values, dtype=np.float64))

    def loss_at_values(self, values: np.ndarray, batch: Batch, loss: LossKind) -> float:
        return self.model.forward_loss(batch, loss, self.weights(values))

    def with_values(self, values: np.ndarray) -> "DecomposedModel":
        layers = {}
        for name, piece in self.layout.layer_slices().items():
            layer = self.layers[name]
            layers[name] = DecomposedLayer(layer.name, layer.shape, np.array(values[piece]),
                                           layer.sparse_layout, layer.dense_q,
                                           None if layer.quantized else layer.dense,
                                           layer.mean_error, layer.max_error)
        return DecomposedModel(self.model, layers, self.layout)

    def error_report(self) -> pd.DataFrame:
        """레이어별 양자화 오차 (평균/최대 |w − dequant|, 최대 행 스케일)."""
        rows = [{
            "layer": name,
            "quantized": layer.quantized,
            "k": int(layer.sparse_layout.size),
            "mean_error": layer.mean_error,
            "max_error": layer.max_error,
            "max_scale": layer.max_scale(),
        } for name, layer in self.layers.items()]
        return pd.DataFrame(rows, columns=["layer", "quantized", "k", "mean_error", "max_error", "max_scale"])
