# mlp_model.py
"""
데스크 규모의 미분 가능한 모델(선형/MLP)과 정확한 역전파 오라클.

ZO 최적화기는 forward_loss만 사용하고, 민감도 점수와 검증은 backprop_grads를 사용합니다.
"""
from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import StructuralError, UsageError
from param_store import ParamStore
from rng_stream import RngStream


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "softmax-cross-entropy"


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"


@dataclass
class Batch:
    """입력 n×d_in 과 타깃 (회귀: n×d_out 실수, 분류: 길이 n 클래스 인덱스)."""
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        targets = np.asarray(self.targets)
        if np.issubdtype(targets.dtype, np.integer):
            self.targets = targets.astype(np.int64).reshape(-1)
        elif targets.ndim == 1:
            # 예제 1개짜리 배치면 행 벡터, 아니면 출력 1개짜리 열 벡터로 해석
            shape = (1, -1) if len(self.inputs) == 1 else (-1, 1)
            self.targets = targets.astype(np.float64).reshape(shape)
        else:
            self.targets = targets.astype(np.float64)
        if len(self.inputs) < 1:
            raise UsageError("배치에는 최소 1개의 예제가 필요합니다.")
        if len(self.targets) != len(self.inputs):
            raise StructuralError(f"입력 {len(self.inputs)}개와 타깃 {len(self.targets)}개가 다릅니다.")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def is_classification(self) -> bool:
        return self.targets.ndim == 1

    def take(self, indices: np.ndarray) -> "Batch":
        return Batch(self.inputs[indices], self.targets[indices])


def apply_activation(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def activation_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    if kind is Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def weight_name(i: int) -> str:
    return f"layer{i}.weight"


def bias_name(i: int) -> str:
    return f"layer{i}.bias"


class MlpModel:
    """
    완전연결 MLP. 마지막 레이어를 제외한 모든 레이어 뒤에 activation을 적용합니다.
    파라미터는 ParamStore에 "layer{i}.weight"(out×in) / "layer{i}.bias"(out) 로 등록됩니다.
    """

    def __init__(self, sizes: Sequence[int], activation: str = "tanh",
                 params: Optional[ParamStore] = None):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise StructuralError(f"레이어 크기 목록이 올바르지 않습니다: {list(sizes)}")
        self.sizes = [int(s) for s in sizes]
        self.activation = Activation(activation)
        if params is None:
            params = ParamStore({
                **{weight_name(i): np.zeros((o, n)) for i, (n, o) in enumerate(self._pairs())},
                **{bias_name(i): np.zeros(o) for i, (_, o) in enumerate(self._pairs())},
            })
        self.validate(params)
        self.params = params

    @classmethod
    def initialize(cls, sizes: Sequence[int], activation: str, stream: RngStream) -> "MlpModel":
        """가중치 ~ N(0, 1/fan_in), 편향 = 0. 레이어 순서대로 스트림을 소비합니다."""
        model = cls(sizes, activation)
        for i, (fan_in, fan_out) in enumerate(model._pairs()):
            draws = stream.standard_normal(fan_in * fan_out)
            model.params[weight_name(i)] = draws.reshape(fan_out, fan_in) / np.sqrt(fan_in)
        return model

    def _pairs(self) -> List[Tuple[int, int]]:
        return list(zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_outputs(self) -> int:
        return self.sizes[-1]

    def with_params(self, params: ParamStore) -> "MlpModel":
        return MlpModel(self.sizes, self.activation.value, params)

    def validate(self, params: Mapping) -> None:
        expected = ParamStore({
            **{weight_name(i): np.zeros((o, n)) for i, (n, o) in enumerate(self._pairs())},
            **{bias_name(i): np.zeros(o) for i, (_, o) in enumerate(self._pairs())},
        })
        expected.check_compatible(params)

    # --- forward ---
    def _layer(self, params: Mapping, i: int) -> Tuple[np.ndarray, np.ndarray]:
        n_in, n_out = self.sizes[i], self.sizes[i + 1]
        W, b = params[weight_name(i)], params[bias_name(i)]
        if W.shape != (n_out, n_in):
            raise StructuralError(f"가중치 형상 {W.shape} != {(n_out, n_in)}", layer=weight_name(i))
        if b.shape != (n_out,):
            raise StructuralError(f"편향 형상 {b.shape} != {(n_out,)}", layer=bias_name(i))
        return W, b

    def forward(self, inputs: np.ndarray, params: Optional[Mapping] = None) -> np.ndarray:
        """
        params에는 ParamStore뿐 아니라 레이어를 요청 시점에 계산하는 Mapping도 올 수 있습니다
        (섭동 뷰, 분해된 가중치 뷰). 레이어당 정확히 한 번씩만 조회합니다.
        """
        params = self.params if params is None else params
        h = np.asarray(inputs, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.sizes[0]:
            raise StructuralError(f"입력 형상 {h.shape}이 모델 입력 차원 {self.sizes[0]}과 맞지 않습니다.")
        for i in range(self.n_layers):
            W, b = self._layer(params, i)
            h = h @ W.T + b
            if i < self.n_layers - 1:
                h = apply_activation(self.activation, h)
        return h

    def _loss_and_grad_out(self, outputs: np.ndarray, batch: Batch,
                           loss: LossKind, need_grad: bool):
        loss = LossKind(loss)
        n = len(batch)
        if loss is LossKind.MSE:
            if batch.is_classification:
                raise UsageError("mse 손실에는 실수 타깃이 필요합니다.")
            if batch.targets.shape != outputs.shape:
                raise StructuralError(f"타깃 형상 {batch.targets.shape} != 출력 형상 {outputs.shape}")
            diff = outputs - batch.targets
            value = float(np.mean(diff ** 2))
            grad = 2.0 * diff / diff.size if need_grad else None
            return value, grad
        if not batch.is_classification:
            raise UsageError("cross-entropy 손실에는 클래스 인덱스 타깃이 필요합니다.")
        if batch.targets.min() < 0 or batch.targets.max() >= outputs.shape[1]:
            raise StructuralError(f"클래스 인덱스는 [0, {outputs.shape[1]}) 범위여야 합니다.")
        lse = logsumexp(outputs, axis=1)
        value = float(np.mean(lse - outputs[np.arange(n), batch.targets]))
        grad = None
        if need_grad:
            grad = np.exp(outputs - lse[:, None])
            grad[np.arange(n), batch.targets] -= 1.0
            grad /= n
        return value, grad

    def forward_loss(self, batch: Batch, loss: LossKind, params: Optional[Mapping] = None) -> float:
        outputs = self.forward(batch.inputs, params)
        value, _ = self._loss_and_grad_out(outputs, batch, loss, need_grad=False)
        return value

    def loss_at(self, params: Mapping, batch: Batch, loss: LossKind) -> float:
        """ZO 추정기가 쓰는 유일한 기본 연산: f(params; batch)."""
        return self.forward_loss(batch, loss, params)

    def backprop_grads(self, batch: Batch, loss: LossKind,
                       params: Optional[Mapping] = None) -> ParamStore:
        params = self.params if params is None else params
        h = batch.inputs
        if h.shape[1] != self.sizes[0]:
            raise StructuralError(f"입력 형상 {h.shape}이 모델 입력 차원 {self.sizes[0]}과 맞지 않습니다.")
        layer_inputs, pre_acts, weights = [], [], []
        for i in range(self.n_layers):
            W, b = self._layer(params, i)
            layer_inputs.append(h)
            z = h @ W.T + b
            pre_acts.append(z)
            weights.append(W)
            h = apply_activation(self.activation, z) if i < self.n_layers - 1 else z

        _, delta = self._loss_and_grad_out(h, batch, loss, need_grad=True)
        grads = ParamStore()
        for i in reversed(range(self.n_layers)):
            grads[weight_name(i)] = delta.T @ layer_inputs[i]
            grads[bias_name(i)] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ weights[i]) * activation_grad(self.activation, pre_acts[i - 1])
        return grads

    def predict_classes(self, inputs: np.ndarray, params: Optional[Mapping] = None) -> np.ndarray:
        return np.argmax(self.forward(inputs, params), axis=1)


def forward_loss(model: MlpModel, batch: Batch, loss: LossKind) -> float:
    return model.forward_loss(batch, loss)


def backprop_grads(model: MlpModel, batch: Batch, loss: LossKind) -> ParamStore:
    return model.backprop_grads(batch, loss)


def finite_difference_grads(model: MlpModel, batch: Batch, loss: LossKind,
                            h: float = 1e-5) -> ParamStore:
    """중앙 차분 기울기. 역전파 검증용 오라클이라 O(d)번 forward 합니다."""
    params = model.params.copy()
    grads = params.zeros_like()
    for name in params:
        flat = params[name].reshape(-1)
        out = grads[name].reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            f_plus = model.forward_loss(batch, loss, params)
            flat[j] = original - h
            f_minus = model.forward_loss(batch, loss, params)
            flat[j] = original
            out[j] = (f_plus - f_minus) / (2.0 * h)
    return grads
