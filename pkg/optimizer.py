# optimizer.py
"""
SPSA 기반 영차(ZO) 기울기 추정과 ZO-SGD 계열 업데이트.

섭동은 파라미터를 직접 바꾸지 않고, forward가 레이어를 조회하는 순간
W + coef·z̄ 를 계산하는 지연(lazy) 뷰로 적용합니다. 그래서 추정 전후로
파라미터가 비트 단위로 그대로이고, z̄는 레이어 크기 임시 배열로만 존재합니다.
"""
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import optuna

from errors import IntegrityError, NumericError, StructuralError, UsageError
from mlp_model import Batch, LossKind
from param_store import ParamStore
from rng_stream import RngStream, StreamRecord
from sensitivity_analyzer import SparseMask

# Optuna 로그 레벨 설정 (너무 많은 로그 방지)
optuna.logging.set_verbosity(optuna.logging.WARNING)

MASK_MODES = ("full", "fixed-mask", "dynamic-mask", "packed")
DRAW_MODES = ("compact", "full")
DEFAULT_EPS = 1e-3


@dataclass
class ZoConfig:
    """
    ZO 학습 하이퍼파라미터.
      draws: "compact"는 마스크된 좌표 수(k)만큼만 뽑아 레이아웃 순서로 배치,
             "full"은 d개를 뽑아 마스크를 곱합니다.
    """
    eps: float = DEFAULT_EPS
    lr: float = 1e-2
    steps: int = 1000
    batch_size: int = 16
    mask_mode: str = "fixed-mask"
    seed: int = 0
    draws: str = "compact"
    debug_checksum: bool = False
    record_timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.eps > 0:
            raise UsageError(f"eps는 0보다 커야 합니다: {self.eps}")
        if not self.lr > 0:
            raise UsageError(f"lr은 0보다 커야 합니다: {self.lr}")
        if self.steps < 1:
            raise UsageError(f"steps는 1 이상이어야 합니다: {self.steps}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size는 1 이상이어야 합니다: {self.batch_size}")
        if self.mask_mode not in MASK_MODES:
            raise UsageError(f"mask_mode는 {MASK_MODES} 중 하나여야 합니다: {self.mask_mode}")
        if self.draws not in DRAW_MODES:
            raise UsageError(f"draws는 {DRAW_MODES} 중 하나여야 합니다: {self.draws}")


@dataclass(frozen=True)
class PerturbationRecord:
    """z̄를 다시 만들기 위한 기록: 스트림 위치 + 마스크 (+ 추출 방식)."""
    stream: StreamRecord
    mask: Optional[SparseMask] = None
    compact: bool = True

    def n_draws(self, shapes: Dict[str, Tuple[int, ...]]) -> int:
        if self.mask is not None and self.compact:
            return self.mask.k
        return int(sum(np.prod(shape) for shape in shapes.values()))


class DirectionSource:
    """레이어 이름 → z̄ 레이어. 기록에서 위치 기반으로 다시 뽑습니다 (스트림 상태 불변)."""

    def __init__(self, ref: Union[ParamStore, PerturbationRecord], shapes: Dict[str, Tuple[int, ...]]):
        self.ref = ref
        self.shapes = {name: tuple(shapes[name]) for name in sorted(shapes)}
        if isinstance(ref, PerturbationRecord):
            if ref.mask is not None and ref.mask.shapes != self.shapes:
                raise StructuralError("마스크와 파라미터의 레이어 구성이 다릅니다.")
            self._stream = RngStream.at(ref.stream)
            self._offsets, pos = {}, ref.stream.counter
            for name, shape in self.shapes.items():
                self._offsets[name] = pos
                if ref.mask is not None and ref.compact:
                    pos += ref.mask.indices(name).size
                else:
                    pos += int(np.prod(shape))

    def layer(self, name: str) -> np.ndarray:
        ref = self.ref
        if isinstance(ref, ParamStore):
            return ref[name]
        shape = self.shapes[name]
        size = int(np.prod(shape))
        if ref.mask is None:
            return self._stream.normal_at(self._offsets[name], size).reshape(shape)
        idx = ref.mask.indices(name)
        if ref.compact:
            z = np.zeros(size)
            z[idx] = self._stream.normal_at(self._offsets[name], idx.size)
            return z.reshape(shape)
        z = self._stream.normal_at(self._offsets[name], size).reshape(shape)
        return np.where(ref.mask.boolean(name), z, 0.0)

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.shapes:
            yield name, self.layer(name)

    def materialize(self) -> ParamStore:
        return ParamStore({name: z for name, z in self})


class PerturbedParams(Mapping):
    """base + coef·z̄ 를 레이어 단위로 요청 시점에 계산하는 읽기 전용 뷰."""

    def __init__(self, base: Mapping, direction: DirectionSource, coef: float):
        self.base = base
        self.direction = direction
        self.coef = float(coef)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.base[name] + self.coef * self.direction.layer(name)

    def __iter__(self):
        return iter(self.base)

    def __len__(self) -> int:
        return len(self.base)


@dataclass
class SpsaEstimate:
    """ĝ = scale · z̄. perturb_ref는 z̄ 자체(ParamStore) 또는 재생 기록입니다."""
    scale: float
    perturb_ref: Union[ParamStore, PerturbationRecord]
    loss_plus: float = float("nan")
    loss_minus: float = float("nan")

    @property
    def loss(self) -> float:
        return 0.5 * (self.loss_plus + self.loss_minus)

    def direction(self, shapes: Dict[str, Tuple[int, ...]]) -> DirectionSource:
        return DirectionSource(self.perturb_ref, shapes)

    def materialize(self, shapes: Dict[str, Tuple[int, ...]]) -> ParamStore:
        """전체 추정 벡터 ĝ (검증/분석용)."""
        return ParamStore({name: self.scale * z for name, z in self.direction(shapes)})


def _shapes_of(params: Mapping) -> Dict[str, Tuple[int, ...]]:
    return {name: tuple(np.shape(params[name])) for name in sorted(params)}


def _check_same_structure(shapes: Dict[str, Tuple[int, ...]], other: Mapping) -> None:
    if sorted(other) != list(shapes):
        missing = sorted(set(other) ^ set(shapes))
        raise StructuralError("방향 벡터와 파라미터의 레이어 구성이 다릅니다", layer=missing[0])
    for name, shape in shapes.items():
        if tuple(np.shape(other[name])) != shape:
            raise StructuralError(f"방향 형상 {np.shape(other[name])} != {shape}", layer=name)


def _difference_quotient(model, params: Mapping, batch: Batch, loss: LossKind,
                         direction: DirectionSource, eps: float) -> Tuple[float, float, float]:
    if not eps > 0:
        raise UsageError(f"eps는 0보다 커야 합니다: {eps}")
    loss_plus = model.loss_at(PerturbedParams(params, direction, eps), batch, loss)
    loss_minus = model.loss_at(PerturbedParams(params, direction, -eps), batch, loss)
    if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
        raise NumericError("섭동 지점의 손실이 유한하지 않습니다",
                           loss_plus=loss_plus, loss_minus=loss_minus)
    return (loss_plus - loss_minus) / (2.0 * eps), loss_plus, loss_minus


def draw_direction(stream: RngStream, shapes: Dict[str, Tuple[int, ...]],
                   mask: Optional[SparseMask] = None, compact: bool = True) -> ParamStore:
    """z̄를 실체화해서 뽑습니다. 스트림은 실제 소비한 만큼 전진합니다."""
    record = PerturbationRecord(stream.state(), mask, compact)
    z = DirectionSource(record, shapes).materialize()
    stream.skip(record.n_draws(shapes))
    return z


def spsa_estimate(model, params: Mapping, batch: Batch, loss: LossKind,
                  z: ParamStore, eps: float = DEFAULT_EPS) -> SpsaEstimate:
    """(f(w+εz) − f(w−εz)) / (2ε) · z. params는 바뀌지 않습니다."""
    shapes = _shapes_of(params)
    _check_same_structure(shapes, z)
    scale, plus, minus = _difference_quotient(model, params, batch, loss,
                                              DirectionSource(z, shapes), eps)
    return SpsaEstimate(scale, z, plus, minus)


def masked_spsa(model, params: Mapping, batch: Batch, loss: LossKind, stream: RngStream,
                mask: Optional[SparseMask], eps: float = DEFAULT_EPS,
                compact: bool = True) -> SpsaEstimate:
    """z̄ = z ⊙ m 로 섭동한 SPSA. z̄는 저장하지 않고 스트림 기록만 남깁니다."""
    shapes = _shapes_of(params)
    if mask is not None:
        mask.check_shapes(params)
    record = PerturbationRecord(stream.state(), mask, compact)
    scale, plus, minus = _difference_quotient(model, params, batch, loss,
                                              DirectionSource(record, shapes), eps)
    stream.skip(record.n_draws(shapes))
    return SpsaEstimate(scale, record, plus, minus)


def zo_sgd_step(params: ParamStore, estimate: SpsaEstimate, lr: float) -> ParamStore:
    """w ← w − η·scale·z̄ (제자리). store_axpy(params, −η·scale, z̄)와 같은 연산 순서입니다."""
    if not lr > 0:
        raise UsageError(f"lr은 0보다 커야 합니다: {lr}")
    alpha = -float(lr) * float(estimate.scale)
    for name, z in estimate.direction(params.shapes()):
        layer = params[name]
        layer += alpha * z
    return params


def sensitive_zo_sgd_step(params: ParamStore, model, batch: Batch, loss: LossKind,
                          stream: RngStream, mask: Optional[SparseMask],
                          config: ZoConfig) -> Tuple[ParamStore, SpsaEstimate]:
    """masked_spsa 다음 zo_sgd_step. 마스크 밖 좌표는 바뀌지 않습니다."""
    estimate = masked_spsa(model, params, batch, loss, stream, mask, config.eps,
                           compact=config.draws == "compact")
    return zo_sgd_step(params, estimate, config.lr), estimate


def seed_trick_step(params: ParamStore, model, batch: Batch, loss: LossKind,
                    stream_record: StreamRecord, mask: Optional[SparseMask],
                    config: ZoConfig, stream: RngStream) -> Tuple[ParamStore, SpsaEstimate]:
    """
    z̄를 한 번도 통째로 만들지 않는 스텝.
    두 번의 forward와 업데이트 모두 stream_record에서 레이어별로 z̄를 다시 생성합니다.
    stream은 이 스텝이 소비할 라이브 스트림이며, 기록과 위치가 다르면 IntegrityError.
    """
    if stream.state() != stream_record:
        raise IntegrityError(
            f"스트림 위치가 기록과 다릅니다: 기록={stream_record}, 현재={stream.state()}"
        )
    shapes = params.shapes()
    if mask is not None:
        mask.check_shapes(params)
    record = PerturbationRecord(stream_record, mask, config.draws == "compact")
    before = params.checksum() if config.debug_checksum else None
    scale, plus, minus = _difference_quotient(model, params, batch, loss,
                                              DirectionSource(record, shapes), config.eps)
    if before is not None and params.checksum() != before:
        raise IntegrityError("섭동 후 파라미터가 원래 값으로 복원되지 않았습니다.")
    stream.skip(record.n_draws(shapes))
    estimate = SpsaEstimate(scale, record, plus, minus)
    return zo_sgd_step(params, estimate, config.lr), estimate


def materialized_step(params: ParamStore, model, batch: Batch, loss: LossKind,
                      stream: RngStream, mask: Optional[SparseMask],
                      config: ZoConfig) -> Tuple[ParamStore, SpsaEstimate]:
    """z̄를 ParamStore로 실체화하는 기준 경로 (seed trick 검증용)."""
    z = draw_direction(stream, params.shapes(), mask, config.draws == "compact")
    estimate = spsa_estimate(model, params, batch, loss, z, config.eps)
    return zo_sgd_step(params, estimate, config.lr), estimate


# --- 압축(packed) 업데이트 ---
@dataclass
class PackedParams:
    """마스크된 k개 값과 그 위치(레이아웃)."""
    values: np.ndarray
    layout: SparseMask

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if self.layout.k < 1:
            raise UsageError("압축 파라미터에는 최소 1개의 좌표가 필요합니다 (k ≥ 1).")
        if self.values.size != self.layout.k:
            raise StructuralError(f"값 개수 {self.values.size} != 마스크 k {self.layout.k}")

    @classmethod
    def extract(cls, params: Mapping, layout: SparseMask) -> "PackedParams":
        layout.check_shapes(params)
        parts = [np.asarray(params[name]).ravel()[layout.indices(name)] for name in layout.names]
        return cls(np.concatenate(parts), layout)

    def scatter(self, base: Optional[Mapping] = None) -> ParamStore:
        """값을 제자리로 되돌린 ParamStore. base가 없으면 나머지는 0."""
        out = ParamStore()
        for name, piece in self.layout.layer_slices().items():
            shape = self.layout.shapes[name]
            flat = (np.zeros(int(np.prod(shape))) if base is None
                    else np.array(base[name], dtype=np.float64).reshape(-1))
            flat[self.layout.indices(name)] = self.values[piece]
            out[name] = flat.reshape(shape)
        return out

    def copy(self) -> "PackedParams":
        return PackedParams(self.values.copy(), self.layout)


def packed_step(packed: PackedParams, frozen_dense, batch: Batch, loss: LossKind,
                stream: RngStream, config: ZoConfig) -> Tuple[PackedParams, SpsaEstimate]:
    """
    k개 값만 섭동/갱신합니다 (z_k ~ N(0, I_k)). 나머지 가중치는 frozen_dense에 고정.
    compact 추출의 sensitive_zo_sgd_step과 같은 스트림이면 같은 궤적을 냅니다.
    """
    frozen_dense.check_layout(packed.layout)
    record = stream.state()
    z = stream.standard_normal(packed.layout.k)
    eps = config.eps
    loss_plus = frozen_dense.loss_at_values(packed.values + eps * z, batch, loss)
    loss_minus = frozen_dense.loss_at_values(packed.values + (-eps) * z, batch, loss)
    if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
        raise NumericError("섭동 지점의 손실이 유한하지 않습니다",
                           loss_plus=loss_plus, loss_minus=loss_minus)
    scale = (loss_plus - loss_minus) / (2.0 * eps)
    alpha = -float(config.lr) * scale
    updated = PackedParams(packed.values + alpha * z, packed.layout)
    estimate = SpsaEstimate(scale, PerturbationRecord(record, packed.layout, True), loss_plus, loss_minus)
    return updated, estimate


# --- 학습률 ---
def guaranteed_lr(L: float, k: int) -> float:
    """수렴 보장 학습률 η = 1 / (L(k+2))."""
    if not L > 0 or k < 1:
        raise UsageError(f"L > 0, k ≥ 1 이어야 합니다: L={L}, k={k}")
    return 1.0 / (L * (k + 2))


def tune_learning_rate(run_with_lr: Callable[[float], float], grid: Sequence[float],
                       seed: int = 0) -> Tuple[float, float]:
    """
    Optuna 격자 탐색으로 검증 손실이 가장 낮은 학습률을 고릅니다.
    run_with_lr(lr)는 짧은 학습 후 검증 손실을 돌려줍니다. 발산하면 inf로 취급합니다.
    """
    grid = sorted(float(lr) for lr in grid)
    if not grid or any(lr <= 0 for lr in grid):
        raise UsageError(f"학습률 격자는 비어 있지 않은 양수 목록이어야 합니다: {grid}")

    def objective(trial):
        lr = trial.suggest_float("lr", grid[0], grid[-1])
        try:
            value = float(run_with_lr(lr))
        except NumericError:
            return float("inf")
        return value if np.isfinite(value) else float("inf")

    study = optuna.create_study(
        direction="minimize",
        sampler=optuna.samplers.GridSampler({"lr": grid}, seed=seed),
    )
    study.optimize(objective, n_trials=len(grid), show_progress_bar=False)

    # 동점이면 작은 학습률
    best = min(study.trials, key=lambda t: (t.value, t.params["lr"]))
    return best.params["lr"], best.value
