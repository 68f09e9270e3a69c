# sensitivity_analyzer.py
"""
민감도(경험적 Fisher 대각) 점수 계산과 희소 마스크 생성/분석.

마스크는 레이어별로 정렬된 평탄 인덱스 목록으로 표현합니다.
점수가 같은 좌표는 항상 평탄 인덱스가 작은 쪽을 먼저 고릅니다.
"""
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data_handler import ordered_batches
from errors import StructuralError, UndefinedCoverageError, UsageError
from mlp_model import Batch, LossKind, MlpModel
from param_store import ParamStore
from rng_stream import RngStream

MASK_SOURCES = ("task", "surrogate", "random", "outlier", "full")
SCOPES = ("per-layer", "global")
DEFAULT_SCORE_BATCHES = 8
DECADES = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)

# fraction·d 의 부동소수 오차(예: 0.07*100 = 7.000000000000001)로 ceil이 1 커지는 것을 막습니다.
_CEIL_TOL = 1e-9


def count_for_fraction(fraction: float, size: int) -> int:
    """⌈fraction·size⌉ (1 이상 size 이하)."""
    check_fraction(fraction)
    return int(min(size, max(1, math.ceil(fraction * size - _CEIL_TOL))))


def check_fraction(fraction: float) -> None:
    if not (0.0 < float(fraction) <= 1.0):
        raise UsageError(f"fraction은 (0, 1] 범위여야 합니다: {fraction}")


@dataclass
class SensitivityScores:
    """좌표별 기울기 제곱의 배치 평균."""
    scores: ParamStore
    n_batches: int = 1

    def __post_init__(self):
        if self.n_batches < 1:
            raise UsageError(f"n_batches는 1 이상이어야 합니다: {self.n_batches}")
        for name in self.scores:
            if (self.scores[name] < 0).any():
                raise UsageError("민감도 점수는 음수가 될 수 없습니다.")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.scores[name]

    def __iter__(self):
        return iter(self.scores)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return self.scores.shapes()

    def total(self) -> float:
        return float(sum(self.scores[name].sum() for name in self.scores))

    def scaled(self, alpha: float) -> "SensitivityScores":
        return SensitivityScores(
            ParamStore({name: alpha * self.scores[name] for name in self.scores}), self.n_batches
        )


@dataclass
class SparseMask:
    """
    레이어별 선택 인덱스. shapes에는 모델의 모든 레이어가 들어가며,
    선택이 없는 레이어는 빈 배열을 가집니다.
    """
    layers: Dict[str, np.ndarray]
    shapes: Dict[str, Tuple[int, ...]]
    source: str = "task"
    created_at_step: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.source not in MASK_SOURCES:
            raise UsageError(f"알 수 없는 마스크 출처입니다: {self.source}")
        unknown = sorted(set(self.layers) - set(self.shapes))
        if unknown:
            raise StructuralError("모델에 없는 레이어입니다", layer=unknown[0])
        self.shapes = {name: tuple(int(s) for s in self.shapes[name]) for name in sorted(self.shapes)}
        normalized = {}
        for name, shape in self.shapes.items():
            idx = np.unique(np.asarray(self.layers.get(name, []), dtype=np.int64))
            size = int(np.prod(shape))
            if idx.size and (idx[0] < 0 or idx[-1] >= size):
                raise StructuralError(f"인덱스가 범위 [0, {size})를 벗어났습니다", layer=name)
            normalized[name] = idx
        self.layers = normalized

    @property
    def names(self) -> List[str]:
        return list(self.shapes)

    @property
    def k(self) -> int:
        return int(sum(idx.size for idx in self.layers.values()))

    @property
    def total_dim(self) -> int:
        return int(sum(np.prod(shape) for shape in self.shapes.values()))

    @property
    def fraction(self) -> float:
        return self.k / self.total_dim

    def indices(self, name: str) -> np.ndarray:
        return self.layers[name]

    def layer_slices(self) -> Dict[str, slice]:
        """길이 k인 압축 벡터 안에서 각 레이어가 차지하는 구간 (이름 순서)."""
        out, pos = {}, 0
        for name in self.shapes:
            n = self.layers[name].size
            out[name] = slice(pos, pos + n)
            pos += n
        return out

    def boolean(self, name: str) -> np.ndarray:
        flat = np.zeros(int(np.prod(self.shapes[name])), dtype=bool)
        flat[self.layers[name]] = True
        return flat.reshape(self.shapes[name])

    def apply(self, store: Mapping) -> ParamStore:
        """m ⊙ store."""
        self.check_shapes(store)
        return ParamStore({name: np.where(self.boolean(name), store[name], 0.0) for name in self.shapes})

    def check_shapes(self, store: Mapping) -> None:
        names = sorted(store)
        if names != list(self.shapes):
            missing = sorted(set(names) ^ set(self.shapes))
            raise StructuralError("마스크와 파라미터의 레이어 구성이 다릅니다", layer=missing[0])
        for name in names:
            if tuple(np.shape(store[name])) != self.shapes[name]:
                raise StructuralError(
                    f"마스크 형상 {self.shapes[name]} != 파라미터 형상 {np.shape(store[name])}", layer=name
                )

    def is_full(self) -> bool:
        return self.k == self.total_dim

    def same_selection(self, other: "SparseMask") -> bool:
        return self.shapes == other.shapes and all(
            np.array_equal(self.layers[name], other.layers[name]) for name in self.shapes
        )

    def to_dict(self, seed: Optional[int] = None) -> dict:
        return {
            "version": 1,
            "source": self.source,
            "fraction": self.fraction,
            "k": self.k,
            "seed": self.seed if seed is None else seed,
            "created_at_step": self.created_at_step,
            "layers": {name: [int(i) for i in self.layers[name]] for name in self.shapes},
        }

    @classmethod
    def from_dict(cls, doc: dict, shapes: Dict[str, Tuple[int, ...]]) -> "SparseMask":
        if doc.get("version") != 1:
            raise StructuralError(f"지원하지 않는 마스크 파일 버전입니다: {doc.get('version')}")
        for name, idx in doc["layers"].items():
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise StructuralError("인덱스는 오름차순이며 중복이 없어야 합니다", layer=name)
        mask = cls(
            layers={name: np.asarray(idx, dtype=np.int64) for name, idx in doc["layers"].items()},
            shapes=shapes,
            source=doc["source"],
            created_at_step=int(doc.get("created_at_step", 0)),
            seed=doc.get("seed"),
        )
        if mask.k != int(doc["k"]):
            raise StructuralError(f"마스크 k({doc['k']})가 인덱스 수({mask.k})와 다릅니다.")
        return mask

    @classmethod
    def full(cls, shapes: Dict[str, Tuple[int, ...]], source: str = "full") -> "SparseMask":
        return cls({name: np.arange(int(np.prod(shape))) for name, shape in shapes.items()},
                   shapes, source=source)


@dataclass
class CoverageCurve:
    fractions: np.ndarray
    cumvals: np.ndarray
    cumulative: np.ndarray = field(repr=False, default=None)  # 좌표 단위 전체 누적 합 (정규화)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fraction": self.fractions, "cumval": self.cumvals})

    def at(self, fraction: float) -> float:
        return float(self.cumulative[count_for_fraction(fraction, self.cumulative.size) - 1])


# --- 점수 ---
def scores_from_gradients(gradients: Sequence[Mapping]) -> SensitivityScores:
    """기울기 목록 → 좌표별 제곱 평균. 배치 순서대로 더한 뒤 한 번 나눕니다."""
    if not gradients:
        raise UsageError("기울기가 최소 1개 필요합니다.")
    first = gradients[0]
    total = ParamStore({name: np.zeros(np.shape(first[name])) for name in first})
    for grads in gradients:
        total.check_compatible(grads)
        for name in total:
            layer = total[name]
            layer += np.square(grads[name])
    n = len(gradients)
    return SensitivityScores(ParamStore({name: total[name] / n for name in total}), n)


def score_sensitivity(model: MlpModel, dataset: Batch, loss: LossKind,
                      n_batches: int = DEFAULT_SCORE_BATCHES, batch_size: int = 16,
                      params: Optional[Mapping] = None) -> SensitivityScores:
    """데이터 순서대로 자른 n_batches개 배치에서 역전파 기울기 제곱을 평균합니다."""
    if n_batches < 1:
        raise UsageError(f"n_batches는 1 이상이어야 합니다: {n_batches}")
    grads = [model.backprop_grads(batch, loss, params)
             for batch in ordered_batches(dataset, batch_size, n_batches)]
    return scores_from_gradients(grads)


# --- 마스크 선택 ---
def _top_indices(values: np.ndarray, count: int) -> np.ndarray:
    # 내림차순 안정 정렬: 동점이면 낮은 인덱스가 앞에 옵니다.
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:count])


def _select_by_values(values: Mapping, fraction: Optional[float], scope: str,
                      source: str, k: Optional[int] = None) -> SparseMask:
    if scope not in SCOPES:
        raise UsageError(f"scope는 {SCOPES} 중 하나여야 합니다: {scope}")
    if fraction is not None:
        check_fraction(fraction)
    elif k is None:
        raise UsageError("fraction 또는 k 중 하나는 지정해야 합니다.")
    names = sorted(values)
    shapes = {name: tuple(np.shape(values[name])) for name in names}
    flat = {name: np.asarray(values[name], dtype=np.float64).ravel() for name in names}
    if scope == "per-layer":
        if k is not None:
            raise UsageError("per-layer 범위에서는 k 대신 fraction을 사용하세요.")
        layers = {name: _top_indices(flat[name], count_for_fraction(fraction, flat[name].size))
                  for name in names}
        return SparseMask(layers, shapes, source=source)

    pooled = np.concatenate([flat[name] for name in names])
    if k is None:
        k = count_for_fraction(fraction, pooled.size)
    if not 1 <= k <= pooled.size:
        raise UsageError(f"k는 1 이상 {pooled.size} 이하여야 합니다: {k}")
    chosen = _top_indices(pooled, k)
    layers, offset = {}, 0
    for name in names:
        size = flat[name].size
        inside = chosen[(chosen >= offset) & (chosen < offset + size)]
        layers[name] = inside - offset
        offset += size
    return SparseMask(layers, shapes, source=source)


def select_topk(scores: SensitivityScores, fraction: Optional[float] = None,
                scope: str = "per-layer", source: str = "task",
                k: Optional[int] = None) -> SparseMask:
    """
    점수가 큰 좌표를 선택합니다.
      - per-layer: 레이어마다 ⌈fraction·d_layer⌉개
      - global: 전체에서 ⌈fraction·d⌉개 (또는 k개)
    """
    values = scores.scores if isinstance(scores, SensitivityScores) else scores
    return _select_by_values(values, fraction, scope, source, k)


def random_mask(shapes, fraction: float, stream: RngStream) -> SparseMask:
    """
    레이어마다 ⌈fraction·d_layer⌉개를 비복원 균등 추출합니다.
    레이어 이름 순서로 레이어당 d_layer개의 균등 표본을 소비합니다.
    """
    check_fraction(fraction)
    if isinstance(shapes, ParamStore):
        shapes = shapes.shapes()
    layers = {}
    for name in sorted(shapes):
        size = int(np.prod(shapes[name]))
        keys = stream.uniform(size)
        layers[name] = np.sort(np.argsort(keys, kind="stable")[:count_for_fraction(fraction, size)])
    return SparseMask(layers, dict(shapes), source="random", seed=stream.seed)


def outlier_mask(params: Mapping, fraction: float, scope: str = "per-layer") -> SparseMask:
    """|w|가 큰 좌표(가중치 이상치)를 선택합니다."""
    magnitudes = {name: np.abs(np.asarray(params[name])) for name in params}
    return _select_by_values(magnitudes, fraction, scope, source="outlier")


# --- 분석 ---
def _score_store(scores) -> Mapping:
    return scores.scores if isinstance(scores, SensitivityScores) else scores


def coverage_fraction(scores, mask: SparseMask) -> float:
    """c = Σ_{i∈mask} sᵢ / Σᵢ sᵢ."""
    store = _score_store(scores)
    mask.check_shapes(store)
    total, covered = 0.0, 0.0
    for name in mask.names:
        layer = np.asarray(store[name]).ravel()
        total += float(layer.sum())
        covered += float(layer[mask.indices(name)].sum())
    if total <= 0.0:
        raise UndefinedCoverageError("점수 합이 0이라 커버리지를 정의할 수 없습니다.")
    return min(1.0, covered / total)


def default_fraction_grid() -> np.ndarray:
    """10^-4 ~ 1 로그 간격 41점. 10의 거듭제곱 지점은 정확한 값으로 둡니다."""
    grid = 10.0 ** (np.arange(-40, 1) / 10.0)
    grid[::10] = DECADES
    return grid


def _cumulative(values: np.ndarray) -> np.ndarray:
    total = float(values.sum())
    if values.size == 0:
        raise UsageError("점수가 비어 있습니다.")
    if total <= 0.0:
        raise UndefinedCoverageError("점수 합이 0이라 누적 곡선을 정의할 수 없습니다.")
    cum = np.cumsum(np.sort(values)[::-1]) / total
    cum[-1] = 1.0
    return cum


def coverage_curve(scores, layer: Optional[str] = None,
                   grid: Optional[np.ndarray] = None) -> CoverageCurve:
    """
    점수를 내림차순 정렬 → 누적합 → 전체 합으로 정규화한 곡선.
    layer를 지정하면 해당 레이어만, 아니면 모든 좌표를 합쳐서 계산합니다.
    """
    store = _score_store(scores)
    names = [layer] if layer is not None else sorted(store)
    values = np.concatenate([np.asarray(store[name], dtype=np.float64).ravel() for name in names])
    cum = _cumulative(values)
    fractions = default_fraction_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    counts = np.array([count_for_fraction(f, cum.size) for f in fractions])
    return CoverageCurve(fractions, cum[counts - 1], cum)


def layer_curve_summary(scores, grid: Optional[np.ndarray] = None) -> pd.DataFrame:
    """레이어별 곡선의 평균/표준편차. 점수 합이 0인 레이어는 제외합니다."""
    store = _score_store(scores)
    curves = []
    for name in sorted(store):
        if float(np.sum(store[name])) > 0.0:
            curves.append(coverage_curve(store, layer=name, grid=grid))
    if not curves:
        raise UndefinedCoverageError("점수 합이 0보다 큰 레이어가 없습니다.")
    stacked = np.vstack([c.cumvals for c in curves])
    return pd.DataFrame({
        "fraction": curves[0].fractions,
        "mean": stacked.mean(axis=0),
        "std": stacked.std(axis=0),
        "layers": len(curves),
    })


def refresh_mask(model: MlpModel, dataset: Batch, loss: LossKind, fraction: float,
                 every_n_steps: int, current_step: int, previous: SparseMask,
                 n_batches: int = DEFAULT_SCORE_BATCHES, batch_size: int = 16,
                 scope: str = "per-layer", params: Optional[Mapping] = None) -> SparseMask:
    """every_n_steps마다 현재 파라미터에서 점수를 다시 매겨 새 top-k 마스크를 만듭니다."""
    if every_n_steps < 1:
        raise UsageError(f"every_n_steps는 1 이상이어야 합니다: {every_n_steps}")
    if current_step % every_n_steps != 0:
        return previous
    scores = score_sensitivity(model, dataset, loss, n_batches, batch_size, params)
    mask = select_topk(scores, fraction, scope, source=previous.source)
    mask.created_at_step = int(current_step)
    mask.seed = previous.seed
    return mask


def refresh_random_mask(previous: SparseMask, fraction: float, every_n_steps: int,
                        current_step: int, stream: RngStream) -> SparseMask:
    """동적 랜덤 마스크 기준선. 갱신 시점마다 스트림에서 새로 추출합니다."""
    if every_n_steps < 1:
        raise UsageError(f"every_n_steps는 1 이상이어야 합니다: {every_n_steps}")
    if current_step % every_n_steps != 0:
        return previous
    mask = random_mask(previous.shapes, fraction, stream)
    mask.created_at_step = int(current_step)
    return mask


def mask_overlap(a: SparseMask, b: SparseMask) -> float:
    """|a ∩ b| / |a|. a가 b에 얼마나 포함되는지 (비대칭)."""
    if a.shapes != b.shapes:
        raise StructuralError("두 마스크의 레이어 구성이 다릅니다.")
    if a.k == 0:
        raise UsageError("빈 마스크의 겹침 비율은 정의되지 않습니다.")
    shared = sum(np.intersect1d(a.indices(n), b.indices(n), assume_unique=True).size for n in a.names)
    return shared / a.k


def chance_overlap(mask: SparseMask) -> float:
    """레이어별 균등 추출 마스크와 겹칠 기대 비율 Σ k_l²/d_l / k."""
    if mask.k == 0:
        raise UsageError("빈 마스크의 겹침 비율은 정의되지 않습니다.")
    expected = sum(mask.indices(name).size ** 2 / float(np.prod(mask.shapes[name]))
                   for name in mask.names)
    return expected / mask.k


def coverage_trace(scores, masks: Dict[str, SparseMask], fraction: float,
                   scope: str = "per-layer") -> Dict[str, float]:
    """
    현재 과제 기울기 점수에 대해 고정 마스크들의 커버리지와,
    같은 fraction으로 지금 다시 고른 동적 top-k 마스크의 커버리지를 함께 계산합니다.
    """
    row = {name: coverage_fraction(scores, mask) for name, mask in sorted(masks.items())}
    row["dynamic"] = coverage_fraction(scores, select_topk(scores, fraction, scope))
    return row

