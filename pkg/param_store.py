# param_store.py
"""
이름 → 텐서(64비트 float ndarray) 저장소.

반복 순서는 항상 이름의 사전순이며, 이 순서로 이어 붙인 벡터가 w ∈ R^d 입니다.
"""
import hashlib
from collections.abc import Mapping
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from errors import StructuralError

# 형상을 가진 64비트 float 배열. 별도 래퍼 없이 ndarray를 그대로 씁니다.
Tensor = np.ndarray


def as_tensor(values, shape: Optional[Tuple[int, ...]] = None) -> Tensor:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim == 0 or any(dim <= 0 for dim in arr.shape):
        raise StructuralError(f"텐서 형상은 양의 차원들로 이루어져야 합니다: {arr.shape}")
    return arr


class ParamStore(Mapping):
    """레이어 이름별 파라미터 텐서 묶음."""

    def __init__(self, tensors: Optional[Dict[str, np.ndarray]] = None):
        self._tensors: Dict[str, Tensor] = {}
        self._names: List[str] = []
        for name, value in (tensors or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        if name not in self._tensors:
            self._names = sorted(self._names + [name])
        self._tensors[name] = as_tensor(value)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self) -> str:
        body = ", ".join(f"{n}{tuple(self._tensors[n].shape)}" for n in self._names)
        return f"ParamStore({body})"

    def names(self) -> List[str]:
        return list(self._names)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: self._tensors[name].shape for name in self._names}

    def total_dim(self) -> int:
        return sum(self._tensors[name].size for name in self._names)

    def layer_offsets(self) -> Dict[str, int]:
        """평탄화된 w에서 각 레이어가 시작하는 위치."""
        offsets, pos = {}, 0
        for name in self._names:
            offsets[name] = pos
            pos += self._tensors[name].size
        return offsets

    def copy(self) -> "ParamStore":
        return ParamStore({name: self._tensors[name].copy() for name in self._names})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({name: np.zeros_like(self._tensors[name]) for name in self._names})

    def flatten(self) -> Tensor:
        if not self._names:
            return np.empty(0)
        return np.concatenate([self._tensors[name].ravel() for name in self._names])

    def unflatten(self, vector: np.ndarray) -> "ParamStore":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.total_dim():
            raise StructuralError(f"벡터 길이 {vector.size} != 전체 차원 {self.total_dim()}")
        out, pos = ParamStore(), 0
        for name in self._names:
            shape = self._tensors[name].shape
            size = self._tensors[name].size
            out[name] = vector[pos:pos + size].reshape(shape)
            pos += size
        return out

    def check_compatible(self, other: Mapping) -> None:
        """이름과 형상이 같은지 확인합니다. 다르면 문제 레이어를 담아 StructuralError."""
        other_names = sorted(other)
        if other_names != self._names:
            missing = sorted(set(self._names) ^ set(other_names))
            raise StructuralError("레이어 이름이 일치하지 않습니다", layer=missing[0])
        for name in self._names:
            if np.shape(other[name]) != self._tensors[name].shape:
                raise StructuralError(
                    f"형상 불일치 {np.shape(other[name])} != {self._tensors[name].shape}", layer=name
                )

    def all_finite(self) -> bool:
        return all(np.isfinite(self._tensors[name]).all() for name in self._names)

    def checksum(self) -> str:
        digest = hashlib.blake2b(digest_size=16)
        for name in self._names:
            digest.update(name.encode("utf-8"))
            digest.update(self._tensors[name].tobytes())
        return digest.hexdigest()


def store_axpy(dst: ParamStore, alpha: float, src: Mapping) -> ParamStore:
    """dst ← dst + alpha·src (레이어 이름 순서로, 제자리 갱신)."""
    dst.check_compatible(src)
    alpha = float(alpha)
    for name in dst:
        layer = dst[name]
        layer += alpha * np.asarray(src[name])
    return dst


def store_dot(a: ParamStore, b: Mapping) -> float:
    """Σ aᵢ·bᵢ. 레이어별 내적을 이름 순서로 64비트 float에 누적합니다."""
    a.check_compatible(b)
    total = 0.0
    for name in a:
        total += float(np.dot(a[name].ravel(), np.asarray(b[name]).ravel()))
    return total
