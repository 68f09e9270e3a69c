# rng_stream.py
"""
재생 가능한(replayable) 난수 스트림.

numpy의 Philox(카운터 기반 생성기)를 키 = (seed, stream_id)로 사용하고,
64비트 출력 1개당 표본 1개를 만듭니다. 따라서 스트림의 어느 위치든
직접 주소 지정이 가능하고, 같은 (seed, stream_id, counter)는 플랫폼과 무관하게
비트 단위로 같은 값을 냅니다.

변환 규칙 (고정):
  u = ((raw >> 11) + 0.5) * 2**-53      # (0, 1) 개구간, 53비트
  z = ndtri(u)                          # 역누적분포 방식의 표준정규
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from errors import UsageError

_U64 = 1 << 64
_BLOCK = 4  # Philox4x64 한 블록이 내는 64비트 출력 수
_INV_2_53 = 2.0 ** -53


@dataclass(frozen=True)
class StreamRecord:
    """스트림 상태 스냅샷. seed trick에서 z를 다시 만들 때 사용합니다."""
    seed: int
    stream_id: int
    counter: int


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            value = int(getattr(self, name))
            if not 0 <= value < _U64:
                raise UsageError(f"{name}는 64비트 부호 없는 정수여야 합니다: {value}")
            setattr(self, name, value)

    # --- 위치 기반 접근 (카운터를 바꾸지 않음) ---
    def raw_at(self, position: int, n: int) -> np.ndarray:
        if n < 0:
            raise UsageError(f"표본 수는 0 이상이어야 합니다: {n}")
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        block, skip = divmod(int(position), _BLOCK)
        bit_gen = np.random.Philox(counter=block, key=self.seed | (self.stream_id << 64))
        return bit_gen.random_raw(skip + n)[skip:]

    def uniform_at(self, position: int, n: int) -> np.ndarray:
        raw = self.raw_at(position, n)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53

    def normal_at(self, position: int, n: int) -> np.ndarray:
        return ndtri(self.uniform_at(position, n))

    # --- 순차 소비 (카운터 전진) ---
    def uniform(self, n: int) -> np.ndarray:
        out = self.uniform_at(self.counter, n)
        self.counter += n
        return out

    def standard_normal(self, n: int) -> np.ndarray:
        out = self.normal_at(self.counter, n)
        self.counter += n
        return out

    def skip(self, n: int) -> None:
        if n < 0:
            raise UsageError(f"건너뛸 표본 수는 0 이상이어야 합니다: {n}")
        self.counter += n

    def state(self) -> StreamRecord:
        return StreamRecord(self.seed, self.stream_id, self.counter)

    @classmethod
    def at(cls, record: StreamRecord) -> "RngStream":
        return cls(record.seed, record.stream_id, record.counter)

    def fork(self, stream_id: int) -> "RngStream":
        """같은 seed 아래 독립적인 하위 스트림."""
        return RngStream(self.seed, stream_id, 0)

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)


def sample_standard_gaussian(stream: RngStream, n: int) -> np.ndarray:
    """N(0,1) 표본 n개. 스트림 카운터는 정확히 n만큼 전진합니다."""
    return stream.standard_normal(n)


def derive_stream_id(*parts: int) -> int:
    """(실험 seed, 용도 번호, 반복 번호 …)를 하나의 stream_id로 접습니다."""
    value = 0
    for part in parts:
        value = (value * 1_000_003 + int(part)) % _U64
    return value

