# data_handler.py
"""
데스크 규모 합성 과제 생성과 데이터 분할/미니배치 샘플링.

과제 A/B는 같은 입력 풀(two-moons)을 공유하고 라벨 규칙만 다릅니다.
A는 사전학습(surrogate) 데이터, B는 다운스트림 과제 역할을 합니다.
"""
from typing import Tuple

import numpy as np
from sklearn.datasets import make_moons
from sklearn.model_selection import train_test_split

from errors import UsageError
from mlp_model import Batch
from rng_stream import RngStream, derive_stream_id

TASK_STREAM = 11  # 과제 B 순열에 쓰는 용도 번호
MIN_TASK_SIZE = 512


def make_tasks(seed: int, n_samples: int = 1024, noise: float = 0.15) -> Tuple[Batch, Batch]:
    """
    (수정) 같은 입력 분포를 공유하는 두 분류 과제를 만듭니다.
      - task A: 초승달 소속 (0/1)
      - task B: 같은 입력 풀을 독립적으로 섞은 뒤, 초승달 소속 XOR (x0 > 0.5)
    """
    if n_samples < MIN_TASK_SIZE:
        raise UsageError(f"과제 크기는 최소 {MIN_TASK_SIZE}개여야 합니다: {n_samples}")
    inputs, moon = make_moons(n_samples=n_samples, noise=noise, random_state=seed % (2 ** 32))
    task_a = Batch(inputs, moon.astype(np.int64))

    stream = RngStream(seed, derive_stream_id(seed, TASK_STREAM))
    order = np.argsort(stream.uniform(n_samples), kind="stable")
    inputs_b, moon_b = inputs[order], moon[order]
    labels_b = np.logical_xor(moon_b == 1, inputs_b[:, 0] > 0.5).astype(np.int64)
    task_b = Batch(inputs_b, labels_b)
    return task_a, task_b


def split_dataset(dataset: Batch, val_size: int, test_size: int,
                  seed: int) -> Tuple[Batch, Batch, Batch]:
    """train / validation / test 분할 (클래스 비율 유지)."""
    n = len(dataset)
    if val_size < 1 or test_size < 1 or val_size + test_size >= n:
        raise UsageError(f"분할 크기가 올바르지 않습니다: n={n}, val={val_size}, test={test_size}")
    stratify = dataset.targets if dataset.is_classification else None
    idx = np.arange(n)
    rest, test_idx = train_test_split(idx, test_size=test_size, random_state=seed % (2 ** 32),
                                      stratify=stratify)
    stratify_rest = dataset.targets[rest] if dataset.is_classification else None
    train_idx, val_idx = train_test_split(rest, test_size=val_size, random_state=seed % (2 ** 32),
                                          stratify=stratify_rest)
    return dataset.take(train_idx), dataset.take(val_idx), dataset.take(test_idx)


def sample_batch(dataset: Batch, batch_size: int, stream: RngStream) -> Batch:
    """복원 추출 미니배치. 스트림에서 균등 표본 batch_size개를 소비합니다."""
    if batch_size < 1:
        raise UsageError(f"batch_size는 1 이상이어야 합니다: {batch_size}")
    n = len(dataset)
    idx = np.minimum((stream.uniform(batch_size) * n).astype(np.int64), n - 1)
    return dataset.take(idx)


def ordered_batches(dataset: Batch, batch_size: int, n_batches: int):
    """데이터 순서대로 자른 배치 n_batches개 (끝에 닿으면 처음부터 다시)."""
    if len(dataset) == 0:
        raise UsageError("빈 데이터셋입니다.")
    if n_batches < 1:
        raise UsageError(f"n_batches는 1 이상이어야 합니다: {n_batches}")
    n = len(dataset)
    size = min(batch_size, n)
    for b in range(n_batches):
        start = (b * size) % n
        idx = (start + np.arange(size)) % n
        yield dataset.take(idx)
