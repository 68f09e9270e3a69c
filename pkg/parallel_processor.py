# parallel_processor.py
"""
독립 작업(seed, 이론 시행, 실험 설정)을 순서 보존 방식으로 팬아웃합니다.

각 작업은 자기 상태만 쓰므로 프로세스 간 공유가 없습니다. 결과는 항상 입력 순서대로
모으기 때문에 병렬이든 순차든 같은 결과가 나옵니다.
"""
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence

from report_generator import console


@dataclass
class FailedJob:
    """실패한 작업 자리에 들어가는 행. 형제 작업은 계속 진행됩니다."""
    label: str
    error: str
    error_type: str


def _guarded(payload):
    fn, job, label = payload
    try:
        return fn(job)
    except Exception as e:
        console.print(f"  ❌ {label} 처리 중 오류 발생: {e}")
        traceback.print_exc()
        return FailedJob(label, str(e), type(e).__name__)


def run_parallel(fn: Callable[[Any], Any], jobs: Sequence[Any], workers: int = 1,
                 labels: Optional[Sequence[str]] = None, catch: bool = True) -> List[Any]:
    """
    fn(job)을 모든 작업에 적용합니다. workers=1이면 순차 실행(디버깅용 기본값).
    catch=True면 실패한 작업은 FailedJob으로 기록되고, False면 첫 예외를 그대로 올립니다.
    """
    jobs = list(jobs)
    labels = [str(i) for i in range(len(jobs))] if labels is None else list(labels)
    console.print(f"🚀 총 {len(jobs)}개 작업을 시작합니다 (workers={workers})...")

    if catch:
        payloads = [(fn, job, label) for job, label in zip(jobs, labels)]
        runner = _guarded
    else:
        payloads = jobs
        runner = fn

    if workers <= 1:
        results = [runner(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(runner, payloads))

    failed = sum(isinstance(r, FailedJob) for r in results)
    console.print(f"✅ 모든 작업 완료! 성공: {len(results) - failed}개, 실패: {failed}개")
    return results


def parallel_map(workers: int = 1, catch: bool = False) -> Callable:
    """map 대신 넘길 수 있는 함수 (예: theory_checker.run_suite의 map_fn)."""
    def mapper(fn, jobs):
        return run_parallel(fn, list(jobs), workers=workers, catch=catch)
    return mapper
