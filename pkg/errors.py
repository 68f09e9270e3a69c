# errors.py
from typing import Optional


class ZoToolkitError(Exception):
    """툴킷 전체에서 사용하는 예외의 최상위 클래스."""


class StructuralError(ZoToolkitError, ValueError):
    """레이어 이름/형상/레이아웃이 서로 맞지 않을 때 발생합니다."""

    def __init__(self, message: str, layer: Optional[str] = None):
        if layer is not None:
            message = f"[{layer}] {message}"
        super().__init__(message)
        self.layer = layer


class UsageError(ZoToolkitError, ValueError):
    """함수의 사전 조건을 위반한 호출."""


class UndefinedCoverageError(UsageError):
    """점수 합이 0이라 커버리지 c를 정의할 수 없는 경우."""


class ConfigError(UsageError):
    """설정 파일이 스키마에 맞지 않거나 참조 파일이 없는 경우."""


class NumericError(ZoToolkitError, ArithmeticError):
    """손실 값 등이 유한하지 않을 때 발생합니다. 문제의 값들을 함께 보관합니다."""

    def __init__(self, message: str, **values: float):
        detail = ", ".join(f"{k}={v!r}" for k, v in values.items())
        super().__init__(f"{message} ({detail})" if detail else message)
        self.values = values


class IntegrityError(ZoToolkitError, RuntimeError):
    """난수 스트림 재생 불일치, 체크섬 불일치, 잘못된 파일 헤더."""
