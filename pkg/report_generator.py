# report_generator.py
"""
실험 결과 파일(JSONL/CSV/JSON) 기록과 콘솔 요약 표.

파일 내용은 결정적이어야 합니다 (같은 설정 → 같은 바이트).
콘솔 출력은 stderr로만 보내며 재현성 대상이 아닙니다.
"""
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import pandas as pd
from rich.console import Console
from rich.table import Table

console = Console(stderr=True, highlight=False)

METRICS_KEYS = ("step", "loss", "proj_grad", "lr", "eps", "wall_us")


def _ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


class JsonlWriter:
    """한 줄에 JSON 레코드 하나. step은 파일 안에서 엄격히 증가해야 합니다."""

    def __init__(self, path, check_steps: bool = True):
        self.path = _ensure_parent(path)
        self.check_steps = check_steps
        self._last_step: Optional[int] = None
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, record: Dict) -> None:
        step = record.get("step")
        if self.check_steps and step is not None:
            if self._last_step is not None and step <= self._last_step:
                raise ValueError(f"step이 증가하지 않습니다: {self._last_step} → {step}")
            self._last_step = step
        self._fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def metrics_record(step: int, loss: float, proj_grad: float, lr: float, eps: float,
                   wall_us: int = 0) -> Dict:
    return {"step": int(step), "loss": float(loss), "proj_grad": float(proj_grad),
            "lr": float(lr), "eps": float(eps), "wall_us": int(wall_us)}


def write_jsonl(path, records: Iterable[Dict], check_steps: bool = True) -> Path:
    with JsonlWriter(path, check_steps) as writer:
        for record in records:
            writer.write(record)
    return writer.path


def write_csv(path, frame: pd.DataFrame, columns: Optional[List[str]] = None) -> Path:
    path = _ensure_parent(path)
    frame = frame if columns is None else frame[columns]
    frame.to_csv(path, index=False, lineterminator="\n", float_format=None)
    return path


def write_json(path, doc) -> Path:
    path = _ensure_parent(path)
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def summary_table(frame: pd.DataFrame, title: str, float_digits: int = 4) -> Table:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for _, row in frame.iterrows():
        cells = []
        for value in row:
            if isinstance(value, float):
                cells.append(f"{value:.{float_digits}g}")
            elif isinstance(value, bool):
                cells.append("✅" if value else "❌")
            else:
                cells.append(str(value))
        table.add_row(*cells)
    return table


def print_summary(frame: pd.DataFrame, title: str) -> None:
    console.print(summary_table(frame, title))


def seed_statistics(frame: pd.DataFrame, by: str, value: str) -> pd.DataFrame:
    """그룹별 중앙값과 사분위 범위 (seed 간 비교용)."""
    grouped = frame.groupby(by, sort=True)[value]
    stats = pd.DataFrame({
        "median": grouped.median(),
        "q25": grouped.quantile(0.25),
        "q75": grouped.quantile(0.75),
        "runs": grouped.size(),
    })
    stats["iqr"] = stats["q75"] - stats["q25"]
    return stats.reset_index()
