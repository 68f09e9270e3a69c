# experiment_config.py
"""
실험 설정 (JSON 문서 하나). jsonschema로 검증한 뒤 dataclass로 변환합니다.
환경 변수는 읽지 않습니다.
"""
import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

import jsonschema

from errors import ConfigError, UsageError
from mlp_model import LossKind
from optimizer import MASK_MODES, ZoConfig

MASK_SOURCES = ["task", "surrogate", "random", "outlier", "full"]

_FRACTION = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_POS_INT = {"type": "integer", "minimum": 1}
_OPT_PATH = {"type": ["string", "null"]}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sizes": {"type": "array", "items": _POS_INT, "minItems": 2},
                "activation": {"enum": ["identity", "relu", "tanh"]},
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "file"]},
                "task": {"enum": ["A", "B"]},
                "path": _OPT_PATH,
                "surrogate_path": _OPT_PATH,
                "n_samples": {"type": "integer", "minimum": 512},
                "noise": {"type": "number", "minimum": 0},
                "val_size": _POS_INT,
                "test_size": _POS_INT,
            },
        },
        "loss": {"enum": [kind.value for kind in LossKind]},
        "zo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "steps": _POS_INT,
                "batch_size": _POS_INT,
                "mask_mode": {"enum": list(MASK_MODES)},
                "seed": {"type": "integer", "minimum": 0},
                "draws": {"enum": ["compact", "full"]},
                "debug_checksum": {"type": "boolean"},
                "record_timing": {"type": "boolean"},
            },
        },
        "mask": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": MASK_SOURCES},
                "fraction": _FRACTION,
                "scope": {"enum": ["per-layer", "global"]},
                "refresh_every": _POS_INT,
                "path": _OPT_PATH,
                "score_batches": _POS_INT,
            },
        },
        "quant": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"enabled": {"type": "boolean"}},
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eval_interval": _POS_INT,
                "target_loss": {"type": ["number", "null"]},
                "lr_grid": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0}},
                "tune_steps": _POS_INT,
            },
        },
        "init_checkpoint": _OPT_PATH,
        "pretrain_steps": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
    },
}


@dataclass
class ModelSpec:
    sizes: List[int] = field(default_factory=lambda: [2, 16, 16, 2])
    activation: str = "tanh"


@dataclass
class TaskSpec:
    """synthetic이면 make_tasks(seed)의 task A/B, file이면 JSONL 경로."""
    source: str = "synthetic"
    task: str = "B"
    path: Optional[str] = None
    surrogate_path: Optional[str] = None
    n_samples: int = 1024
    noise: float = 0.15
    val_size: int = 128
    test_size: int = 128


@dataclass
class MaskSpec:
    source: str = "task"
    fraction: float = 0.01
    scope: str = "per-layer"
    refresh_every: int = 100
    path: Optional[str] = None
    score_batches: int = 8


@dataclass
class QuantSpec:
    enabled: bool = False


@dataclass
class EvalSpec:
    eval_interval: int = 50
    target_loss: Optional[float] = None
    lr_grid: Optional[List[float]] = None
    tune_steps: int = 200


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    loss: str = LossKind.CROSS_ENTROPY.value
    zo: ZoConfig = field(default_factory=ZoConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    quant: QuantSpec = field(default_factory=QuantSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    init_checkpoint: Optional[str] = None
    pretrain_steps: int = 300
    out_dir: str = "runs/default"

    @property
    def seed(self) -> int:
        return self.zo.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """--seed 덮어쓰기. 파생되는 모든 스트림 id도 이 seed를 따릅니다."""
        return replace(self, zo=replace(self.zo, seed=int(seed)))

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """중첩 필드 덮어쓰기: with_overrides(mask={"fraction": 0.1}, out_dir="...")."""
        doc = self.to_dict()
        for key, value in changes.items():
            if isinstance(value, dict):
                doc[key].update(value)
            else:
                doc[key] = value
        return ExperimentConfig.from_dict(doc, check_files=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Optional[Path] = None,
                  check_files: bool = True) -> "ExperimentConfig":
        try:
            jsonschema.validate(doc, EXPERIMENT_SCHEMA)
        except jsonschema.ValidationError as exc:
            location = "/".join(str(p) for p in exc.absolute_path) or "(root)"
            raise ConfigError(f"설정 오류 [{location}]: {exc.message}") from exc
        doc = copy.deepcopy(doc)
        try:
            config = cls(
                model=ModelSpec(**doc.get("model", {})),
                task=TaskSpec(**doc.get("task", {})),
                loss=doc.get("loss", LossKind.CROSS_ENTROPY.value),
                zo=ZoConfig(**doc.get("zo", {})),
                mask=MaskSpec(**doc.get("mask", {})),
                quant=QuantSpec(**doc.get("quant", {})),
                eval=EvalSpec(**doc.get("eval", {})),
                init_checkpoint=doc.get("init_checkpoint"),
                pretrain_steps=doc.get("pretrain_steps", 300),
                out_dir=doc.get("out_dir", "runs/default"),
            )
        except UsageError as exc:
            raise ConfigError(f"설정 오류: {exc}") from exc
        if base_dir is not None:
            config = config._resolved(Path(base_dir))
        if check_files:
            config.check_files()
        return config

    def _resolved(self, base_dir: Path) -> "ExperimentConfig":
        def resolve(value: Optional[str]) -> Optional[str]:
            if value is None or Path(value).is_absolute():
                return value
            return str(base_dir / value)
        return replace(
            self,
            task=replace(self.task, path=resolve(self.task.path),
                         surrogate_path=resolve(self.task.surrogate_path)),
            mask=replace(self.mask, path=resolve(self.mask.path)),
            init_checkpoint=resolve(self.init_checkpoint),
        )

    def check_files(self) -> None:
        """참조한 파일은 파싱 시점에 모두 존재해야 합니다."""
        if self.task.source == "file" and not self.task.path:
            raise ConfigError("task.source=file 이면 task.path가 필요합니다.")
        for label, value in (("task.path", self.task.path),
                             ("task.surrogate_path", self.task.surrogate_path),
                             ("mask.path", self.mask.path),
                             ("init_checkpoint", self.init_checkpoint)):
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{label} 파일이 없습니다: {value}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"설정 파일이 없습니다: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"설정 파일이 올바른 JSON이 아닙니다: {path} ({exc})") from exc
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


def save_config(path, config: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


# --- 이론 검증 / 벤치마크 설정 ---
@dataclass
class TheoryConfig:
    T: int = 2000
    seeds: int = 20
    include_noisy: bool = False
    lemma_samples: int = 1_000_000
    lr_scale: float = 1.0
    seed: int = 0
    workers: int = 1


@dataclass
class BenchConfig:
    sizes: List[List[int]] = field(default_factory=lambda: [[256, 256], [1024, 1024]])
    batch_grid: List[int] = field(default_factory=lambda: [1, 16, 256])
    sparsity_grid: List[float] = field(default_factory=lambda: [0.9, 0.99, 0.999])
    repeats: int = 5
    warmup: int = 2
    step_dims: List[int] = field(default_factory=lambda: [10_000, 100_000, 1_000_000])
    step_fraction: float = 1e-3
    seed: int = 0


_SIMPLE_TYPES = {int: "integer", float: "number", bool: "boolean"}


def _flat_schema(cls) -> dict:
    props = {}
    for f in fields(cls):
        if f.type in _SIMPLE_TYPES:
            props[f.name] = {"type": _SIMPLE_TYPES[f.type]}
        else:
            props[f.name] = {"type": "array"}
    return {"type": "object", "additionalProperties": False, "properties": props}


def load_small_config(cls, path: Optional[str]):
    """TheoryConfig / BenchConfig 같은 평평한 설정. 경로가 없으면 기본값."""
    if path is None:
        return cls()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"설정 파일이 없습니다: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        jsonschema.validate(doc, _flat_schema(cls))
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise ConfigError(f"설정 오류: {path} ({getattr(exc, 'message', exc)})") from exc
    return cls(**doc)
