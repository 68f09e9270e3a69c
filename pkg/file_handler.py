# file_handler.py
"""
파일 입출력: 체크포인트(바이너리), 데이터셋(JSON Lines), 마스크(JSON).

체크포인트 형식 (리틀 엔디언)
  헤더  : b"ZOSF" + u32 버전
  v1 레코드: u32 이름 길이, UTF-8 이름, u32 rank, u64 차원들, float64 데이터
  v2 레코드: u32 이름 길이, UTF-8 이름, u8 dtype 태그, u32 rank, u64 차원들, 데이터
            f64(0) = float64 데이터, q4(1) = 압축 코드 바이트 뒤에 행 스케일 float64,
            i64(2) = int64 데이터 (희소 위치)
레코드는 이름의 사전순이며 파일 끝까지 읽습니다.
"""
import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from errors import ConfigError, IntegrityError, StructuralError
from mlp_model import Batch, MlpModel
from param_store import ParamStore
from quantizer import DecomposedLayer, DecomposedModel, QuantizedTensor
from sensitivity_analyzer import SparseMask

MAGIC = b"ZOSF"
VERSION_PLAIN = 1
VERSION_TYPED = 2
DTYPE_F64, DTYPE_Q4, DTYPE_I64 = 0, 1, 2

SPARSE_SUFFIX = "#sparse"
INDEX_SUFFIX = "#index"
DENSE_SUFFIX = "#dense"

Record = Union[np.ndarray, QuantizedTensor]


# --- 저수준 레코드 ---
def _write_header(fh, version: int) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", version))


def _write_name_and_shape(fh, name: str, shape: Tuple[int, ...], tag: Optional[int]) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    if tag is not None:
        fh.write(struct.pack("<B", tag))
    fh.write(struct.pack("<I", len(shape)))
    fh.write(struct.pack(f"<{len(shape)}Q", *shape))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise IntegrityError(f"체크포인트가 잘렸습니다 ({what}).")
    return data


def _read_records(path: Path) -> Tuple[int, Dict[str, Record]]:
    records: Dict[str, Record] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise IntegrityError(f"체크포인트 매직 값이 올바르지 않습니다: {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "버전"))
        if version not in (VERSION_PLAIN, VERSION_TYPED):
            raise IntegrityError(f"지원하지 않는 체크포인트 버전입니다: {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise IntegrityError("체크포인트가 잘렸습니다 (이름 길이).")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "이름").decode("utf-8")
            tag = DTYPE_F64
            if version == VERSION_TYPED:
                (tag,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "차원"))
            size = int(np.prod(shape)) if rank else 1
            if tag == DTYPE_F64:
                records[name] = np.frombuffer(_read_exact(fh, 8 * size, name), dtype="<f8").reshape(shape).astype(np.float64)
            elif tag == DTYPE_I64:
                records[name] = np.frombuffer(_read_exact(fh, 8 * size, name), dtype="<i8").reshape(shape).astype(np.int64)
            elif tag == DTYPE_Q4:
                codes = np.frombuffer(_read_exact(fh, (size + 1) // 2, name), dtype=np.uint8)
                scales = np.frombuffer(_read_exact(fh, 8 * shape[0], name), dtype="<f8")
                records[name] = QuantizedTensor(codes.copy(), scales.astype(np.float64), shape)
            else:
                raise IntegrityError(f"알 수 없는 dtype 태그입니다: {tag}")
    return version, records


# --- 일반 체크포인트 ---
def write_checkpoint(path, params: ParamStore) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        _write_header(fh, VERSION_PLAIN)
        for name in params:
            tensor = params[name]
            _write_name_and_shape(fh, name, tensor.shape, None)
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return path


def read_checkpoint(path) -> ParamStore:
    version, records = _read_records(Path(path))
    if version != VERSION_PLAIN:
        raise StructuralError("분해(양자화) 체크포인트입니다. read_quantized_checkpoint를 사용하세요.")
    return ParamStore(records)


# --- 분해(양자화) 체크포인트 ---
def write_quantized_checkpoint(path, decomposed: DecomposedModel) -> Path:
    entries: Dict[str, Tuple[int, Record]] = {}
    for name, layer in decomposed.layers.items():
        entries[name + SPARSE_SUFFIX] = (DTYPE_F64, np.asarray(layer.sparse_values, dtype=np.float64))
        entries[name + INDEX_SUFFIX] = (DTYPE_I64, np.asarray(layer.sparse_layout, dtype=np.int64))
        if layer.quantized:
            entries[name + DENSE_SUFFIX] = (DTYPE_Q4, layer.dense_q)
        else:
            entries[name + DENSE_SUFFIX] = (DTYPE_F64, np.asarray(layer.dense, dtype=np.float64))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        _write_header(fh, VERSION_TYPED)
        for name in sorted(entries):
            tag, value = entries[name]
            _write_name_and_shape(fh, name, tuple(value.shape), tag)
            if tag == DTYPE_Q4:
                fh.write(value.codes.tobytes())
                fh.write(np.ascontiguousarray(value.scales, dtype="<f8").tobytes())
            elif tag == DTYPE_I64:
                fh.write(np.ascontiguousarray(value, dtype="<i8").tobytes())
            else:
                fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return path


def read_quantized_checkpoint(path, model: MlpModel, source: str = "surrogate") -> DecomposedModel:
    version, records = _read_records(Path(path))
    if version != VERSION_TYPED:
        raise StructuralError("일반 체크포인트입니다. read_checkpoint를 사용하세요.")
    names = sorted({key.rsplit("#", 1)[0] for key in records})
    layers, shapes, indices = {}, {}, {}
    for name in names:
        try:
            values = records[name + SPARSE_SUFFIX]
            idx = records[name + INDEX_SUFFIX]
            dense = records[name + DENSE_SUFFIX]
        except KeyError as exc:
            raise StructuralError(f"레코드가 빠졌습니다: {exc.args[0]}", layer=name) from exc
        shapes[name] = tuple(dense.shape)
        indices[name] = idx
        if isinstance(dense, QuantizedTensor):
            layers[name] = DecomposedLayer(name, dense.shape, values, idx, dense_q=dense)
        else:
            layers[name] = DecomposedLayer(name, dense.shape, values, idx, dense=dense)
    layout = SparseMask(indices, shapes, source=source)
    model.validate({name: np.zeros(shape) for name, shape in shapes.items()})
    return DecomposedModel(model, layers, layout)


def is_quantized_checkpoint(path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(8)
    if len(head) != 8 or head[:4] != MAGIC:
        raise IntegrityError(f"체크포인트 매직 값이 올바르지 않습니다: {path}")
    return struct.unpack("<I", head[4:])[0] == VERSION_TYPED


# --- 데이터셋 (JSON Lines) ---
def write_dataset(path, dataset: Batch) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            y = dataset.targets[i]
            record = {"x": [float(v) for v in dataset.inputs[i]],
                      "y": int(y) if dataset.is_classification else [float(v) for v in y]}
            fh.write(json.dumps(record) + "\n")
    return path


def read_dataset(path) -> Batch:
    """{"x": [...], "y": int 또는 [...]} 한 줄당 예제 하나."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"데이터셋 파일이 없습니다: {path}")
    try:
        frame = pd.read_json(path, lines=True, precise_float=True, dtype=False)
    except ValueError as exc:
        raise ConfigError(f"데이터셋을 읽을 수 없습니다: {path} ({exc})") from exc
    if frame.empty or not {"x", "y"} <= set(frame.columns):
        raise ConfigError(f"데이터셋에 x/y 레코드가 없습니다: {path}")
    inputs = np.array(frame["x"].tolist(), dtype=np.float64)
    first = frame["y"].iloc[0]
    if isinstance(first, list):
        targets = np.array(frame["y"].tolist(), dtype=np.float64)
    else:
        targets = frame["y"].to_numpy().astype(np.int64)
    return Batch(inputs, targets)


# --- 마스크 (JSON) ---
def write_mask(path, mask: SparseMask) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mask.to_dict(), fh)
        fh.write("\n")
    return path


def read_mask(path, shapes: Dict[str, Tuple[int, ...]]) -> SparseMask:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"마스크 파일이 없습니다: {path}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return SparseMask.from_dict(doc, shapes)
