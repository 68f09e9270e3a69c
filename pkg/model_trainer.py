# model_trainer.py
"""
학습 파이프라인: 데이터 준비 → 초기 모델(사전학습) → 마스크 → ZO 학습 → 평가/체크포인트.
마스크 출처별 seed 반복 비교와 과제 간 마스크 전이 실험도 여기서 돌립니다.
"""
import time
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score

from data_handler import make_tasks, sample_batch, split_dataset
from errors import ConfigError, NumericError, StructuralError, UndefinedCoverageError, UsageError
from experiment_config import ExperimentConfig, save_config
from file_handler import (is_quantized_checkpoint, read_checkpoint, read_dataset, read_mask,
                          read_quantized_checkpoint, write_checkpoint, write_mask,
                          write_quantized_checkpoint)
from mlp_model import Batch, LossKind, MlpModel
from optimizer import packed_step, seed_trick_step, sensitive_zo_sgd_step, tune_learning_rate
from parallel_processor import FailedJob, run_parallel
from param_store import ParamStore, store_axpy
from quantizer import DecomposedModel
from report_generator import (JsonlWriter, console, metrics_record, seed_statistics, write_csv,
                              write_json)
from rng_stream import RngStream, derive_stream_id
from sensitivity_analyzer import (SensitivityScores, SparseMask, chance_overlap, coverage_curve,
                                  coverage_fraction, coverage_trace, layer_curve_summary,
                                  mask_overlap, outlier_mask, random_mask, refresh_mask,
                                  refresh_random_mask, score_sensitivity, select_topk)

# 스트림 용도 번호 (seed와 함께 derive_stream_id에 들어갑니다)
INIT_STREAM = 1
PRETRAIN_STREAM = 2
ZO_STREAM = 3
BATCH_STREAM = 4
MASK_STREAM = 5
REFRESH_STREAM = 6

PRETRAIN_LR = 0.1


@dataclass
class TaskData:
    train: Batch
    val: Batch
    test: Batch
    surrogate: Optional[Batch] = None


@dataclass
class TrainResult:
    final_params: ParamStore
    best_params: ParamStore
    best_step: int
    best_val_loss: float
    initial_val_loss: float
    test_loss: float
    test_acc: Optional[float]
    mask: SparseMask
    lr: float
    history: List[Dict] = field(default_factory=list)
    train_losses: List[float] = field(default_factory=list)
    coverage: List[Dict] = field(default_factory=list)

    def summary(self) -> Dict:
        return {
            "k": self.mask.k,
            "d": self.mask.total_dim,
            "lr": self.lr,
            "initial_val_loss": self.initial_val_loss,
            "best_step": self.best_step,
            "best_val_loss": self.best_val_loss,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
        }


# --- 데이터 / 모델 / 마스크 준비 ---
def prepare_data(config: ExperimentConfig) -> TaskData:
    """
    synthetic: make_tasks(seed)의 두 과제 중 task.task를 학습하고 나머지를 surrogate로 둡니다.
    file: task.path를 학습 데이터, task.surrogate_path(선택)를 surrogate로 읽습니다.
    """
    task = config.task
    if task.source == "synthetic":
        task_a, task_b = make_tasks(config.seed, task.n_samples, task.noise)
        target, surrogate = (task_b, task_a) if task.task == "B" else (task_a, task_b)
    else:
        target = read_dataset(task.path)
        surrogate = read_dataset(task.surrogate_path) if task.surrogate_path else None
    train, val, test = split_dataset(target, task.val_size, task.test_size, config.seed)
    return TaskData(train, val, test, surrogate)


def fit_first_order(model: MlpModel, dataset: Batch, loss: LossKind, steps: int, lr: float,
                    batch_size: int, stream: RngStream,
                    params: Optional[ParamStore] = None) -> ParamStore:
    """역전파 SGD. surrogate 과제 사전학습과 1차 기준선에 씁니다."""
    if steps < 0:
        raise UsageError(f"steps는 0 이상이어야 합니다: {steps}")
    params = (model.params if params is None else params).copy()
    for step in range(1, steps + 1):
        batch = sample_batch(dataset, batch_size, stream)
        store_axpy(params, -float(lr), model.backprop_grads(batch, loss, params))
        if not params.all_finite():
            raise NumericError(f"1차 학습 {step}스텝에서 파라미터가 발산했습니다", step=step)
    return params


def _decomposed_weights(decomposed: DecomposedModel) -> ParamStore:
    view = decomposed.weights(decomposed.packed().values)
    return ParamStore({name: np.array(view[name], dtype=np.float64) for name in view})


def build_initial_model(config: ExperimentConfig, data: TaskData) -> MlpModel:
    """init_checkpoint가 있으면 그대로, 없으면 초기화 후 surrogate 과제로 사전학습합니다."""
    spec = config.model
    if config.init_checkpoint:
        path = config.init_checkpoint
        if is_quantized_checkpoint(path):
            decomposed = read_quantized_checkpoint(path, MlpModel(spec.sizes, spec.activation))
            params = _decomposed_weights(decomposed)
        else:
            params = read_checkpoint(path)
        return MlpModel(spec.sizes, spec.activation, params)

    seed = config.seed
    model = MlpModel.initialize(spec.sizes, spec.activation,
                                RngStream(seed, derive_stream_id(seed, INIT_STREAM)))
    if config.pretrain_steps == 0:
        return model
    if data.surrogate is None:
        console.print("  ⚠️ surrogate 데이터가 없어 사전학습을 건너뜁니다.")
        return model
    stream = RngStream(seed, derive_stream_id(seed, PRETRAIN_STREAM))
    params = fit_first_order(model, data.surrogate, LossKind(config.loss), config.pretrain_steps,
                             PRETRAIN_LR, config.zo.batch_size, stream)
    return model.with_params(params)


def compute_scores(config: ExperimentConfig, model: MlpModel, dataset: Batch,
                   params: Optional[ParamStore] = None) -> SensitivityScores:
    return score_sensitivity(model, dataset, LossKind(config.loss), config.mask.score_batches,
                             config.zo.batch_size, params)


def build_mask(config: ExperimentConfig, model: MlpModel, data: TaskData,
               params: Optional[ParamStore] = None) -> SparseMask:
    """
    우선순위: mask.path → 양자화 체크포인트의 레이아웃 → mask_mode/source에 따른 선택.
    task/surrogate는 각 데이터의 기울기 제곱 점수로 top-k를 고릅니다.
    """
    spec = config.mask
    params = model.params if params is None else params
    shapes = params.shapes()
    if spec.path:
        return read_mask(spec.path, shapes)
    if config.init_checkpoint and is_quantized_checkpoint(config.init_checkpoint):
        layout = read_quantized_checkpoint(config.init_checkpoint, model).layout
        layout.check_shapes(params)
        return layout

    if config.zo.mask_mode == "full" or spec.source == "full":
        mask = SparseMask.full(shapes)
    elif spec.source == "task":
        mask = select_topk(compute_scores(config, model, data.train, params),
                           spec.fraction, spec.scope, source="task")
    elif spec.source == "surrogate":
        if data.surrogate is None:
            raise ConfigError("mask.source=surrogate 이면 surrogate 데이터가 필요합니다 (task.surrogate_path).")
        mask = select_topk(compute_scores(config, model, data.surrogate, params),
                           spec.fraction, spec.scope, source="surrogate")
    elif spec.source == "random":
        stream = RngStream(config.seed, derive_stream_id(config.seed, MASK_STREAM))
        mask = random_mask(shapes, spec.fraction, stream)
    else:
        mask = outlier_mask(params, spec.fraction, spec.scope)
    mask.seed = config.seed
    return mask


def evaluate(model: MlpModel, params, dataset: Batch, loss: LossKind) -> Tuple[float, Optional[float]]:
    value = model.forward_loss(dataset, loss, params)
    if not dataset.is_classification:
        return value, None
    predicted = model.predict_classes(dataset.inputs, params)
    return value, float(accuracy_score(dataset.targets, predicted))


# --- 학습 ---
def _abort_record(step: int, exc: NumericError) -> Dict:
    return {"step": int(step), "abort": "numeric", "message": str(exc),
            "values": {key: repr(float(value)) for key, value in exc.values.items()}}


def _refreshed(config: ExperimentConfig, model: MlpModel, data: TaskData, mask: SparseMask,
               step: int, params: ParamStore, stream: RngStream) -> SparseMask:
    # random 출처는 새로 추출, 나머지는 현재 과제 기울기로 다시 top-k
    spec = config.mask
    if spec.source == "random":
        return refresh_random_mask(mask, spec.fraction, spec.refresh_every, step, stream)
    return refresh_mask(model, data.train, LossKind(config.loss), spec.fraction,
                        spec.refresh_every, step, mask, spec.score_batches,
                        config.zo.batch_size, spec.scope, params)


def run_training(config: ExperimentConfig, model: MlpModel, mask: SparseMask, data: TaskData,
                 out_dir=None, trace_masks: Optional[Dict[str, SparseMask]] = None,
                 verbose: bool = True) -> TrainResult:
    """
    zo.steps 스텝의 ZO 학습. out_dir가 있으면 다음 파일을 씁니다.
      metrics.jsonl  스텝마다 한 줄 (step 1..T)
      eval.jsonl     step 0, eval_interval 배수, 마지막 스텝의 검증 손실/정확도
      coverage.jsonl trace_masks가 있을 때 평가 시점마다 고정/동적 마스크 커버리지
      final.ckpt / best.ckpt, mask.json, summary.json
    손실이 유한하지 않으면 진단 레코드를 남기고 NumericError를 다시 올립니다.
    """
    zo = config.zo
    loss = LossKind(config.loss)
    mode = zo.mask_mode
    if config.quant.enabled and mode != "packed":
        raise ConfigError("quant.enabled는 zo.mask_mode=packed 에서만 쓸 수 있습니다.")

    params = model.params.copy()
    if mode == "full" and not mask.is_full():
        mask = SparseMask.full(params.shapes())
    mask.check_shapes(params)

    seed = config.seed
    zo_stream = RngStream(seed, derive_stream_id(seed, ZO_STREAM))
    batch_stream = RngStream(seed, derive_stream_id(seed, BATCH_STREAM))
    refresh_stream = RngStream(seed, derive_stream_id(seed, REFRESH_STREAM))

    decomposed, packed = None, None
    if mode == "packed":
        decomposed = DecomposedModel.from_params(model, params, mask, quantize=config.quant.enabled)
        packed = decomposed.packed()

    def current_view():
        return decomposed.weights(packed.values) if packed is not None else params

    def snapshot() -> ParamStore:
        view = current_view()
        return ParamStore({name: np.array(view[name], dtype=np.float64) for name in view})

    if verbose:
        console.print(f"🚀 ZO 학습 시작: mode={mode}, k={mask.k}/{mask.total_dim}, "
                      f"steps={zo.steps}, lr={zo.lr:g}, eps={zo.eps:g}")

    out = Path(out_dir) if out_dir is not None else None
    history: List[Dict] = []
    coverage: List[Dict] = []
    train_losses: List[float] = []

    with ExitStack() as stack:
        metrics_writer = eval_writer = trace_writer = None
        if out is not None:
            metrics_writer = stack.enter_context(JsonlWriter(out / "metrics.jsonl"))
            eval_writer = stack.enter_context(JsonlWriter(out / "eval.jsonl"))
            if trace_masks:
                trace_writer = stack.enter_context(JsonlWriter(out / "coverage.jsonl"))

        def run_eval(step: int) -> float:
            val_loss, val_acc = evaluate(model, current_view(), data.val, loss)
            if not np.isfinite(val_loss):
                exc = NumericError("검증 손실이 유한하지 않습니다", val_loss=val_loss)
                if eval_writer is not None:
                    eval_writer.write(_abort_record(step, exc))
                raise exc
            record = {"step": step, "val_loss": val_loss, "val_acc": val_acc}
            history.append(record)
            if eval_writer is not None:
                eval_writer.write(record)
            if trace_masks:
                scores = compute_scores(config, model, data.train, current_view())
                try:
                    row = {"step": step, **coverage_trace(scores, trace_masks, config.mask.fraction,
                                                          config.mask.scope)}
                except UndefinedCoverageError:
                    console.print(f"  ⚠️ {step}스텝: 기울기 점수가 모두 0이라 커버리지를 건너뜁니다.")
                else:
                    coverage.append(row)
                    if trace_writer is not None:
                        trace_writer.write(row)
            return val_loss

        initial_val_loss = run_eval(0)
        best_val_loss, best_step, best_params = initial_val_loss, 0, snapshot()
        best_values = packed.values.copy() if packed is not None else None

        for step in range(1, zo.steps + 1):
            if mode == "dynamic-mask" and step > 1:
                mask = _refreshed(config, model, data, mask, step - 1, params, refresh_stream)
            batch = sample_batch(data.train, zo.batch_size, batch_stream)
            started = time.perf_counter_ns() if zo.record_timing else None
            try:
                if packed is not None:
                    packed, estimate = packed_step(packed, decomposed, batch, loss, zo_stream, zo)
                elif zo.debug_checksum:
                    params, estimate = seed_trick_step(params, model, batch, loss, zo_stream.state(),
                                                       mask, zo, zo_stream)
                else:
                    params, estimate = sensitive_zo_sgd_step(params, model, batch, loss,
                                                             zo_stream, mask, zo)
            except NumericError as exc:
                console.print(f"  ❌ {step}스텝에서 손실이 유한하지 않아 학습을 중단합니다: {exc}")
                if metrics_writer is not None:
                    metrics_writer.write(_abort_record(step, exc))
                raise
            wall_us = (time.perf_counter_ns() - started) // 1000 if started is not None else 0
            train_losses.append(estimate.loss)
            if metrics_writer is not None:
                metrics_writer.write(metrics_record(step, estimate.loss, estimate.scale,
                                                    zo.lr, zo.eps, wall_us))

            if step % config.eval.eval_interval == 0 or step == zo.steps:
                val_loss = run_eval(step)
                if val_loss < best_val_loss:
                    best_val_loss, best_step, best_params = val_loss, step, snapshot()
                    if packed is not None:
                        best_values = packed.values.copy()

    final_params = snapshot()
    test_loss, test_acc = evaluate(model, best_params, data.test, loss)
    result = TrainResult(final_params, best_params, best_step, best_val_loss, initial_val_loss,
                         test_loss, test_acc, mask, zo.lr, history, train_losses, coverage)

    if out is not None:
        if decomposed is not None and config.quant.enabled:
            write_quantized_checkpoint(out / "final.ckpt", decomposed.with_values(packed.values))
            write_quantized_checkpoint(out / "best.ckpt", decomposed.with_values(best_values))
        else:
            write_checkpoint(out / "final.ckpt", final_params)
            write_checkpoint(out / "best.ckpt", best_params)
        write_mask(out / "mask.json", mask)
        write_json(out / "summary.json", {"mode": mode, "steps": zo.steps, "eps": zo.eps,
                                          **result.summary()})

    if verbose:
        acc = f", test acc {test_acc:.3f}" if test_acc is not None else ""
        console.print(f"✅ 학습 완료: best val loss {best_val_loss:.4f} (step {best_step}), "
                      f"test loss {test_loss:.4f}{acc}")
    return result


def steps_to_target(history: Sequence[Dict], target: float) -> Optional[int]:
    """검증 손실이 처음으로 target 이하가 된 평가 스텝. 끝내 못 닿으면 None."""
    for record in history:
        if record["val_loss"] <= target:
            return int(record["step"])
    return None


def resolve_learning_rate(config: ExperimentConfig, model: MlpModel, mask: SparseMask,
                          data: TaskData) -> float:
    """eval.lr_grid가 있으면 tune_steps짜리 짧은 학습으로 격자 탐색, 없으면 zo.lr."""
    grid = config.eval.lr_grid
    if not grid:
        return config.zo.lr
    short = config.with_overrides(zo={"steps": config.eval.tune_steps}, eval={"lr_grid": None})

    def run_with_lr(lr: float) -> float:
        trial = short.with_overrides(zo={"lr": lr})
        return run_training(trial, model, mask, data, verbose=False).best_val_loss

    lr, value = tune_learning_rate(run_with_lr, grid, seed=config.seed)
    console.print(f"  ✅ 학습률 선택: {lr:g} (검증 손실 {value:.4f}, 후보 {len(grid)}개)")
    return lr


def train_pipeline(config: ExperimentConfig, out_dir=None,
                   trace_coverage: bool = False) -> TrainResult:
    """train 명령 전체: 준비 → (학습률 선택) → 학습 → 파일 기록."""
    data = prepare_data(config)
    model = build_initial_model(config, data)
    mask = build_mask(config, model, data)
    lr = resolve_learning_rate(config, model, mask, data)
    if lr != config.zo.lr:
        config = config.with_overrides(zo={"lr": lr})

    trace_masks = None
    if trace_coverage:
        trace_masks = {"static-task": build_mask(config.with_overrides(mask={"source": "task", "path": None}),
                                                 model, data),
                       "static-random": build_mask(config.with_overrides(mask={"source": "random", "path": None}),
                                                   model, data)}
        if data.surrogate is not None:
            trace_masks["static-surrogate"] = build_mask(
                config.with_overrides(mask={"source": "surrogate", "path": None}), model, data)

    if out_dir is not None:
        save_config(Path(out_dir) / "config.json", config)
    return run_training(config, model, mask, data, out_dir, trace_masks)


# --- 마스크 선택 / 곡선 ---
def select_mask_pipeline(config: ExperimentConfig, out_dir) -> Dict:
    """마스크를 골라 mask.json과 coverage 곡선 CSV를 씁니다. c는 현재 과제 점수 기준입니다."""
    out = Path(out_dir)
    data = prepare_data(config)
    model = build_initial_model(config, data)
    mask = build_mask(config, model, data)
    task_scores = compute_scores(config, model, data.train)
    coverage = coverage_fraction(task_scores, mask)

    curve_scores = task_scores
    if config.mask.source == "surrogate" and data.surrogate is not None:
        curve_scores = compute_scores(config, model, data.surrogate)
    write_mask(out / "mask.json", mask)
    write_csv(out / "curve.csv", coverage_curve(curve_scores).to_frame(), ["fraction", "cumval"])
    console.print(f"  ✅ 마스크 저장: {out / 'mask.json'} (source={mask.source}, k={mask.k}, c={coverage:.4f})")
    return {"mask": mask, "coverage": coverage}


def export_curve(config: ExperimentConfig, out_dir, per_layer: bool = False) -> pd.DataFrame:
    """설정의 점수 출처(task/surrogate)로 전체 누적 곡선과 (선택) 레이어별 요약을 씁니다."""
    out = Path(out_dir)
    data = prepare_data(config)
    model = build_initial_model(config, data)
    dataset = data.train
    if config.mask.source == "surrogate":
        if data.surrogate is None:
            raise ConfigError("mask.source=surrogate 이면 surrogate 데이터가 필요합니다.")
        dataset = data.surrogate
    scores = compute_scores(config, model, dataset)
    frame = coverage_curve(scores).to_frame()
    write_csv(out / "curve.csv", frame, ["fraction", "cumval"])
    if per_layer:
        write_csv(out / "layer_curves.csv", layer_curve_summary(scores))
    console.print(f"  ✅ 누적 곡선 저장: {out / 'curve.csv'} ({len(frame)}점)")
    return frame


def infer_sizes(params: ParamStore) -> List[int]:
    """layer{i}.weight (out×in) 형상에서 레이어 크기 목록을 복원합니다."""
    weights = sorted((name for name in params if name.endswith(".weight")),
                     key=lambda name: int(name[len("layer"):].split(".")[0]))
    if not weights:
        raise StructuralError("체크포인트에 가중치 레코드가 없습니다.")
    return [params[weights[0]].shape[1]] + [params[name].shape[0] for name in weights]


def quantize_checkpoint(checkpoint, mask_path, out_path,
                        config: Optional[ExperimentConfig] = None) -> Tuple[DecomposedModel, pd.DataFrame]:
    """밀집 부분을 4비트로 양자화한 v2 체크포인트를 쓰고 레이어별 오차 표를 돌려줍니다."""
    params = read_checkpoint(checkpoint)
    if config is None:
        model = MlpModel(infer_sizes(params), params=params)
    else:
        model = MlpModel(config.model.sizes, config.model.activation, params)
    mask = read_mask(mask_path, params.shapes())
    decomposed = DecomposedModel.from_params(model, params, mask, quantize=True)
    write_quantized_checkpoint(out_path, decomposed)
    return decomposed, decomposed.error_report()


# --- 비교 실험 ---
def _compare_job(config: ExperimentConfig) -> Dict:
    data = prepare_data(config)
    model = build_initial_model(config, data)
    mask = build_mask(config, model, data)
    result = run_training(config, model, mask, data, verbose=False)
    return {
        "source": config.mask.source,
        "seed": config.seed,
        "k": mask.k,
        "initial_val_loss": result.initial_val_loss,
        "best_val_loss": result.best_val_loss,
        "test_loss": result.test_loss,
        "history": [{"step": r["step"], "val_loss": r["val_loss"]} for r in result.history],
    }


@dataclass
class ComparisonReport:
    runs: pd.DataFrame
    summary: pd.DataFrame
    target: float
    target_drop: Optional[float] = None


def compare_masks(config: ExperimentConfig, sources: Sequence[str] = ("task", "random"),
                  seeds: Sequence[int] = tuple(range(10)), workers: int = 1,
                  target_loss: Optional[float] = None) -> ComparisonReport:
    """
    출처별로 같은 seed 집합에서 학습해 목표 검증 손실까지의 스텝 수를 비교합니다.
    목표 손실이 없으면 실행마다 초기 손실 × (1 − δ/2)를 목표로 씁니다.
    δ는 전체 실행의 상대 개선 (초기 − 최저) / 초기 의 중앙값입니다.
    끝내 못 닿은 실행은 steps + 1로 중도절단합니다.
    """
    jobs, labels = [], []
    for source in sources:
        for seed in seeds:
            jobs.append(config.with_seed(seed).with_overrides(mask={"source": source, "path": None}))
            labels.append(f"{source}/seed={seed}")
    results = run_parallel(_compare_job, jobs, workers=workers, labels=labels)
    rows = [r for r in results if not isinstance(r, FailedJob)]
    if not rows:
        raise UsageError("모든 비교 실행이 실패했습니다.")
    if len(rows) < len(results):
        console.print(f"  ⚠️ 실패한 실행 {len(results) - len(rows)}개는 통계에서 제외합니다.")

    runs = pd.DataFrame([{key: value for key, value in r.items() if key != "history"} for r in rows])
    if target_loss is None:
        target_loss = config.eval.target_loss
    target_drop = None
    if target_loss is None:
        drops = (runs["initial_val_loss"] - runs["best_val_loss"]) / runs["initial_val_loss"]
        target_drop = float(drops.median() / 2)
        runs["target_loss"] = runs["initial_val_loss"] * (1.0 - target_drop)
    else:
        runs["target_loss"] = float(target_loss)

    censored = config.zo.steps + 1
    steps = [steps_to_target(r["history"], t) for r, t in zip(rows, runs["target_loss"])]
    runs["reached"] = [s is not None for s in steps]
    runs["steps_to_target"] = [censored if s is None else s for s in steps]

    summary = seed_statistics(runs, "source", "steps_to_target")
    losses = seed_statistics(runs, "source", "best_val_loss")[["source", "median", "iqr"]]
    losses = losses.rename(columns={"median": "median_best_val_loss", "iqr": "iqr_best_val_loss"})
    reached = runs.groupby("source", sort=True)["reached"].sum().rename("reached").reset_index()
    summary = summary.merge(losses, on="source").merge(reached, on="source")
    return ComparisonReport(runs, summary, float(runs["target_loss"].median()), target_drop)


def iqr_separated(summary: pd.DataFrame, better: str, worse: str) -> bool:
    """better 출처의 75% 분위가 worse 출처의 25% 분위보다 작으면 True."""
    rows = summary.set_index("source")
    return bool(rows.loc[better, "q75"] < rows.loc[worse, "q25"])


def _transfer_job(config: ExperimentConfig) -> Dict:
    data = prepare_data(config)
    if data.surrogate is None:
        raise ConfigError("전이 실험에는 surrogate 데이터가 필요합니다.")
    model = build_initial_model(config, data)
    task_config = config.with_overrides(mask={"source": "task", "path": None})
    surrogate_config = config.with_overrides(mask={"source": "surrogate", "path": None})
    task_mask = build_mask(task_config, model, data)
    surrogate_mask = build_mask(surrogate_config, model, data)

    overlap = mask_overlap(surrogate_mask, task_mask)
    chance = chance_overlap(task_mask)
    task_loss = run_training(task_config, model, task_mask, data, verbose=False).best_val_loss
    surrogate_loss = run_training(surrogate_config, model, surrogate_mask, data, verbose=False).best_val_loss
    return {
        "seed": config.seed,
        "k": task_mask.k,
        "overlap": overlap,
        "chance": chance,
        "overlap_ratio": overlap / chance,
        "task_mask_loss": task_loss,
        "surrogate_mask_loss": surrogate_loss,
        "relative_gap": (surrogate_loss - task_loss) / task_loss,
    }


def transfer_experiment(config: ExperimentConfig, seeds: Sequence[int] = tuple(range(10)),
                        workers: int = 1) -> pd.DataFrame:
    """surrogate 과제 마스크가 현재 과제 마스크와 얼마나 겹치고, 대신 써도 되는지 seed별로 봅니다."""
    jobs = [config.with_seed(seed) for seed in seeds]
    results = run_parallel(_transfer_job, jobs, workers=workers,
                           labels=[f"transfer/seed={seed}" for seed in seeds])
    rows = [r for r in results if not isinstance(r, FailedJob)]
    if not rows:
        raise UsageError("모든 전이 실행이 실패했습니다.")
    return pd.DataFrame(rows)
