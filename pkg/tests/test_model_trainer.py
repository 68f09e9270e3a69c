import json

import numpy as np
import pytest

import model_trainer
from errors import ConfigError, NumericError
from file_handler import (is_quantized_checkpoint, read_checkpoint, write_checkpoint,
                          write_dataset, write_mask)
from model_trainer import (build_initial_model, build_mask, compare_masks, export_curve,
                           infer_sizes, iqr_separated, prepare_data, quantize_checkpoint,
                           resolve_learning_rate, run_training, select_mask_pipeline,
                           steps_to_target, train_pipeline, transfer_experiment)
from mlp_model import Batch
from param_store import ParamStore
from sensitivity_analyzer import SparseMask


def _lines(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def _setup(config):
    data = prepare_data(config)
    model = build_initial_model(config, data)
    return data, model, build_mask(config, model, data)


def test_prepare_data_splits(small_config):
    data = prepare_data(small_config)
    assert (len(data.train), len(data.val), len(data.test)) == (384, 64, 64)
    assert data.surrogate is not None and len(data.surrogate) == 512


def test_training_is_reproducible(small_config, tmp_path):
    first = train_pipeline(small_config, tmp_path / "a")
    second = train_pipeline(small_config, tmp_path / "b")
    for name in ("metrics.jsonl", "eval.jsonl", "mask.json", "final.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert first.best_val_loss == second.best_val_loss


def test_output_files(small_config, tmp_path):
    result = train_pipeline(small_config, tmp_path)
    metrics = _lines(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in metrics] == list(range(1, 41))
    assert set(metrics[0]) == {"step", "loss", "proj_grad", "lr", "eps", "wall_us"}
    assert all(r["wall_us"] == 0 for r in metrics)
    evals = _lines(tmp_path / "eval.jsonl")
    assert [r["step"] for r in evals] == [0, 10, 20, 30, 40]
    assert result.best_val_loss == min(r["val_loss"] for r in evals)
    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert summary["k"] == result.mask.k and summary["mode"] == "fixed-mask"
    assert (tmp_path / "config.json").exists()


def test_final_step_is_always_evaluated(small_config, tmp_path):
    config = small_config.with_overrides(zo={"steps": 25})
    train_pipeline(config, tmp_path)
    assert [r["step"] for r in _lines(tmp_path / "eval.jsonl")] == [0, 10, 20, 25]


def test_fixed_mask_leaves_unmasked_weights(small_config):
    data, model, mask = _setup(small_config)
    result = run_training(small_config, model, mask, data, verbose=False)
    for name in model.params:
        off = ~mask.boolean(name)
        np.testing.assert_array_equal(result.final_params[name][off], model.params[name][off])


def test_full_mode_uses_every_coordinate(small_config):
    config = small_config.with_overrides(zo={"mask_mode": "full", "steps": 5})
    data, model, mask = _setup(config)
    result = run_training(config, model, mask, data, verbose=False)
    assert result.mask.is_full()


def test_packed_matches_fixed_mask(small_config):
    data, model, mask = _setup(small_config)
    fixed = run_training(small_config, model, mask, data, verbose=False)
    packed_config = small_config.with_overrides(zo={"mask_mode": "packed"})
    packed = run_training(packed_config, model, mask, data, verbose=False)
    for name in model.params:
        np.testing.assert_allclose(packed.final_params[name], fixed.final_params[name],
                                   rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(packed.train_losses, fixed.train_losses, rtol=1e-9)


def test_seed_trick_path_matches_default(small_config):
    data, model, mask = _setup(small_config)
    plain = run_training(small_config, model, mask, data, verbose=False)
    checked = run_training(small_config.with_overrides(zo={"debug_checksum": True}),
                           model, mask, data, verbose=False)
    assert plain.final_params.checksum() == checked.final_params.checksum()


def test_dynamic_mask_refreshes(small_config):
    config = small_config.with_overrides(zo={"mask_mode": "dynamic-mask"},
                                         mask={"refresh_every": 10})
    data, model, mask = _setup(config)
    result = run_training(config, model, mask, data, verbose=False)
    assert result.mask.created_at_step == 30
    assert result.mask.k == mask.k


def test_quant_requires_packed(small_config):
    config = small_config.with_overrides(quant={"enabled": True})
    data, model, mask = _setup(config)
    with pytest.raises(ConfigError):
        run_training(config, model, mask, data, verbose=False)


def test_numeric_abort_leaves_record(small_config, tmp_path, monkeypatch):
    data, model, mask = _setup(small_config)

    def diverge(*args, **kwargs):
        raise NumericError("섭동 지점의 손실이 유한하지 않습니다", loss_plus=float("inf"),
                           loss_minus=1.0)

    monkeypatch.setattr(model_trainer, "sensitive_zo_sgd_step", diverge)
    with pytest.raises(NumericError):
        run_training(small_config, model, mask, data, tmp_path, verbose=False)
    record = _lines(tmp_path / "metrics.jsonl")[-1]
    assert record["step"] == 1 and record["abort"] == "numeric"
    assert record["values"] == {"loss_plus": "inf", "loss_minus": "1.0"}


def test_coverage_trace(small_config, tmp_path):
    result = train_pipeline(small_config, tmp_path, trace_coverage=True)
    rows = _lines(tmp_path / "coverage.jsonl")
    assert [r["step"] for r in rows] == [0, 10, 20, 30, 40]
    assert {"static-task", "static-random", "static-surrogate", "dynamic"} <= set(rows[0])
    for row in rows:
        assert row["dynamic"] >= row["static-random"] - 1e-12
    assert len(result.coverage) == 5


def test_build_mask_sources(small_config):
    data = prepare_data(small_config)
    model = build_initial_model(small_config, data)
    for source in ("task", "surrogate", "outlier"):
        mask = build_mask(small_config.with_overrides(mask={"source": source}), model, data)
        assert mask.source == source and mask.seed == 3
    random_config = small_config.with_overrides(mask={"source": "random"})
    assert build_mask(random_config, model, data).same_selection(build_mask(random_config, model, data))
    assert build_mask(small_config.with_overrides(mask={"source": "full"}), model, data).is_full()


def test_file_task_without_surrogate(small_config, tmp_path):
    rows = np.linspace(-1.0, 1.0, 600).reshape(300, 2)
    path = write_dataset(tmp_path / "task.jsonl", Batch(rows, (rows[:, 0] > 0).astype(np.int64)))
    config = small_config.with_overrides(task={"source": "file", "path": str(path)},
                                         mask={"source": "surrogate"})
    data = prepare_data(config)
    assert data.surrogate is None and len(data.train) == 172
    model = build_initial_model(config, data)
    with pytest.raises(ConfigError):
        build_mask(config, model, data)


def test_mask_file_takes_priority(small_config, tmp_path):
    data, model, mask = _setup(small_config.with_overrides(mask={"source": "random"}))
    path = write_mask(tmp_path / "mask.json", mask)
    config = small_config.with_overrides(mask={"path": str(path)})
    assert build_mask(config, model, data).same_selection(mask)


def test_steps_to_target():
    history = [{"step": 0, "val_loss": 1.0}, {"step": 10, "val_loss": 0.6},
               {"step": 20, "val_loss": 0.4}]
    assert steps_to_target(history, 0.5) == 20
    assert steps_to_target(history, 1.0) == 0
    assert steps_to_target(history, 0.1) is None


def test_learning_rate_grid(small_config):
    config = small_config.with_overrides(eval={"lr_grid": [0.01, 0.05], "tune_steps": 10})
    data, model, mask = _setup(config)
    assert resolve_learning_rate(config, model, mask, data) in (0.01, 0.05)
    assert resolve_learning_rate(small_config, model, mask, data) == 0.05


def test_select_mask_and_curve_files(small_config, tmp_path):
    out = select_mask_pipeline(small_config, tmp_path / "select")
    assert 0.0 < out["coverage"] <= 1.0
    assert (tmp_path / "select" / "mask.json").exists()
    frame = export_curve(small_config, tmp_path / "curve", per_layer=True)
    assert len(frame) == 41
    header = (tmp_path / "curve" / "curve.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "fraction,cumval"
    assert (tmp_path / "curve" / "layer_curves.csv").exists()


def test_infer_sizes():
    params = ParamStore({"layer0.weight": np.zeros((8, 2)), "layer0.bias": np.zeros(8),
                         "layer1.weight": np.zeros((3, 8)), "layer1.bias": np.zeros(3)})
    assert infer_sizes(params) == [2, 8, 3]


def test_quantized_pipeline(small_config, tmp_path):
    data, model, mask = _setup(small_config)
    checkpoint = write_checkpoint(tmp_path / "model.ckpt", model.params)
    mask_path = write_mask(tmp_path / "mask.json", mask)
    decomposed, report = quantize_checkpoint(checkpoint, mask_path, tmp_path / "q.ckpt")
    assert is_quantized_checkpoint(tmp_path / "q.ckpt")
    assert report["k"].sum() == mask.k
    quantized = report[report["quantized"]]
    assert (quantized["max_error"] <= quantized["max_scale"] / 2 * (1 + 1e-12)).all()

    config = small_config.with_overrides(init_checkpoint=str(tmp_path / "q.ckpt"),
                                         zo={"mask_mode": "packed", "steps": 20},
                                         quant={"enabled": True})
    data = prepare_data(config)
    model = build_initial_model(config, data)
    layout = build_mask(config, model, data)
    assert layout.same_selection(mask)
    result = run_training(config, model, layout, data, tmp_path / "run", verbose=False)
    assert is_quantized_checkpoint(tmp_path / "run" / "final.ckpt")
    assert np.isfinite(result.best_val_loss)


def test_plain_checkpoint_init(small_config, tmp_path):
    data, model, _ = _setup(small_config)
    path = write_checkpoint(tmp_path / "init.ckpt", model.params)
    config = small_config.with_overrides(init_checkpoint=str(path))
    loaded = build_initial_model(config, prepare_data(config))
    assert loaded.params.checksum() == read_checkpoint(path).checksum()


@pytest.mark.slow
def test_compare_masks_report(small_config):
    report = compare_masks(small_config, seeds=range(3))
    assert len(report.runs) == 6
    assert set(report.summary["source"]) == {"task", "random"}
    assert {"median", "q25", "q75", "iqr", "runs", "reached"} <= set(report.summary.columns)
    assert (report.runs["steps_to_target"] <= small_config.zo.steps + 1).all()
    assert isinstance(iqr_separated(report.summary, "task", "random"), bool)


@pytest.mark.slow
def test_transfer_columns(small_config):
    frame = transfer_experiment(small_config, seeds=[0, 1])
    assert list(frame.columns) == ["seed", "k", "overlap", "chance", "overlap_ratio",
                                   "task_mask_loss", "surrogate_mask_loss", "relative_gap"]
    assert ((frame["overlap"] >= 0) & (frame["overlap"] <= 1)).all()


def test_full_mask_override(small_config):
    config = small_config.with_overrides(zo={"mask_mode": "full", "steps": 2})
    data, model, _ = _setup(config)
    partial = SparseMask({"layer0.weight": np.array([0])}, model.params.shapes())
    assert run_training(config, model, partial, data, verbose=False).mask.is_full()


def test_compare_targets_follow_each_seed(small_config, monkeypatch):
    curves = {"task": [1.0, 0.8, 0.6, 0.6], "random": [1.0, 0.95, 0.9, 0.85]}

    def fake_job(config):
        initial = [1.0, 0.5][config.seed]
        losses = [initial * v for v in curves[config.mask.source]]
        return {"source": config.mask.source, "seed": config.seed, "k": 3,
                "initial_val_loss": losses[0], "best_val_loss": min(losses), "test_loss": min(losses),
                "history": [{"step": 10 * i, "val_loss": v} for i, v in enumerate(losses)]}

    monkeypatch.setattr(model_trainer, "_compare_job", fake_job)
    report = compare_masks(small_config, seeds=[0, 1])
    # 상대 개선 [0.4, 0.4, 0.15, 0.15]의 중앙값 0.275의 절반
    assert report.target_drop == pytest.approx(0.1375)
    np.testing.assert_allclose(report.runs["target_loss"], [0.8625, 0.43125] * 2)
    steps = report.runs.set_index(["source", "seed"])["steps_to_target"]
    assert list(steps.loc["task"]) == [10, 10] and list(steps.loc["random"]) == [30, 30]
    assert iqr_separated(report.summary, "task", "random")

    fixed = compare_masks(small_config, seeds=[0, 1], target_loss=0.7)
    assert fixed.target_drop is None and fixed.target == 0.7
    assert not fixed.runs["reached"][fixed.runs["seed"] == 0].iloc[1]


def _desk_config(small_config):
    """[2, 32, 32, 2] MLP, 과제 B, fraction 0.01 (레이어별 k 합계 16)."""
    return small_config.with_overrides(
        model={"sizes": [2, 32, 32, 2], "activation": "tanh"},
        task={"n_samples": 1024, "val_size": 128, "test_size": 128},
        zo={"eps": 1e-3, "lr": 0.05, "steps": 400, "batch_size": 16},
        mask={"fraction": 0.01, "scope": "per-layer", "score_batches": 8},
        eval={"eval_interval": 5},
        pretrain_steps=300,
    )


@pytest.mark.slow
def test_sensitive_masks_reach_target_sooner(small_config):
    report = compare_masks(_desk_config(small_config), seeds=range(10))
    assert len(report.runs) == 20
    summary = report.summary.set_index("source")
    assert summary.loc["task", "median"] < summary.loc["random", "median"]
    assert iqr_separated(report.summary, "task", "random")


@pytest.mark.slow
def test_surrogate_masks_transfer(small_config):
    frame = transfer_experiment(_desk_config(small_config), seeds=range(10))
    assert len(frame) == 10
    assert frame["overlap_ratio"].median() >= 3.0
    assert frame["relative_gap"].median() <= 0.1


@pytest.mark.slow
def test_quantized_packed_keeps_half_of_full_improvement(small_config):
    base = _desk_config(small_config).with_overrides(
        zo={"steps": 300}, eval={"lr_grid": [1e-3, 3e-3, 1e-2, 3e-2, 1e-1], "tune_steps": 100})
    quantized_gain, full_gain = 0.0, 0.0
    for seed in range(3):
        config = base.with_seed(seed)
        quantized = train_pipeline(config.with_overrides(
            zo={"mask_mode": "packed"}, mask={"source": "surrogate"}, quant={"enabled": True}))
        full = train_pipeline(config.with_overrides(zo={"mask_mode": "full"}))
        quantized_gain += quantized.initial_val_loss - quantized.best_val_loss
        full_gain += full.initial_val_loss - full.best_val_loss
    assert full_gain > 0.0
    assert quantized_gain >= 0.5 * full_gain
