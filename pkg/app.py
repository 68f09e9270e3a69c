# app.py
"""
명령행 진입점.

  python app.py select-mask   --config exp.json --out runs/mask
  python app.py train         --config exp.json --out runs/train --seed 3
  python app.py quantize      --checkpoint final.ckpt --mask mask.json --out runs/q4
  python app.py verify-theory --out runs/theory
  python app.py bench         --config bench.json --out runs/bench
  python app.py export-curve  --config exp.json --out runs/curve

종료 코드: 0 성공, 1 사용법/설정/구조 오류, 2 수치 오류, 3 이론 검증 실패.
"""
import functools
import sys
from dataclasses import replace
from pathlib import Path

import click

from errors import NumericError, ZoToolkitError
from experiment_config import (BenchConfig, ExperimentConfig, TheoryConfig, load_config,
                               load_small_config)
from model_trainer import (compare_masks, export_curve, quantize_checkpoint, select_mask_pipeline,
                           train_pipeline, transfer_experiment)
from parallel_processor import parallel_map
from report_generator import console, print_summary, write_csv, write_json
from sparse_forward import BENCH_COLUMNS, bench_crossover, bench_step_timing
from theory_checker import (SUITE_COLUMNS, check_suite_lr, default_lemmas, default_suite,
                            run_suite, suite_frame, suite_passed, summarize)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_THEORY = 3


def exit_codes(command):
    """라이브러리 예외를 종료 코드로 바꿉니다."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except NumericError as exc:
            console.print(f"❌ 수치 오류: {exc}")
            return EXIT_NUMERIC
        except ZoToolkitError as exc:
            console.print(f"❌ {type(exc).__name__}: {exc}")
            return EXIT_USAGE
    return wrapper


def _experiment(config_path, seed) -> ExperimentConfig:
    config = load_config(config_path) if config_path else ExperimentConfig()
    return config if seed is None else config.with_seed(seed)


def _out_dir(out, default) -> Path:
    path = Path(out if out else default)
    path.mkdir(parents=True, exist_ok=True)
    return path


config_option = click.option("--config", "config_path", type=click.Path(), default=None,
                             help="JSON 설정 파일")
out_option = click.option("--out", type=click.Path(), default=None, help="출력 디렉터리")
seed_option = click.option("--seed", type=int, default=None, help="설정의 seed 덮어쓰기")


@click.group()
def cli():
    """민감 좌표 희소 ZO 미세조정 도구."""


@cli.command("select-mask")
@config_option
@out_option
@seed_option
@exit_codes
def select_mask_cmd(config_path, out, seed):
    config = _experiment(config_path, seed)
    select_mask_pipeline(config, _out_dir(out, config.out_dir))
    return EXIT_OK


@cli.command("train")
@config_option
@out_option
@seed_option
@click.option("--trace-coverage", is_flag=True, help="평가 시점마다 고정/동적 마스크 커버리지 기록")
@exit_codes
def train_cmd(config_path, out, seed, trace_coverage):
    config = _experiment(config_path, seed)
    train_pipeline(config, _out_dir(out, config.out_dir), trace_coverage)
    return EXIT_OK


@cli.command("quantize")
@config_option
@out_option
@seed_option
@click.option("--checkpoint", type=click.Path(), required=True, help="일반(v1) 체크포인트")
@click.option("--mask", "mask_path", type=click.Path(), required=True, help="마스크 JSON")
@exit_codes
def quantize_cmd(config_path, out, seed, checkpoint, mask_path):
    config = _experiment(config_path, seed) if config_path else None
    out_dir = _out_dir(out, "runs/quantized")
    _, report = quantize_checkpoint(checkpoint, mask_path, out_dir / "quantized.ckpt", config)
    write_csv(out_dir / "quant_errors.csv", report)
    print_summary(report, "레이어별 양자화 오차")
    console.print(f"✅ 양자화 체크포인트 저장: {out_dir / 'quantized.ckpt'}")
    return EXIT_OK


@cli.command("verify-theory")
@config_option
@out_option
@seed_option
@exit_codes
def verify_theory_cmd(config_path, out, seed):
    config = load_small_config(TheoryConfig, config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    trials = default_suite(config.T, config.seeds, config.include_noisy)
    check_suite_lr(trials, config.lr_scale)
    lemmas = default_lemmas(config.lemma_samples)

    console.print(f"🚀 이론 검증 시작: 시행 {len(trials)}개, 보조정리 {len(lemmas)}개")
    reports = run_suite(trials, lemmas, config.seed, map_fn=parallel_map(config.workers))
    out_dir = _out_dir(out, "runs/theory")
    frame = suite_frame(reports)
    write_csv(out_dir / "suite.csv", frame, SUITE_COLUMNS)
    write_json(out_dir / "suite.json", {"summary": summarize(reports),
                                        "reports": [r.to_dict() for r in reports]})
    print_summary(frame, "이론 검증 결과")

    if not suite_passed(reports):
        console.print(f"❌ 이론 검증 실패: {summarize(reports)['failed']}개 행이 보장식을 벗어났습니다.")
        return EXIT_THEORY
    console.print("✅ 모든 보장식과 보조정리 검증을 통과했습니다.")
    return EXIT_OK


@cli.command("bench")
@config_option
@out_option
@seed_option
@exit_codes
def bench_cmd(config_path, out, seed):
    config = load_small_config(BenchConfig, config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    out_dir = _out_dir(out, "runs/bench")

    console.print("🚀 SparseAdd / SparseAddMM 교차점 측정 시작...")
    frame = bench_crossover([tuple(size) for size in config.sizes], config.batch_grid,
                            config.sparsity_grid, config.repeats, config.warmup, config.seed)
    write_csv(out_dir / "bench.csv", frame, BENCH_COLUMNS)
    print_summary(frame, "forward 경로별 중앙값 (µs)")

    steps = bench_step_timing(config.step_dims, config.step_fraction, config.repeats,
                              seed=config.seed)
    write_csv(out_dir / "step_timing.csv", steps)
    print_summary(steps, "섭동+업데이트 시간: 전체 대 압축")
    console.print(f"✅ 벤치마크 저장: {out_dir}")
    return EXIT_OK


@cli.command("export-curve")
@config_option
@out_option
@seed_option
@click.option("--per-layer", is_flag=True, help="레이어별 곡선 평균/표준편차도 기록")
@exit_codes
def export_curve_cmd(config_path, out, seed, per_layer):
    config = _experiment(config_path, seed)
    export_curve(config, _out_dir(out, config.out_dir), per_layer)
    return EXIT_OK


@cli.command("compare-masks")
@config_option
@out_option
@click.option("--sources", default="task,random", help="쉼표로 구분한 마스크 출처")
@click.option("--seeds", "n_seeds", type=int, default=10, help="seed 개수 (0..N-1)")
@click.option("--workers", type=int, default=1)
@exit_codes
def compare_masks_cmd(config_path, out, sources, n_seeds, workers):
    config = _experiment(config_path, None)
    out_dir = _out_dir(out, config.out_dir)
    report = compare_masks(config, [s.strip() for s in sources.split(",") if s.strip()],
                           list(range(n_seeds)), workers)
    write_csv(out_dir / "compare_runs.csv", report.runs)
    write_csv(out_dir / "compare_summary.csv", report.summary)
    if report.target_drop is None:
        title = f"목표 검증 손실 {report.target:.4f}까지의 스텝 수"
    else:
        title = f"초기 손실 대비 {report.target_drop:.1%} 감소까지의 스텝 수"
    print_summary(report.summary, title)
    return EXIT_OK


@cli.command("transfer")
@config_option
@out_option
@click.option("--seeds", "n_seeds", type=int, default=10, help="seed 개수 (0..N-1)")
@click.option("--workers", type=int, default=1)
@exit_codes
def transfer_cmd(config_path, out, n_seeds, workers):
    config = _experiment(config_path, None)
    out_dir = _out_dir(out, config.out_dir)
    frame = transfer_experiment(config, list(range(n_seeds)), workers)
    write_csv(out_dir / "transfer.csv", frame)
    print_summary(frame, "surrogate 마스크 전이")
    return EXIT_OK


def main(argv=None) -> int:
    """click 자체의 사용법 오류도 종료 코드 1로 맞춥니다."""
    try:
        result = cli.main(args=argv, prog_name="app.py", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
