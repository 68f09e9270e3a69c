# theory_checker.py
"""
희소 ZO-SGD 수렴 보장식의 실험적 검증.

대각 이차 목적함수 f(w) = ½·wᵀDw 에서
  - 매끄러운(smooth) 경우: (1/T)·Σ E‖∇F(w_t)‖² ≤ 2L(k+2)/c · gap/T + 3σ²
  - PL 경우:            E[F(w_T) − F*] ≤ (1 − cμ/(L(k+2)))^T · gap + 3σ²c / (2L(k+2))
를 η = 1/(L(k+2))로 시뮬레이션해서 확인하고, 희소 SPSA 추정량의 2차 모멘트
(공분산/노름)를 몬테카를로로 확인합니다.

여러 seed는 (seeds, d) 배열 한 번에 벡터화해서 진행합니다.
"""
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from errors import UsageError
from optimizer import DEFAULT_EPS, guaranteed_lr
from rng_stream import RngStream, derive_stream_id
from sensitivity_analyzer import count_for_fraction

SUITE_COLUMNS = ["trial", "k", "c", "L", "mu", "sigma_sq", "T", "lhs", "rhs", "satisfied"]
THEORY_MASK_MODES = ("dynamic", "static", "full")
BOUNDS = ("smooth", "pl")
MC_CHUNK = 100_000
LR_RTOL = 1e-12

# 스트림 용도 번호
_TRIAL_STREAM = 21
_LEMMA_STREAM = 22


@dataclass
class SyntheticObjective:
    """f(w) = ½·wᵀDw. 확률적 기울기 오차 ξ ~ N(0, (σ²/d)·I)라 E‖ξ‖² = σ²."""
    curvatures: np.ndarray
    noise_std: float = 0.0
    profile: str = "custom"

    def __post_init__(self):
        self.curvatures = np.asarray(self.curvatures, dtype=np.float64).reshape(-1)
        if self.curvatures.size < 1 or not (self.curvatures > 0).all():
            raise UsageError("곡률은 모두 양수여야 합니다.")
        if self.noise_std < 0:
            raise UsageError(f"noise_std는 0 이상이어야 합니다: {self.noise_std}")

    @property
    def dim(self) -> int:
        return self.curvatures.size

    @property
    def L(self) -> float:
        return float(self.curvatures.max())

    @property
    def mu(self) -> float:
        return float(self.curvatures.min())

    @property
    def sigma_sq(self) -> float:
        return float(self.noise_std) ** 2

    def value(self, w: np.ndarray) -> np.ndarray:
        """F(w). w가 (seeds, d)면 행별 값."""
        return 0.5 * np.sum(self.curvatures * np.square(w), axis=-1)

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self.curvatures * w

    def loss_at(self, params, batch=None, loss=None) -> float:
        """ZO 추정기용 인터페이스. params["w"] 하나만 씁니다 (잡음 없음)."""
        return float(self.value(np.asarray(params["w"], dtype=np.float64)))

    @classmethod
    def linear_profile(cls, d: int = 100, noise_std: float = 0.0) -> "SyntheticObjective":
        return cls(np.linspace(0.1, 1.0, d), noise_std, profile="linear")

    @classmethod
    def heavy_tailed_profile(cls, d: int = 100, noise_std: float = 0.0) -> "SyntheticObjective":
        """곡률 ∝ i^-1.5: 소수 좌표가 기울기 제곱의 대부분을 차지하는 모양."""
        return cls((1.0 + np.arange(d)) ** -1.5, noise_std, profile="heavy-tailed")


@dataclass
class BoundReport:
    trial: str
    bound: str
    T: int
    k: int
    c: float
    L: float
    mu: float
    sigma_sq: float
    measured_lhs: float
    bound_rhs: float
    slack: float = 1.0
    seeds: int = 0
    informational: bool = False
    satisfied: bool = field(init=False)

    def __post_init__(self):
        self.satisfied = bool(self.measured_lhs <= self.bound_rhs * self.slack)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary_row(self) -> dict:
        return {
            "trial": self.trial, "k": self.k, "c": self.c, "L": self.L, "mu": self.mu,
            "sigma_sq": self.sigma_sq, "T": self.T, "lhs": self.measured_lhs,
            "rhs": self.bound_rhs, "satisfied": self.satisfied,
        }


# --- 보장식 ---
def _check_bound_args(k: int, c: float, T: int) -> None:
    if not 0.0 < c <= 1.0:
        raise UsageError(f"커버리지 c는 (0, 1] 범위여야 합니다: {c}")
    if k < 1:
        raise UsageError(f"k는 1 이상이어야 합니다: {k}")
    if T < 0:
        raise UsageError(f"T는 0 이상이어야 합니다: {T}")


def eval_bound_smooth(objective: SyntheticObjective, k: int, c: float, T: int,
                      f0_gap: float) -> float:
    _check_bound_args(k, c, T)
    if T < 1:
        raise UsageError("매끄러운 경우의 보장식에는 T ≥ 1이 필요합니다.")
    return 2.0 * objective.L * (k + 2) / c * f0_gap / T + 3.0 * objective.sigma_sq


def pl_contraction(objective: SyntheticObjective, k: int, c: float) -> float:
    return 1.0 - c * objective.mu / (objective.L * (k + 2))


def eval_bound_pl(objective: SyntheticObjective, k: int, c: float, T: int,
                  f0_gap: float) -> float:
    _check_bound_args(k, c, T)
    rate = c * objective.mu / (objective.L * (k + 2))
    if rate >= 1.0:
        raise UsageError(f"수축 계수 cμ/(L(k+2)) = {rate}가 1 이상입니다.")
    return (1.0 - rate) ** T * f0_gap + pl_noise_floor(objective, k, c)


def pl_noise_floor(objective: SyntheticObjective, k: int, c: float) -> float:
    return 3.0 * objective.sigma_sq * c / (2.0 * objective.L * (k + 2))


# --- 시뮬레이션 ---
def _topk_rows(values: np.ndarray, k: int) -> np.ndarray:
    """행마다 값이 큰 k개의 열 인덱스 (동점이면 낮은 인덱스)."""
    return np.argsort(-values, axis=1, kind="stable")[:, :k]


def _gradient_noise(stream: RngStream, n_rows: int, d: int, std: float) -> np.ndarray:
    """기울기에 더해지는 가우스 잡음. 좌표별 분산 σ²/d."""
    return std / np.sqrt(d) * stream.standard_normal(n_rows * d).reshape(n_rows, d)


def check_guaranteed_lr(objective: SyntheticObjective, k: int, lr: Optional[float] = None) -> float:
    """보장식이 전제하는 η를 돌려줍니다. 다른 lr이 주어지면 UsageError."""
    eta = guaranteed_lr(objective.L, k)
    if lr is not None and abs(lr - eta) > LR_RTOL * eta:
        raise UsageError(f"학습률 {lr}은 보장식의 전제 η = 1/(L(k+2)) = {eta}와 다릅니다.")
    return eta


def run_theory_trial(objective: SyntheticObjective, mask_mode: str, fraction: float, T: int,
                     seeds: int, bound: str = "pl", seed: int = 0, lr: Optional[float] = None,
                     eps: float = DEFAULT_EPS, trial: Optional[str] = None,
                     w0: Optional[np.ndarray] = None) -> BoundReport:
    """
    η = 1/(L(k+2))로 희소 ZO-SGD를 seeds개 복제본에 대해 T 스텝 돌리고 보장식과 비교합니다.
      dynamic: 매 스텝 참 기울기의 top-k, static: w0에서 고른 top-k 고정, full: k = d
    매 스텝 커버리지 c를 재고, 보장식에는 관측된 최솟값을 씁니다.
    """
    if mask_mode not in THEORY_MASK_MODES:
        raise UsageError(f"mask_mode는 {THEORY_MASK_MODES} 중 하나여야 합니다: {mask_mode}")
    if bound not in BOUNDS:
        raise UsageError(f"bound는 {BOUNDS} 중 하나여야 합니다: {bound}")
    if T < 1 or seeds < 1:
        raise UsageError(f"T와 seeds는 1 이상이어야 합니다: T={T}, seeds={seeds}")
    d = objective.dim
    k = d if mask_mode == "full" else count_for_fraction(fraction, d)
    eta = check_guaranteed_lr(objective, k, lr)

    stream = RngStream(seed, derive_stream_id(seed, _TRIAL_STREAM, k, d))
    w = np.ones((seeds, d)) if w0 is None else np.tile(np.asarray(w0, dtype=np.float64), (seeds, 1))
    gap = float(objective.value(w[0]))
    rows = np.arange(seeds)[:, None]
    static_idx = _topk_rows(np.square(objective.grad(w)), k)
    c_min = 1.0
    grad_sq_sum = np.zeros(seeds)

    for _ in range(T):
        g = objective.grad(w)
        g_sq = np.square(g)
        total = g_sq.sum(axis=1)
        grad_sq_sum += total
        idx = static_idx if mask_mode == "static" else _topk_rows(g_sq, k)
        live = total > 0
        if live.any():
            covered = g_sq[rows, idx].sum(axis=1)
            c_min = min(c_min, float((covered[live] / total[live]).min()))

        xi = _gradient_noise(stream, seeds, d, objective.noise_std) if objective.noise_std > 0 else 0.0
        z = np.zeros((seeds, d))
        z[rows, idx] = stream.standard_normal(seeds * k).reshape(seeds, k)
        # f(w;ξ) = F(w) + ξᵀw 의 대칭 차분 몫
        f_plus = objective.value(w + eps * z) + np.sum(xi * (w + eps * z), axis=-1)
        f_minus = objective.value(w - eps * z) + np.sum(xi * (w - eps * z), axis=-1)
        scale = (f_plus - f_minus) / (2.0 * eps)
        w = w - eta * scale[:, None] * z

    c = max(c_min, np.finfo(np.float64).tiny)
    if bound == "smooth":
        lhs = float(np.mean(grad_sq_sum / T))
        rhs = eval_bound_smooth(objective, k, c, T, gap)
    else:
        lhs = float(np.mean(objective.value(w)))
        rhs = eval_bound_pl(objective, k, c, T, gap)
    name = trial or f"{objective.profile}-{mask_mode}-k{k}-{bound}"
    return BoundReport(name, bound, T, k, c, objective.L, objective.mu, objective.sigma_sq,
                       lhs, rhs, seeds=seeds, informational=objective.noise_std > 0)


# --- 모멘트 보조정리 ---
def _masked_parts(g: np.ndarray, mask) -> tuple:
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    idx = np.arange(g.size) if mask is None else np.unique(np.asarray(mask, dtype=np.int64))
    if idx.size == 0 or idx.min() < 0 or idx.max() >= g.size:
        raise UsageError("마스크 인덱스가 비었거나 범위를 벗어났습니다.")
    return g, idx, g[idx]


def _mc_chunks(stream: RngStream, n_samples: int, k: int):
    done = 0
    while done < n_samples:
        n = min(MC_CHUNK, n_samples - done)
        yield stream.standard_normal(n * k).reshape(n, k)
        done += n


def mc_check_covariance(g, mask, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """E[ĝĝᵀ]의 몬테카를로 추정과 2(m⊙g)(m⊙g)ᵀ + ‖m⊙g‖²·Ĩ 의 Frobenius 상대 편차."""
    g, idx, gm = _masked_parts(g, mask)
    if g.size > 16:
        raise UsageError(f"공분산 검증은 d ≤ 16에서만 합니다: d={g.size}")
    if n_samples < 100_000:
        raise UsageError(f"n_samples는 10^5 이상이어야 합니다: {n_samples}")
    k = idx.size
    stream = RngStream(seed, derive_stream_id(seed, _LEMMA_STREAM, 1))
    acc = np.zeros((k, k))
    for z in _mc_chunks(stream, n_samples, k):
        est = (z @ gm)[:, None] * z
        acc += est.T @ est
    mc = np.zeros((g.size, g.size))
    mc[np.ix_(idx, idx)] = acc / n_samples

    closed = np.zeros((g.size, g.size))
    masked_g = np.zeros(g.size)
    masked_g[idx] = gm
    closed += 2.0 * np.outer(masked_g, masked_g)
    closed[idx, idx] += float(gm @ gm)
    norm = np.linalg.norm(closed)
    if norm == 0.0:
        return 0.0 if not mc.any() else float("inf")
    return float(np.linalg.norm(mc - closed) / norm)


def mc_check_norm(g, mask, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """|E‖ĝ‖²의 몬테카를로 추정 − (k+2)‖m⊙g‖²| / ((k+2)‖m⊙g‖²)."""
    g, idx, gm = _masked_parts(g, mask)
    if n_samples < 100_000:
        raise UsageError(f"n_samples는 10^5 이상이어야 합니다: {n_samples}")
    expected = (idx.size + 2) * float(gm @ gm)
    if expected == 0.0:
        raise UsageError("‖m⊙g‖ = 0이라 상대 편차를 정의할 수 없습니다.")
    stream = RngStream(seed, derive_stream_id(seed, _LEMMA_STREAM, 2))
    total = 0.0
    for z in _mc_chunks(stream, n_samples, idx.size):
        total += float(np.sum(np.square(z @ gm) * np.sum(np.square(z), axis=1)))
    return abs(total / n_samples - expected) / expected


def mc_check_loss_difference(objective: SyntheticObjective, w, mask, eps: float = DEFAULT_EPS,
                             n_samples: int = 100_000, seed: int = 0) -> float:
    """
    E[(f(w+εz̄) − f(w−εz̄))²] ≈ 4ε²‖m⊙∇f‖² 의 상대 편차.
    민감한 좌표만 섭동해도 손실 차이의 크기가 유지된다는 근거입니다.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    g, idx, gm = _masked_parts(objective.grad(w), mask)
    expected = 4.0 * eps ** 2 * float(gm @ gm)
    if expected == 0.0:
        raise UsageError("‖m⊙∇f‖ = 0이라 상대 편차를 정의할 수 없습니다.")
    stream = RngStream(seed, derive_stream_id(seed, _LEMMA_STREAM, 3))
    total = 0.0
    for zk in _mc_chunks(stream, n_samples, idx.size):
        z = np.zeros((zk.shape[0], g.size))
        z[:, idx] = zk
        diff = objective.value(w + eps * z) - objective.value(w - eps * z)
        total += float(np.sum(np.square(diff)))
    return abs(total / n_samples - expected) / expected


# --- 기본 묶음 ---
@dataclass
class TrialSpec:
    name: str
    profile: str
    k: int
    bound: str
    noise_std: float = 0.0
    T: int = 2000
    seeds: int = 20
    mask_mode: str = "dynamic"
    d: int = 100

    def objective(self) -> SyntheticObjective:
        if self.profile == "linear":
            return SyntheticObjective.linear_profile(self.d, self.noise_std)
        if self.profile == "heavy-tailed":
            return SyntheticObjective.heavy_tailed_profile(self.d, self.noise_std)
        raise UsageError(f"알 수 없는 곡률 프로파일입니다: {self.profile}")


@dataclass
class LemmaSpec:
    name: str
    kind: str  # covariance | norm
    g: List[float]
    mask: Optional[List[int]] = None
    n_samples: int = 1_000_000

    @property
    def tolerance(self) -> float:
        return 0.03 if self.kind == "covariance" else 0.02


def default_suite(T: int = 2000, seeds: int = 20, include_noisy: bool = False) -> List[TrialSpec]:
    """곡률 2종 × k ∈ {1, 10, 100} (d=100) × 보장식 2종. 잡음 있는 시행은 참고용."""
    specs = []
    for profile in ("linear", "heavy-tailed"):
        for k in (1, 10, 100):
            for bound in BOUNDS:
                mode = "full" if k == 100 else "dynamic"
                specs.append(TrialSpec(f"{profile}-k{k}-{bound}", profile, k, bound,
                                       T=T, seeds=seeds, mask_mode=mode))
    if include_noisy:
        for k in (1, 10):
            specs.append(TrialSpec(f"linear-k{k}-pl-noisy", "linear", k, "pl", noise_std=0.1,
                                   T=T, seeds=seeds))
    return specs


def default_lemmas(n_samples: int = 1_000_000) -> List[LemmaSpec]:
    return [
        LemmaSpec("covariance-e0", "covariance", [1.0, 0.0], n_samples=n_samples),
        LemmaSpec("covariance-ones", "covariance", [1.0, 1.0], n_samples=n_samples),
        LemmaSpec("covariance-masked", "covariance", [0.5, -1.0, 2.0, 0.25, 1.5, -0.75],
                  mask=[1, 2, 4], n_samples=n_samples),
        LemmaSpec("norm-full", "norm", [3.0, 4.0], n_samples=n_samples),
        LemmaSpec("norm-k1", "norm", [3.0, 4.0], mask=[1], n_samples=n_samples),
        LemmaSpec("norm-d8-k3", "norm", [1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -0.5, 2.5],
                  mask=[1, 3, 7], n_samples=n_samples),
        LemmaSpec("norm-d8-full", "norm", [1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -0.5, 2.5],
                  n_samples=n_samples),
        LemmaSpec("norm-scaled", "norm", [30.0, 40.0], mask=[0], n_samples=n_samples),
    ]


def check_suite_lr(specs: Iterable[TrialSpec], lr_scale: float = 1.0) -> None:
    """실행 전에 η 배율을 검사합니다. 보장식은 lr_scale = 1에서만 성립합니다."""
    for spec in specs:
        objective = spec.objective()
        k = spec.d if spec.mask_mode == "full" else spec.k
        check_guaranteed_lr(objective, k, guaranteed_lr(objective.L, k) * lr_scale)


def run_trial_spec(spec: TrialSpec, seed: int = 0) -> BoundReport:
    fraction = spec.k / spec.d
    return run_theory_trial(spec.objective(), spec.mask_mode, fraction, spec.T, spec.seeds,
                            bound=spec.bound, seed=seed, trial=spec.name)


def run_lemma_spec(spec: LemmaSpec, seed: int = 0) -> BoundReport:
    g = np.asarray(spec.g, dtype=np.float64)
    if spec.kind == "covariance":
        deviation = mc_check_covariance(g, spec.mask, spec.n_samples, seed)
    elif spec.kind == "norm":
        deviation = mc_check_norm(g, spec.mask, spec.n_samples, seed)
    else:
        raise UsageError(f"알 수 없는 보조정리 종류입니다: {spec.kind}")
    idx = np.arange(g.size) if spec.mask is None else np.asarray(spec.mask)
    total = float(g @ g)
    c = float(np.sum(np.square(g[idx])) / total) if total > 0 else float("nan")
    nan = float("nan")
    return BoundReport(spec.name, spec.kind, 0, int(idx.size), c, nan, nan, 0.0,
                       deviation, spec.tolerance, seeds=1)


def run_suite(trials: Iterable[TrialSpec], lemmas: Iterable[LemmaSpec] = (), seed: int = 0,
              map_fn: Callable = map) -> List[BoundReport]:
    """시행과 보조정리 검증을 순서대로 실행합니다. map_fn으로 병렬 실행기를 넘길 수 있습니다."""
    jobs = [("trial", spec) for spec in trials] + [("lemma", spec) for spec in lemmas]
    return list(map_fn(_run_job, [(kind, spec, seed) for kind, spec in jobs]))


def _run_job(job) -> BoundReport:
    kind, spec, seed = job
    return run_trial_spec(spec, seed) if kind == "trial" else run_lemma_spec(spec, seed)


def suite_frame(reports: List[BoundReport]) -> pd.DataFrame:
    return pd.DataFrame([r.summary_row() for r in reports], columns=SUITE_COLUMNS)


def suite_passed(reports: List[BoundReport]) -> bool:
    """참고용(잡음) 시행을 제외한 모든 행이 만족해야 통과입니다."""
    return all(r.satisfied for r in reports if not r.informational)


def summarize(reports: List[BoundReport]) -> Dict[str, int]:
    hard = [r for r in reports if not r.informational]
    return {"rows": len(reports), "checked": len(hard),
            "failed": sum(not r.satisfied for r in hard)}
