import numpy as np
import pytest

from data_handler import sample_batch
from errors import IntegrityError, NumericError, StructuralError, UsageError
from mlp_model import Batch, LossKind, MlpModel
from optimizer import (DirectionSource, PackedParams, ZoConfig, draw_direction, masked_spsa, materialized_step,
                       packed_step, seed_trick_step, sensitive_zo_sgd_step, spsa_estimate,
                       guaranteed_lr, tune_learning_rate, zo_sgd_step)
from param_store import ParamStore, store_dot
from quantizer import DecomposedModel
from rng_stream import RngStream
from sensitivity_analyzer import SparseMask, random_mask, score_sensitivity, select_topk

CE = LossKind.CROSS_ENTROPY


class Quadratic:
    """f(w) = ½ wᵀAw + bᵀw (배치 무시)."""

    def __init__(self, A, b):
        self.A, self.b = A, b

    def loss_at(self, params, batch, loss):
        w = params["w"]
        return float(0.5 * w @ self.A @ w + self.b @ w)

    def grad(self, w):
        return self.A @ w + self.b


class NanModel:
    def loss_at(self, params, batch, loss):
        return float("nan")


def _dataset():
    s = RngStream(21, 0)
    inputs = s.standard_normal(200).reshape(100, 2)
    return Batch(inputs, (inputs[:, 0] * inputs[:, 1] > 0).astype(np.int64))


def test_spsa_is_exact_on_quadratics():
    s = RngStream(100, 0)
    dummy = Batch(np.zeros((1, 1)), np.zeros((1, 1)))
    for trial in range(1000):
        d = 1 + trial % 100
        M = s.standard_normal(d * d).reshape(d, d)
        model = Quadratic(M @ M.T / d, s.standard_normal(d))
        params = ParamStore({"w": s.standard_normal(d)})
        z = draw_direction(s, params.shapes())
        estimate = spsa_estimate(model, params, dummy, LossKind.MSE, z, eps=0.5)
        exact = float(z["w"] @ model.grad(params["w"]))
        scale = np.linalg.norm(z["w"]) * np.linalg.norm(model.grad(params["w"]))
        assert abs(estimate.scale - exact) <= 1e-10 * max(abs(exact), scale)


def test_estimate_leaves_params_bitwise_intact(tiny_model, tiny_batch):
    params = tiny_model.params.copy()
    before = params.checksum()
    mask = select_topk(score_sensitivity(tiny_model, tiny_batch, CE, 2, 4), 0.3)
    masked_spsa(tiny_model, params, tiny_batch, CE, RngStream(1, 1), mask, eps=1e-3)
    assert params.checksum() == before


def test_stream_advance_counts(tiny_model, tiny_batch):
    params = tiny_model.params
    mask = random_mask(params, 0.25, RngStream(0, 0))
    compact = RngStream(2, 2)
    masked_spsa(tiny_model, params, tiny_batch, CE, compact, mask, compact=True)
    assert compact.counter == mask.k
    full = RngStream(2, 2)
    masked_spsa(tiny_model, params, tiny_batch, CE, full, mask, compact=False)
    assert full.counter == params.total_dim()


def test_full_mask_draws_match_unmasked(tiny_model):
    shapes = tiny_model.params.shapes()
    full = SparseMask.full(shapes)
    plain = draw_direction(RngStream(3, 3), shapes)
    for compact in (True, False):
        z = draw_direction(RngStream(3, 3), shapes, full, compact)
        assert z.checksum() == plain.checksum()


def test_masked_direction_is_zero_off_mask(tiny_model):
    params = tiny_model.params
    mask = random_mask(params, 0.25, RngStream(4, 4))
    for compact in (True, False):
        z = draw_direction(RngStream(5, 5), params.shapes(), mask, compact)
        for name in z:
            assert np.all(z[name][~mask.boolean(name)] == 0.0)
            assert np.count_nonzero(z[name]) == mask.indices(name).size


def test_update_touches_only_masked_coordinates(tiny_model, tiny_batch):
    params = tiny_model.params.copy()
    mask = random_mask(params, 0.25, RngStream(6, 6))
    config = ZoConfig(eps=1e-3, lr=0.1)
    params, estimate = sensitive_zo_sgd_step(params, tiny_model, tiny_batch, CE,
                                             RngStream(7, 7), mask, config)
    for name in params:
        off = ~mask.boolean(name)
        np.testing.assert_array_equal(params[name][off], tiny_model.params[name][off])
    assert estimate.scale != 0.0


def test_zo_step_follows_estimate(tiny_model, tiny_batch):
    params = tiny_model.params.copy()
    z = draw_direction(RngStream(8, 8), params.shapes())
    estimate = spsa_estimate(tiny_model, params, tiny_batch, CE, z)
    expected = store_dot(params, z) - 0.05 * estimate.scale * store_dot(z, z)
    zo_sgd_step(params, estimate, 0.05)
    assert store_dot(params, z) == pytest.approx(expected, rel=1e-12, abs=1e-10)
    g = estimate.materialize(params.shapes())
    np.testing.assert_array_equal(g["layer0.weight"], estimate.scale * z["layer0.weight"])


def test_seed_trick_matches_materialized_trajectory():
    model = MlpModel.initialize([2, 16, 16, 2], "tanh", RngStream(30, 0))
    data = _dataset()
    mask = select_topk(score_sensitivity(model, data, CE, 4, 16), 0.1)
    config = ZoConfig(eps=1e-3, lr=0.05, debug_checksum=True)

    a, b = model.params.copy(), model.params.copy()
    stream_a, stream_b = RngStream(31, 1), RngStream(31, 1)
    batches_a, batches_b = RngStream(32, 2), RngStream(32, 2)
    for _ in range(100):
        a, _ = seed_trick_step(a, model, sample_batch(data, 16, batches_a), CE,
                               stream_a.state(), mask, config, stream_a)
        b, _ = materialized_step(b, model, sample_batch(data, 16, batches_b), CE,
                                 stream_b, mask, config)
    assert a.checksum() == b.checksum()
    assert stream_a.counter == stream_b.counter == 100 * mask.k


def test_seed_trick_rejects_stale_record(tiny_model, tiny_batch):
    stream = RngStream(9, 9)
    record = stream.state()
    stream.skip(3)
    with pytest.raises(IntegrityError):
        seed_trick_step(tiny_model.params.copy(), tiny_model, tiny_batch, CE, record, None,
                        ZoConfig(), stream)


def test_packed_path_matches_fixed_mask():
    model = MlpModel.initialize([2, 16, 16, 2], "tanh", RngStream(40, 0))
    data = _dataset()
    mask = select_topk(score_sensitivity(model, data, CE, 4, 16), 0.05)
    config = ZoConfig(eps=1e-3, lr=0.05)

    decomposed = DecomposedModel.from_params(model, model.params, mask, quantize=False)
    packed = decomposed.packed()
    params = model.params.copy()
    zs_packed, zs_fixed = RngStream(41, 1), RngStream(41, 1)
    bs_packed, bs_fixed = RngStream(42, 2), RngStream(42, 2)
    for _ in range(100):
        packed, _ = packed_step(packed, decomposed, sample_batch(data, 16, bs_packed), CE, zs_packed, config)
        params, _ = sensitive_zo_sgd_step(params, model, sample_batch(data, 16, bs_fixed), CE,
                                          zs_fixed, mask, config)
    restored = packed.scatter(params)
    for name in params:
        np.testing.assert_allclose(restored[name], params[name], rtol=1e-9, atol=0)
    np.testing.assert_allclose(packed.values, PackedParams.extract(params, mask).values, rtol=1e-9)


def test_non_finite_loss_raises_with_values(tiny_model):
    params = ParamStore({"w": np.zeros(3)})
    with pytest.raises(NumericError) as info:
        masked_spsa(NanModel(), params, None, CE, RngStream(0, 0), None)
    assert "loss_plus" in info.value.values


def test_spsa_structure_mismatch(tiny_model, tiny_batch):
    z = ParamStore({"other": np.ones(3)})
    with pytest.raises(StructuralError):
        spsa_estimate(tiny_model, tiny_model.params, tiny_batch, CE, z)


def test_guaranteed_lr():
    assert guaranteed_lr(2.0, 8) == pytest.approx(1.0 / 20.0)
    with pytest.raises(UsageError):
        guaranteed_lr(0.0, 1)
    with pytest.raises(UsageError):
        guaranteed_lr(1.0, 0)


@pytest.mark.parametrize("kwargs", [{"eps": 0.0}, {"lr": -1.0}, {"steps": 0},
                                    {"mask_mode": "sideways"}, {"draws": "half"}])
def test_zo_config_validation(kwargs):
    with pytest.raises(UsageError):
        ZoConfig(**kwargs)


def test_packed_params_requires_selection():
    empty = SparseMask({}, {"w": (3,)})
    with pytest.raises(UsageError):
        PackedParams(np.zeros(0), empty)


def test_packed_extract_scatter():
    mask = SparseMask({"w": np.array([0, 2])}, {"w": (2, 2)})
    params = ParamStore({"w": np.array([[1.0, 2.0], [3.0, 4.0]])})
    packed = PackedParams.extract(params, mask)
    np.testing.assert_array_equal(packed.values, [1.0, 3.0])
    np.testing.assert_array_equal(packed.scatter()["w"], [[1.0, 0.0], [3.0, 0.0]])


def test_tune_learning_rate_prefers_lowest_loss():
    losses = {0.001: 0.9, 0.01: 0.4, 0.1: 0.4, 1.0: float("nan")}
    lr, value = tune_learning_rate(lambda lr: losses[lr], list(losses))
    assert (lr, value) == (0.01, 0.4)


def test_tune_learning_rate_treats_divergence_as_inf():
    def run(lr):
        if lr > 0.05:
            raise NumericError("발산", loss_plus=float("inf"))
        return 1.0 / lr

    lr, _ = tune_learning_rate(run, [0.01, 0.02, 0.1])
    assert lr == 0.02


def test_masked_descent_on_diagonal_quadratic():
    model = Quadratic(np.diag(np.arange(1.0, 11.0)), np.zeros(10))
    mask = SparseMask({"w": np.array([7, 8, 9])}, {"w": (10,)})
    config = ZoConfig(eps=1e-3, lr=guaranteed_lr(10.0, 3))
    curves = []
    for seed in range(20):
        params, stream = ParamStore({"w": np.ones(10)}), RngStream(seed, 3)
        losses = [model.loss_at(params, None, LossKind.MSE)]
        for _ in range(60):
            params, _ = sensitive_zo_sgd_step(params, model, None, LossKind.MSE, stream, mask, config)
            losses.append(model.loss_at(params, None, LossKind.MSE))
        curves.append(losses)
    mean = np.mean(curves, axis=0)[::5]
    assert np.all(np.diff(mean) < 0)
    # 마스크 밖 좌표의 손실 ½·(1+…+7)은 남습니다
    floor = 0.5 * np.arange(1.0, 8.0).sum()
    assert mean[-1] - floor < 0.01 * (mean[0] - floor)


def test_unmasked_coordinates_stay_fixed_over_many_steps(tiny_model, tiny_batch):
    params = tiny_model.params.copy()
    mask = random_mask(params, 0.25, RngStream(10, 10))
    stream, config = RngStream(11, 11), ZoConfig(eps=1e-3, lr=0.05)
    for _ in range(200):
        params, _ = sensitive_zo_sgd_step(params, tiny_model, tiny_batch, CE, stream, mask, config)
    moved = 0
    for name in params:
        on = mask.boolean(name)
        np.testing.assert_array_equal(params[name][~on], tiny_model.params[name][~on])
        moved += np.count_nonzero(params[name][on] != tiny_model.params[name][on])
    assert moved == mask.k


@pytest.mark.slow
def test_masked_estimate_is_unbiased():
    model = Quadratic(np.eye(4), np.zeros(4))
    params = ParamStore({"w": np.array([3.0, 4.0, -1.0, 2.0])})
    mask = SparseMask({"w": np.array([0, 2])}, {"w": (4,)})
    stream, n = RngStream(80, 0), 100_000
    total = np.zeros(4)
    for _ in range(n):
        estimate = masked_spsa(model, params, None, LossKind.MSE, stream, mask)
        total += estimate.materialize(params.shapes())["w"]
    mean = total / n
    masked_grad = np.array([3.0, 0.0, -1.0, 0.0])
    # Var(ĝ_i) = ‖m⊙g‖² + g_i²
    sigma = np.sqrt((10.0 + masked_grad ** 2) / n)
    assert np.all(np.abs(mean - masked_grad) <= 4 * sigma)
    assert mean[1] == 0.0 and mean[3] == 0.0


def test_seed_trick_draws_layer_sized_pieces(monkeypatch):
    model = MlpModel.initialize([2, 16, 16, 2], "tanh", RngStream(33, 0))
    params = model.params.copy()
    mask = random_mask(params, 0.2, RngStream(34, 0))
    sizes = []
    normal_at = RngStream.normal_at

    def recording(self, position, n):
        sizes.append(n)
        return normal_at(self, position, n)

    monkeypatch.setattr(RngStream, "normal_at", recording)
    monkeypatch.setattr(DirectionSource, "materialize",
                        lambda self: pytest.fail("z̄ 전체를 한 번에 만들었습니다"))
    stream = RngStream(35, 1)
    config = ZoConfig(eps=1e-3, lr=0.05, draws="full")
    seed_trick_step(params, model, _dataset(), CE, stream.state(), mask, config, stream)
    largest = max(int(np.prod(shape)) for shape in params.shapes().values())
    assert sizes and max(sizes) <= largest < params.total_dim()
