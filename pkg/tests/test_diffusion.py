import math

import mpmath
import numpy as np
import pytest

from conftest import TOY_LENGTH
from mrcqtdiff import autodiff as ad
from mrcqtdiff.autodiff import Tensor, gradcheck
from mrcqtdiff.data import ArrayDataset, two_tone_corpus
from mrcqtdiff.diffusion import (
    AdamState,
    NoiseScheduleConfig,
    Preconditioner,
    ScoreModel,
    SigmaSampling,
    TrainerConfig,
    adam_step,
    dsm_loss,
    ema_update,
    heun_sample,
    lambda_weight,
    precondition,
    schedule_times,
    train,
)
from mrcqtdiff.errors import NumericalError, ParameterError, SizeError
from mrcqtdiff.gradsuite import toy_net_config, toy_spec
from mrcqtdiff.net import MRCQTNet

# midpoint of the default 51-point schedule, evaluated once at 40 digits (see test below)
TAU_25 = 0.076850710369549390186


def gaussian_score(x, tau):
    return -x / (1.0 + tau * tau)


def denoiser_for_score(score, pre):
    """Turn an analytic score into the network ``F`` that the preconditioner expects."""
    def F(y, sigma):
        y = np.asarray(y.data if isinstance(y, Tensor) else y)
        s = np.asarray(sigma, dtype=np.float64)[:, None]
        x = y / pre.c_in(s)
        return Tensor((s * s * score(x, s) - (pre.c_skip(s) - 1.0) * x) / pre.c_out(s))
    return F


class TwoParameterModel:
    """``F(y, sigma) = a * y + b``: the smallest trainable denoiser."""

    def __init__(self, a=0.3, b=-0.1):
        self.params = {"a": Tensor(np.array([a]), requires_grad=True),
                       "b": Tensor(np.array([b]), requires_grad=True)}

    def __call__(self, y, sigma):
        return Tensor(np.asarray(y)) * self.params["a"] + self.params["b"]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def test_schedule_endpoints_and_monotonicity():
    taus = schedule_times(NoiseScheduleConfig())
    assert taus.size == 51
    assert taus[0] == 8.0 and taus[50] == 1e-5
    assert np.all(np.diff(taus) < 0)


def test_schedule_midpoint_matches_high_precision_evaluation():
    mpmath.mp.dps = 40
    a = mpmath.mpf(8) ** (mpmath.mpf(1) / 10)
    b = mpmath.mpf("1e-5") ** (mpmath.mpf(1) / 10)
    oracle = (a + mpmath.mpf(25) / 50 * (b - a)) ** 10
    taus = schedule_times(NoiseScheduleConfig())
    assert taus[25] == pytest.approx(float(oracle), rel=1e-14)
    assert taus[25] == pytest.approx(TAU_25, rel=1e-14)


def test_unit_rho_gives_uniform_spacing():
    taus = schedule_times(NoiseScheduleConfig(rho=1.0, num_steps=17))
    np.testing.assert_allclose(np.diff(taus), np.diff(taus)[0], atol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(sigma_min=8.0), dict(sigma_min=0.0), dict(num_steps=1),
                                    dict(num_steps=2.5), dict(rho=0.0)])
def test_invalid_schedules(kwargs):
    with pytest.raises(ParameterError):
        NoiseScheduleConfig(**kwargs)


def test_preconditioner_formulas():
    pre = Preconditioner(0.5)
    s = np.array([0.01, 1.0, 8.0])
    np.testing.assert_allclose(pre.c_skip(s), 0.25 / (s**2 + 0.25))
    np.testing.assert_allclose(pre.c_out(s), 0.5 * s / np.sqrt(s**2 + 0.25))
    np.testing.assert_allclose(pre.c_in(s), 1 / np.sqrt(s**2 + 0.25))
    np.testing.assert_allclose(pre.c_noise(s), np.log(s) / 4)
    with pytest.raises(ParameterError):
        Preconditioner(0.0)


def test_zero_network_with_unit_skip_gives_zero_score():
    pre = Preconditioner(1.0)
    # as sigma -> 0 the skip weight tends to one; at sigma = 1e-8 it is 1 to double precision
    s = precondition(lambda y, sig: np.zeros_like(y), np.ones((2, 4)), 1e-8, pre)
    assert np.all(s == 0)


def test_precondition_recovers_denoised_estimate():
    pre = Preconditioner(0.5)
    rng = np.random.default_rng(0)
    x, d = rng.standard_normal((2, 3, 16))
    sigma = np.array([0.1, 0.7, 3.0])
    s_ = sigma[:, None]

    def F(y, sig):
        xx = y / pre.c_in(s_)
        return (d - pre.c_skip(s_) * xx) / pre.c_out(s_)

    np.testing.assert_allclose(precondition(F, x, sigma, pre), (d - x) / s_**2, rtol=1e-10, atol=1e-12)
    with pytest.raises(ParameterError):
        precondition(F, x, -1.0, pre)
    with pytest.raises(SizeError):
        precondition(lambda y, sig: y[:, :3], x, sigma, pre)


@pytest.mark.parametrize("sigma", [0.01, 1.0, 8.0])
def test_input_scaling_gives_unit_variance(sigma):
    pre = Preconditioner(1.0)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(200_000) + sigma * rng.standard_normal(200_000)
    assert np.var(pre.c_in(sigma) * x) == pytest.approx(1.0, rel=0.1)


def test_lambda_weightings():
    pre = Preconditioner(0.5)
    s = np.array([0.1, 2.0])
    np.testing.assert_allclose(lambda_weight(s, pre, "inverse_c_out_sq"), 1 / pre.c_out(s) ** 2)
    np.testing.assert_allclose(lambda_weight(s, pre), s**4 / pre.c_out(s) ** 2)
    with pytest.raises(ParameterError):
        lambda_weight(s, pre, "uniform")


def test_sigma_sampling_is_clipped_log_normal():
    draws = SigmaSampling().draw(np.random.default_rng(2), 200_000)
    assert draws.min() >= 1e-5 and draws.max() <= 8.0
    logs = np.log(draws[(draws > 1e-5) & (draws < 8.0)])
    assert logs.mean() == pytest.approx(-1.2, abs=0.02)
    assert logs.std() == pytest.approx(1.2, abs=0.02)


def test_oracle_model_has_zero_loss():
    pre = Preconditioner(0.5)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 32))
    sigma = np.array([0.05, 0.5, 2.0, 7.0])
    eps = rng.standard_normal(x0.shape)

    def oracle(y, sig):
        s = sig[:, None]
        x_tau = x0 + s * eps
        target = -eps / s
        return Tensor((s * s * target - (pre.c_skip(s) - 1.0) * x_tau) / pre.c_out(s))

    for kind in ("unit_target", "inverse_c_out_sq"):
        loss = dsm_loss(oracle, x0, rng, pre, lambda_weighting=kind, sigma=sigma, eps=eps)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-20)


def test_loss_is_non_negative_for_random_models():
    pre = Preconditioner(0.5)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((3, 16))
    for _ in range(5):
        w = rng.standard_normal()
        assert float(dsm_loss(lambda y, s: Tensor(w * np.asarray(y)), x0, rng, pre).data) >= 0


def test_analytic_gaussian_score_beats_zero_models():
    sigma_d = 0.5
    pre = Preconditioner(sigma_d)
    rng = np.random.default_rng(5)
    n = 100_000
    x0 = sigma_d * rng.standard_normal((n, 1))
    sigma = np.ones(n)
    eps = rng.standard_normal((n, 1))
    analytic = denoiser_for_score(lambda x, s: -x / (sigma_d**2 + s * s), pre)
    zero_score = denoiser_for_score(lambda x, s: np.zeros_like(x), pre)
    zero_net = lambda y, s: Tensor(np.zeros_like(np.asarray(y)))
    losses = {name: float(dsm_loss(F, x0, rng, pre, sigma=sigma, eps=eps).data)
              for name, F in [("analytic", analytic), ("zero score", zero_score), ("zero net", zero_net)]}
    assert losses["analytic"] < losses["zero score"]
    assert losses["analytic"] < losses["zero net"]


def test_loss_gradient_on_two_parameter_model():
    pre = Preconditioner(0.5)
    model = TwoParameterModel()
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((3, 8))
    sigma = np.array([0.2, 1.0, 3.0])
    eps = rng.standard_normal(x0.shape)
    rep = gradcheck(lambda a, b: dsm_loss(model, x0, rng, pre, sigma=sigma, eps=eps),
                    [model.params["a"], model.params["b"]], eps=1e-6)
    assert rep.passed, rep.line()


def test_empty_batch_is_rejected():
    with pytest.raises(SizeError):
        dsm_loss(TwoParameterModel(), np.zeros((0, 4)), np.random.default_rng(0), Preconditioner())


def test_heun_point_mass_converges():
    mu = 0.7
    x = heun_sample(lambda x, t: (mu - x) / (t * t), NoiseScheduleConfig(), np.random.default_rng(7), 256, 1)
    assert np.max(np.abs(x - mu)) < 1e-3


def test_heun_gaussian_moments():
    x = heun_sample(gaussian_score, NoiseScheduleConfig(), np.random.default_rng(8), 4096, 1)
    assert -0.05 <= x.mean() <= 0.05
    assert 0.93 <= x.var() <= 1.07


def heun_terminal_errors(steps):
    errs = []
    for t in steps:
        x = heun_sample(gaussian_score, NoiseScheduleConfig(num_steps=t), np.random.default_rng(0), 16, 1)
        x_init = np.random.default_rng(0).standard_normal((16, 1)) * 8.0
        exact = x_init * math.sqrt(1 + 1e-10) / math.sqrt(65.0)
        errs.append(np.max(np.abs(x - exact)))
    return np.array(errs)


def test_heun_is_second_order():
    errs = heun_terminal_errors([21, 41, 81])
    orders = np.log2(errs[:-1] / errs[1:])
    assert np.all((orders >= 1.7) & (orders <= 2.3)), orders


def test_degenerate_two_point_schedule_terminates():
    x = heun_sample(gaussian_score, NoiseScheduleConfig(num_steps=2), np.random.default_rng(9), 8, 3)
    assert x.shape == (8, 3) and np.all(np.isfinite(x))


def test_sampler_reports_the_failing_step():
    def exploding(x, t):
        return np.full_like(x, np.nan) if t < 1.0 else -x
    with pytest.raises(NumericalError, match="step") as info:
        heun_sample(exploding, NoiseScheduleConfig(), np.random.default_rng(0), 2, 2)
    assert info.value.snapshot["step"] > 0


def test_sampler_is_deterministic():
    run = lambda: heun_sample(gaussian_score, NoiseScheduleConfig(num_steps=11), np.random.default_rng(10), 4, 5)
    assert run().tobytes() == run().tobytes()


def test_ema_update_rules():
    rng = np.random.default_rng(11)
    p = {"w": rng.standard_normal(4)}
    e0 = {"w": rng.standard_normal(4)}
    np.testing.assert_array_equal(ema_update(e0, p, 0.0)["w"], p["w"])
    np.testing.assert_array_equal(ema_update(e0, p, 1.0)["w"], e0["w"])
    e = e0
    for _ in range(10):
        e = ema_update(e, p, 0.9)
    np.testing.assert_allclose(e["w"], p["w"] + (e0["w"] - p["w"]) * 0.9**10, atol=1e-12)
    with pytest.raises(SizeError):
        ema_update({"v": p["w"]}, p, 0.5)


def test_adam_zero_gradient_leaves_parameters():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_descends_a_quadratic_and_matches_closed_form():
    # loss 0.5 (w - 3)^2; the first bias-corrected step moves by exactly lr * sign(g)
    p, state = {"w": np.array([0.0])}, AdamState()
    losses = []
    for _ in range(2):
        g = p["w"] - 3.0
        losses.append(0.5 * float(g @ g))
        p, state = adam_step(p, {"w": g}, state, 0.1)
        if state.step == 1:
            assert p["w"][0] == pytest.approx(0.1, abs=1e-8)
    assert 0.5 * float((p["w"] - 3) @ (p["w"] - 3)) < losses[1] < losses[0]
    with pytest.raises(SizeError):
        adam_step(p, {"w": np.zeros(3)}, state, 0.1)


def test_adam_is_deterministic():
    rng = np.random.default_rng(12)
    p, g = {"w": rng.standard_normal(5)}, {"w": rng.standard_normal(5)}
    a = adam_step(p, g, AdamState(3, {"w": np.ones(5)}, {"w": np.ones(5)}), 1e-3)
    b = adam_step(p, g, AdamState(3, {"w": np.ones(5)}, {"w": np.ones(5)}), 1e-3)
    assert a[0]["w"].tobytes() == b[0]["w"].tobytes()


def test_trainer_config_validation():
    with pytest.raises(ParameterError):
        TrainerConfig(ema_decay=1.0)
    with pytest.raises(ParameterError):
        TrainerConfig(learning_rate=0.0)
    with pytest.raises(ParameterError):
        TrainerConfig(lambda_weighting="flat")


def test_training_aborts_on_non_finite_loss():
    model = TwoParameterModel(a=np.nan)
    cfg = TrainerConfig(num_iterations=3, batch_size=2)
    with pytest.raises(NumericalError) as info:
        train(model, lambda r: r.standard_normal((2, 4)), cfg, Preconditioner())
    snap = info.value.snapshot
    assert snap["iteration"] == 0 and "param_norms" in snap and len(snap["sigma"]) == 2


def test_checkpoint_cadence_and_log_records():
    model = TwoParameterModel()
    seen = []
    cfg = TrainerConfig(num_iterations=7, batch_size=2, checkpoint_every=3, learning_rate=1e-2)
    res = train(model, lambda r: r.standard_normal((2, 4)), cfg, Preconditioner(),
                on_checkpoint=lambda n, *rest: seen.append(n))
    assert seen == res.checkpoints == [3, 6]
    assert [r.iteration for r in res.records] == list(range(1, 8))
    assert res.adam.step == 7
    line = res.records[0].line().split()
    assert len(line) == 4 and float(line[1]) == res.losses[0]


@pytest.fixture(scope="module")
def toy_training():
    corpus = two_tone_corpus(64, TOY_LENGTH, 16384, seed=1234)
    ds = ArrayDataset(corpus)

    def run():
        net = MRCQTNet(toy_net_config(zero_init=True), toy_spec(), TOY_LENGTH, seed=0)
        cfg = TrainerConfig(learning_rate=1e-4, batch_size=2, num_iterations=200, rng_seed=0)
        return net, train(net, lambda r: ds.next_batch(r, 2), cfg, Preconditioner(0.5))

    return run(), run()


def test_toy_training_reduces_loss(toy_training):
    (_, res), _ = toy_training
    losses = np.array(res.losses)
    assert losses[-50:].mean() < losses[:50].mean()


def test_toy_training_is_bit_reproducible(toy_training):
    (net_a, a), (net_b, b) = toy_training
    assert np.array(a.losses).tobytes() == np.array(b.losses).tobytes()
    assert all(net_a.params[k].data.tobytes() == net_b.params[k].data.tobytes() for k in net_a.params)


def test_ema_departs_from_raw_parameters(toy_training):
    (net, res), _ = toy_training
    raw = net.param_arrays()
    assert any(not np.array_equal(res.ema[k], raw[k]) for k in raw)
