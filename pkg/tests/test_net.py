import numpy as np
import pytest

from conftest import PAPER_LENGTH, TOY_LENGTH
from mrcqtdiff import autodiff as ad
from mrcqtdiff.autodiff import Tensor, gradcheck
from mrcqtdiff.config import load_config
from mrcqtdiff.cqt import cqt_forward, paper_multires_spec
from mrcqtdiff.diffusion import Preconditioner, ScoreModel
from mrcqtdiff.errors import ConfigError, ParameterError
from mrcqtdiff.gradsuite import end_to_end_gradcheck, toy_net_config, toy_spec
from mrcqtdiff.net import MRCQTNet, NetConfig


@pytest.fixture(scope="module")
def toy_net():
    return MRCQTNet(toy_net_config(zero_init=True), toy_spec(), TOY_LENGTH, seed=0)


@pytest.fixture(scope="module")
def live_net():
    """Toy network without zero initialisation, in float64, so every path carries signal."""
    return MRCQTNet(toy_net_config(zero_init=False), toy_spec(), TOY_LENGTH, seed=1).astype(np.float64)


def toy_grids(net, batch=1, seed=0):
    x = np.random.default_rng(seed).standard_normal((batch, TOY_LENGTH))
    return [Tensor(t.data.astype(net.dtype)) for t in net.analysis(Tensor(x))]


def test_config_validation():
    with pytest.raises(ConfigError):
        NetConfig(channels=(8, 16), dilated_convs=(2,))
    with pytest.raises(ConfigError):
        NetConfig(channels=(16, 8), dilated_convs=(2, 2))
    with pytest.raises(ConfigError):
        NetConfig(channels=(8,), dilated_convs=(2,), kernel_size=4)
    with pytest.raises(ConfigError):
        MRCQTNet(NetConfig(channels=(8, 16), dilated_convs=(2, 2)), toy_spec(), TOY_LENGTH)
    with pytest.raises(ConfigError):
        MRCQTNet(NetConfig(channels=(8, 16, 32), dilated_convs=(2, 6, 2)), toy_spec(), TOY_LENGTH)


def test_toy_level_plan(toy_net):
    plan = [(p.level, p.octave, p.bins, p.freq_size, p.frames, p.resampling) for p in toy_net.plans]
    assert plan == [(1, 3, 8, 8, 2048, "time"), (2, 2, 8, 16, 1024, "freq"), (3, 1, 4, 12, 1024, "none")]


def test_paper_level_plan_follows_published_routing():
    cfg = load_config("paper")
    net = MRCQTNet(cfg.net_config(), cfg.multires_spec(), PAPER_LENGTH)
    octaves = [p.octave for p in net.plans]
    assert octaves == list(range(9, 0, -1))
    assert [p.bins for p in net.plans] == [32, 32, 16, 16, 16, 16, 8, 8, 8]
    assert [p.resampling for p in net.plans] == ["time", "freq", "time", "time", "time", "freq",
                                                 "time", "time", "none"]
    assert net.plans[0].freq_size == 32 and net.plans[0].frames == 8192
    assert net.parameter_count == sum(t.data.size for t in net.params.values())


def test_rff_frequencies_are_frozen_buffers(toy_net):
    assert "rff" in toy_net.buffers
    assert not any("rff" in name for name in toy_net.params)


def test_noise_embedding(toy_net):
    a = toy_net.noise_embed(0.3).data
    b = toy_net.noise_embed(0.3).data
    assert a.tobytes() == b.tobytes()
    lo, hi = toy_net.noise_embed(1e-5).data, toy_net.noise_embed(8.0).data
    assert np.linalg.norm(lo - hi) > 0
    sweep = toy_net.noise_embed(np.geomspace(1e-5, 8, 50)).data
    assert sweep.shape == (50, toy_net.config.embedding_dim)
    assert np.all(np.isfinite(sweep))
    with pytest.raises(ParameterError):
        toy_net.noise_embed(0.0)
    with pytest.raises(ParameterError):
        toy_net.noise_embed(-1.0)


def test_in_block_shape_and_conditioning(live_net):
    g = toy_grids(live_net)[2]
    e1, e2 = live_net.noise_embed(0.1), live_net.noise_embed(5.0)
    h1 = live_net.in_block(1, g, e1).data
    assert h1.shape == (1, 8, 8, 2048)
    assert not np.allclose(h1, live_net.in_block(1, g, e2).data)


def test_in_block_of_zero_input_is_bias_only(toy_net):
    emb = toy_net.noise_embed(1.0)
    h = toy_net.in_block(1, Tensor(np.zeros((1, 2, 8, 2048), np.float32)), emb).data
    # zero pre-norm activations stay zero through norm, FiLM and GELU; only the zero bias remains
    assert np.all(h == 0)


def test_res_block_is_identity_at_zero_init(toy_net):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 8, 64)).astype(np.float32))
    y = toy_net.res_block("enc1.res", x, toy_net.noise_embed(np.array([0.5, 2.0])), 2)
    assert y.shape == x.shape
    assert np.array_equal(y.data, x.data)


def test_res_block_shapes_for_every_level(live_net):
    emb = live_net.noise_embed(1.0)
    for plan, c in zip(live_net.plans, live_net.config.channels):
        x = Tensor(np.random.default_rng(plan.level).standard_normal((1, c, plan.freq_size, 16)))
        prefix = f"enc{plan.level}.res"
        assert live_net.res_block(prefix, x, emb, live_net.config.dilated_convs[plan.level - 1]).shape == x.shape


def test_res_block_gradcheck(live_net):
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 8, 8, 6)))
    emb = live_net.noise_embed(0.7).detach()
    w = rng.standard_normal((1, 8, 8, 6))
    prefix = "enc1.res"
    names = [f"{prefix}.time", f"{prefix}.freq1", f"{prefix}.film.w", f"{prefix}.gain"]
    rep = gradcheck(lambda *_: ad.sum(live_net.res_block(prefix, x, emb, 2) * w),
                    [x] + [live_net.params[n] for n in names], max_entries=6, rng=rng)
    assert rep.passed, rep.line()


def test_out_block_zero_init_and_shape(toy_net):
    h = Tensor(np.random.default_rng(0).standard_normal((1, 16, 8, 1024)).astype(np.float32))
    y = toy_net.out_block(2, h, toy_net.noise_embed(1.0))
    assert y.shape == (1, 2, 8, 1024)
    assert np.all(y.data == 0)


def test_final_projection_is_linear(live_net):
    rng = np.random.default_rng(4)
    w = live_net.params["out1.conv"]
    a, b = rng.standard_normal((2, 1, 8, 8, 16))
    f = lambda v: ad.conv1x1(Tensor(v), w).data
    np.testing.assert_allclose(f(2 * a - 0.5 * b), 2 * f(a) - 0.5 * f(b), atol=1e-12)


def test_unet_preserves_shapes_and_is_zero_at_init(toy_net):
    grids = toy_grids(toy_net, batch=2)
    outs = toy_net.unet(grids, toy_net.noise_embed(np.array([0.1, 3.0])))
    assert [o.shape for o in outs] == [g.shape for g in grids]
    assert all(np.all(o.data == 0) for o in outs)


def test_unet_rejects_wrong_routing(toy_net):
    grids = toy_grids(toy_net)
    with pytest.raises(ConfigError, match="level 1"):
        toy_net.unet(grids[:2] + [Tensor(np.zeros((1, 2, 8, 1024)))], toy_net.noise_embed(1.0))
    with pytest.raises(ConfigError):
        toy_net.unet(grids[:2], toy_net.noise_embed(1.0))


def test_unet_forward_on_complex_grids(live_net, toy_bank):
    c = cqt_forward(np.random.default_rng(5).standard_normal(TOY_LENGTH), toy_bank)
    out = live_net.unet_forward(c, 0.5)
    assert out.shapes == c.shapes
    assert all(np.iscomplexobj(g) and np.all(np.isfinite(g)) for g in out.octaves)


def test_paper_unet_forward_preserves_table_shapes(paper_bank):
    cfg = load_config("paper")
    net = MRCQTNet(cfg.net_config(), cfg.multires_spec(), PAPER_LENGTH)
    c = cqt_forward(np.random.default_rng(6).standard_normal(PAPER_LENGTH) * 0.05, paper_bank)
    out = net.unet_forward(c, 1.0)
    assert out.shapes == c.shapes
    assert out.shapes[-1] == (32, 8192)
    assert all(np.all(g == 0) for g in out.octaves)


def test_denoiser_is_zero_map_at_init(toy_net):
    x = np.random.default_rng(7).standard_normal((2, TOY_LENGTH))
    y = toy_net.denoiser_forward(x, np.array([0.01, 5.0]))
    assert y.shape == x.shape
    assert np.all(y == 0)


def test_zero_map_gives_pure_skip_score(toy_net):
    pre = Preconditioner(0.5)
    x = np.random.default_rng(8).standard_normal((2, TOY_LENGTH))
    sigma = np.array([0.2, 4.0])
    s = ScoreModel(toy_net, pre).score(x, sigma)
    expected = (pre.c_skip(sigma)[:, None] - 1.0) * x / np.square(sigma)[:, None]
    assert np.array_equal(s, expected)


def test_denoiser_output_is_finite_across_noise_levels(live_net):
    x = np.random.default_rng(9).standard_normal((1, TOY_LENGTH))
    for sigma in (1e-5, 1.0, 8.0):
        y = live_net.denoiser_forward(x, sigma)
        assert y.shape == x.shape and np.all(np.isfinite(y))


def test_end_to_end_gradients():
    for rep in end_to_end_gradcheck():
        assert rep.passed, rep.line()


def test_every_parameter_receives_gradient():
    net = MRCQTNet(toy_net_config(zero_init=False), toy_spec(), TOY_LENGTH, seed=2)
    x = np.random.default_rng(10).standard_normal((2, TOY_LENGTH))
    ad.mse(net(x, np.array([0.3, 2.0])), np.zeros_like(x)).backward()
    dead = [k for k, t in net.params.items() if not np.linalg.norm(t.gradient()) > 0]
    assert not dead


def test_zero_init_still_trains_the_output_projection(toy_net):
    net = toy_net.astype(np.float32)
    x = np.random.default_rng(11).standard_normal((1, TOY_LENGTH))
    ad.mse(net(x, 1.0), x).backward()
    assert np.linalg.norm(net.params["out1.conv"].gradient()) > 0


def test_forward_and_backward_are_deterministic():
    def run():
        net = MRCQTNet(toy_net_config(zero_init=False), toy_spec(), TOY_LENGTH, seed=3)
        x = np.random.default_rng(12).standard_normal((1, TOY_LENGTH))
        y = net(x, 0.4)
        ad.sum(ad.square(y)).backward()
        return [y.data] + [net.params[k].grad for k in sorted(net.params)]

    assert all(a.tobytes() == b.tobytes() for a, b in zip(run(), run()))


def test_parameter_tree_round_trip(live_net):
    arrays = {k: v * 2 for k, v in live_net.param_arrays().items()}
    other = live_net.with_arrays(arrays)
    assert all(np.array_equal(other.params[k].data, arrays[k]) for k in arrays)
    assert not np.array_equal(live_net.params["out1.conv"].data, arrays["out1.conv"])
    with pytest.raises(ConfigError):
        live_net.with_arrays({"bogus": np.zeros(1)})
