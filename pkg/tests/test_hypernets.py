import numpy as np
import pytest

from cvaeh import diffcore as dc
from cvaeh import hypernet_forecast as hf
from cvaeh import hypernet_gauss as hg
from cvaeh import hypervae as hv
from cvaeh import prob, scenes

SMALL = hv.VaeArch(x_dim=2, z_dim=2, enc_hidden=(5, 5, 5), dec_hidden=(5, 5, 5), n_components=3)
TINY_DIMS = hf.ForecastDims(other_hidden=4, channels=(2, 2, 2, 2), convs_per_block=2, time_hidden=4,
                            head_hidden=6, gain=0.5)
TINY_ARCH = hv.VaeArch(x_dim=2, z_dim=2, enc_hidden=(4, 4, 4), dec_hidden=(4, 4, 4), n_components=2)


# -- gaussian hypernet ---------------------------------------------------------

@pytest.mark.parametrize("dim", [1, 2])
def test_gauss_output_length_matches_layout(dim):
    net = hg.GaussHypernet(dim, SMALL, np.random.default_rng(0), hidden=8)
    theta = net(np.zeros((3, dim)))
    assert theta.enc.shape == (3, SMALL.enc_layout.size)
    assert theta.dec.shape == (3, SMALL.dec_layout.size)


def test_gauss_condition_dim_mismatch():
    net = hg.GaussHypernet(2, SMALL, np.random.default_rng(0), hidden=8)
    with pytest.raises(hg.ConditionError):
        net(np.zeros((3, 1)))
    with pytest.raises(hg.ConditionError):
        hg.GaussHypernet(3, SMALL, np.random.default_rng(0))


def test_gauss_forward_is_pure():
    net = hg.GaussHypernet(1, SMALL, np.random.default_rng(1), hidden=8)
    a = net(np.array([[0.3]])).dec.data.copy()
    net(np.array([[5.0]]))
    np.testing.assert_array_equal(net(np.array([[0.3]])).dec.data, a)


def test_gauss_conditions_give_different_weights():
    model = hg.GaussModel("gaussian1", SMALL, np.random.default_rng(2), hidden=8)
    a, b = model.weights([0.0]), model.weights([1.0])
    assert np.linalg.norm(a.dec.data - b.dec.data) > 0


@pytest.mark.parametrize("seed", range(3))
def test_gauss_hypernet_plus_vae_gradient(seed):
    rng = np.random.default_rng(seed)
    model = hg.GaussModel("gaussian2", SMALL, rng, hidden=6, gain=0.5)
    # condition (0, 0) with zero bias sits exactly on the ReLU kink
    model.net.hidden.bias.data[...] = rng.uniform(0.1, 0.5, size=6)
    x = rng.normal(size=(6, 2))
    c = np.array(hg.G2_TRAIN)[rng.integers(0, 5, size=6)]
    eps = rng.standard_normal((1, 6, 1, 2))
    err = dc.check_gradients(lambda: model.loss(x, c, eps=eps).loss, model.parameters())
    assert err < 1e-4


def test_gauss_per_row_gather_matches_direct():
    model = hg.GaussModel("gaussian1", SMALL, np.random.default_rng(3), hidden=8)
    conds = np.array([0.0, 2.0, 0.0, 1.0])
    gathered = model.weights_per_row(conds)
    direct = model.weights(conds)
    np.testing.assert_array_equal(gathered.dec.data, direct.dec.data)


def test_gaussian1_targets_shapes_and_entropy():
    targets = hg.gaussian1_targets()
    assert [t.n_components for t in targets.values()] == [4, 25, 100]
    rng = np.random.default_rng(0)
    for c, t in targets.items():
        x = prob.gmm_sample(t, rng, 20_000)
        h = -prob.gmm_log_prob(t, x).mean()
        assert 3.4 < h < 4.4


def test_sampler_balances_conditions():
    sampler = hg.GaussSampler(hg.gaussian1_targets(), hg.G1_CONDITIONS)
    x, c = sampler.batch(np.random.default_rng(0), 128)
    counts = np.bincount(c.reshape(-1).astype(int))
    assert counts.max() - counts.min() <= 1


# -- forecasting hypernet --------------------------------------------------------

def _instances(n, seed=0):
    eps = scenes.generate_dataset(20, seed)
    return [i for k, e in enumerate(eps) for i in scenes.make_instances(e, k)][:n]


def test_dimension_contract():
    net = hf.ForecastHypernet(hf.default_arch(), np.random.default_rng(0))
    batch = hf.ForecastBatch.from_instances(_instances(3))
    social = net.social(batch.history, batch.mask)
    spatial = net.spatial(batch.raster)
    t = net.time([0.2, 1.0, 4.0])
    assert social.shape == (3, 64) and spatial.shape == (3, 96) and t.shape == (3, 10)
    assert hf.CONDITION_DIM == 170
    theta = net(batch.history, batch.mask, batch.raster, 1.0)
    assert theta.enc.shape[1] == hf.default_arch().enc_layout.size
    assert theta.dec.shape[1] == hf.default_arch().dec_layout.size


def test_spatial_output_96_for_larger_raster():
    net = hf.SpatialModule(np.random.default_rng(0), channels=(2, 2, 2, 2), convs_per_block=1)
    assert net(np.zeros((1, 208, 208, 3))).shape == (1, 96)


def test_spatial_rejects_bad_input():
    net = hf.SpatialModule(np.random.default_rng(0), channels=(2, 2, 2, 2), convs_per_block=1)
    with pytest.raises(dc.ShapeError):
        net(np.zeros((1, 64, 64, 2)))
    with pytest.raises(dc.ShapeError):
        net(np.zeros((1, 60, 64, 3)))


def test_social_rejects_wrong_timestep_count():
    net = hf.SocialModule(np.random.default_rng(0))
    with pytest.raises(dc.ShapeError):
        net(np.zeros((1, 5, 9, 2)), np.ones((1, 5)))


def test_zero_social_network_gives_zero_encoding():
    net = hf.SocialModule(np.random.default_rng(0))
    for p in net.parameters():
        p.data[...] = 0.0
    out = net(np.zeros((2, 5, 10, 2)), np.ones((2, 5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_traffic_encoding_invariant_to_agent_permutation():
    net = hf.SocialModule(np.random.default_rng(1))
    rng = np.random.default_rng(2)
    hist = rng.normal(size=(1, 5, 10, 2)) * 10
    mask = np.ones((1, 5))
    perm = np.concatenate([[0], 1 + rng.permutation(4)])
    a = net(hist, mask).data
    b = net(hist[:, perm], mask[:, perm]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_padding_ignores_sentinel_contents():
    net = hf.SocialModule(np.random.default_rng(3))
    hist = np.random.default_rng(4).normal(size=(1, 5, 10, 2))
    mask = np.array([[1, 1, 0, 0, 0.0]])
    hist[0, 2:] = scenes.SENTINEL
    a = net(hist, mask).data
    hist[0, 2:] = -123.0
    np.testing.assert_array_equal(net(hist, mask).data, a)


def test_translating_blob_changes_spatial_encoding():
    net = hf.SpatialModule(np.random.default_rng(5))
    net.eval()
    img = np.zeros((1, 64, 64, 3))
    img[0, 20:28, 20:28, 1] = 1.0
    shifted = np.roll(img, 8, axis=2)
    d = np.linalg.norm(net(img).data - net(shifted).data)
    assert d > 0


def test_time_module_distinguishes_horizons_and_is_deterministic():
    net = hf.TimeModule(np.random.default_rng(6))
    a = net([0.0, 4.0]).data
    assert np.linalg.norm(a[0] - a[1]) > 0
    np.testing.assert_array_equal(net([0.0, 4.0]).data, a)


def test_changing_raster_changes_decoder_weights():
    net = hf.ForecastHypernet(hf.default_arch(), np.random.default_rng(7))
    net.eval()
    batch = hf.ForecastBatch.from_instances(_instances(1))
    a = net(batch.history, batch.mask, batch.raster, 2.0).dec.data
    other = batch.raster.copy()
    other[0, :16] = 1.0 - other[0, :16]
    b = net(batch.history, batch.mask, other, 2.0).dec.data
    assert np.linalg.norm(a - b) > 0


def test_tiny_forecast_network_gradient():
    rng = np.random.default_rng(8)
    model = hf.ForecastModel(TINY_ARCH, rng, TINY_DIMS)
    for name, p in model.named_parameters():
        if name.endswith("bias") and not p.data.any():
            p.data[...] = rng.uniform(0.1, 0.5, size=p.shape)  # keep rows off the ReLU kink
    hist = rng.normal(size=(2, 5, 10, 2)) * 5
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 0, 0, 0.0]])
    raster = rng.random((2, 16, 16, 3))
    future = rng.normal(size=(2, 20, 2)) * 10
    batch = hf.ForecastBatch(hist, mask, raster, future)
    t_idx = np.array([[0, 7], [19, 3]])
    eps = rng.standard_normal((1, 4, 1, 2))
    err = dc.check_gradients(lambda: model.loss(batch, t_idx, eps=eps).loss, model.parameters(),
                             max_entries=6, rng=np.random.default_rng(0))
    assert err < 1e-3


def test_every_module_receives_gradient_after_training_steps():
    rng = np.random.default_rng(9)
    model = hf.ForecastModel(TINY_ARCH, rng, TINY_DIMS)
    insts = _instances(6, 1)
    batch = hf.ForecastBatch.from_instances(insts)
    batch.raster = batch.raster[:, :16, :16]
    state = dc.AdamState(lr=1e-3)
    for _ in range(10):
        t_idx = np.stack([rng.choice(20, 3, replace=False) for _ in range(len(insts))])
        model.loss(batch, t_idx, rng=rng).loss.backward()
        grads = {name: np.linalg.norm(p.grad) for name, p in model.named_parameters()}
        dc.adam_step(model.parameters(), state)
    for module in ("net.social", "net.spatial", "net.time"):
        norm = sum(v for k, v in grads.items() if k.startswith(module))
        assert norm > 0, module


def test_same_parameters_serve_any_agent_count():
    net = hf.ForecastHypernet(TINY_ARCH, np.random.default_rng(10), TINY_DIMS)
    for n in range(1, 6):
        mask = np.zeros((1, 5))
        mask[0, :n] = 1
        theta = net(np.zeros((1, 5, 10, 2)), mask, np.zeros((1, 16, 16, 3)), 1.0)
        assert theta.dec.shape == (1, TINY_ARCH.dec_layout.size)


def test_sampled_trajectories_share_noise_across_horizon():
    model = hf.ForecastModel(TINY_ARCH, np.random.default_rng(11), TINY_DIMS)
    model.eval()
    batch = hf.ForecastBatch.from_instances(_instances(2, 2))
    batch.raster = batch.raster[:, :16, :16]
    a = model.sample(batch, 5, np.random.default_rng(0))
    b = model.sample(batch, 5, np.random.default_rng(0))
    assert a.shape == (2, 5, 20, 2)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_optimizer_tracks_only_hypernet_parameters():
    model = hf.ForecastModel(TINY_ARCH, np.random.default_rng(12), TINY_DIMS)
    assert sum(p.size for p in model.parameters()) == model.net.num_parameters()
