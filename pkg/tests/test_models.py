import numpy as np
import pytest

import tensor_core as tc
from cstvae import CstVae, build_model, composite, over, residual
from errors import ConfigError, ContractError, DimensionError
from stvae import StVae, StvaeConfig
from tensor_core import Tensor
from training import AdagradState, adagrad_step
from vae_core import GaussianLatent, LikelihoodModel, elbo, kl_to_standard_normal, log_likelihood, reparam_sample


def small_config(**kwargs):
    values = dict(image_h=6, image_w=6, content_dim=2, pose_dim=3, content_hidden=8, pose_hidden=4)
    values.update(kwargs)
    return StvaeConfig(**values)


# ------------------------------------------------------------- compositing

def test_over_examples():
    assert over(np.array([0.5]), np.array([0.5])).data[0] == pytest.approx(0.75)
    assert over(np.array([1.0]), np.array([0.3])).data[0] == 1.0
    assert over(np.array([0.0]), np.array([0.3])).data[0] == pytest.approx(0.3)


def test_over_binary_is_union():
    a = np.array([1.0, 0.0, 1.0, 0.0])
    b = np.array([1.0, 1.0, 0.0, 0.0])
    assert np.array_equal(over(a, b).data, np.maximum(a, b))


def test_over_is_associative(rng):
    a, b, c = rng.uniform(size=(3, 5, 5))
    left = over(over(a, b), c).data
    right = over(a, over(b, c)).data
    assert np.max(np.abs(left - right)) < 1e-12


def test_over_preconditions():
    with pytest.raises(DimensionError):
        over(np.zeros(3), np.zeros(4))
    with pytest.raises(ContractError):
        over(np.array([1.2]), np.array([0.0]))


def test_composite_and_residual():
    layers = [np.array([0.5, 0.0]), np.array([0.5, 0.4])]
    assert np.allclose(composite(layers).data, [0.75, 0.4])
    assert np.allclose(composite(layers[:1]).data, layers[0])
    with pytest.raises(ContractError):
        composite([])
    assert np.allclose(residual(np.array([0.8, 0.2]), np.array([0.3, 0.5])).data, [0.5, 0.0])


# ----------------------------------------------------------------- st-vae

def test_initial_pose_is_identity(rng):
    model = StVae.create(small_config(), rng)
    z_c = rng.standard_normal((4, 2))
    z_t = rng.standard_normal((4, 3))
    canonical, transform, layer = model.decode(z_c, z_t)
    assert np.allclose(transform.matrix, [[1, 0, 0], [0, 1, 0]])
    assert np.max(np.abs(layer.data - canonical.data)) < 1e-12


def test_decode_checks_latent_shapes(rng):
    model = StVae.create(small_config(), rng)
    with pytest.raises(DimensionError):
        model.decode(np.zeros((2, 5)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        model.encode(np.zeros((2, 5, 5)), model.draw_noise(rng, 2))


def test_noise_keys(rng):
    assert set(StVae.create(small_config(), rng).draw_noise(rng, 2)) == {"content", "pose"}
    vae = StVae.create(small_config(pose="identity"), rng)
    assert set(vae.draw_noise(rng, 2)) == {"content"}
    assert not any("pose" in name for name in vae.parameters())


def test_elbo_step_is_finite_and_negative(rng, binary_images):
    model = StVae.create(small_config(), rng)
    terms, trace = model.elbo_step(binary_images[:5], model.draw_noise(rng, 5))
    assert np.isfinite(terms.elbo.item())
    assert terms.elbo.item() < 0
    assert terms.n == 5
    assert trace.layer.shape == (5, 6, 6)


def test_content_means_are_deterministic(rng, binary_images):
    model = StVae.create(small_config(), rng)
    a = model.content_means(binary_images[:3])
    b = model.content_means(binary_images[:3])
    assert a.shape == (3, 2)
    assert np.array_equal(a, b)


def test_content_posterior_depends_only_on_canonical_estimate(rng):
    model = StVae.create(small_config(image_h=8, image_w=8), rng)
    decoder = model.params.pose_decoder
    # constant T = 2x zoom: the inverse warp reads only pixels 1..6 of an 8x8 image
    decoder.weights[-1].data[...] = 0.0
    decoder.biases[-1].data[...] = [2.0, 0.0, 0.0, 0.0, 2.0, 0.0]
    image = (rng.uniform(size=(2, 8, 8)) < 0.4).astype(np.float64)
    ring = image.copy()
    ring[:, [0, -1], :] = 1.0 - ring[:, [0, -1], :]
    ring[:, :, [0, -1]] = 1.0 - ring[:, :, [0, -1]]
    noise = model.draw_noise(None, 2, zero=True)

    a, b = model.encode(image, noise), model.encode(ring, noise)
    assert not np.array_equal(a.q_pose.mu.data, b.q_pose.mu.data)
    assert np.array_equal(a.transform.theta.data, b.transform.theta.data)
    assert np.array_equal(a.canonical_estimate.data, b.canonical_estimate.data)
    assert np.array_equal(a.q_content.mu.data, b.q_content.mu.data)
    assert np.array_equal(a.q_content.logvar.data, b.q_content.logvar.data)

    centre = image.copy()
    centre[:, 3, 4] = 1.0 - centre[:, 3, 4]
    c = model.encode(centre, noise)
    assert not np.array_equal(a.q_content.mu.data, c.q_content.mu.data)


def test_samples_in_unit_range(rng):
    model = StVae.create(small_config(), rng)
    canonical, _, layer = model.sample(rng, 6)
    for img in (canonical.data, layer.data):
        assert img.min() >= 0.0 and img.max() <= 1.0


def _plain_vae_elbo(model, x, eps):
    """Pose-free VAE through the same encoder/decoder networks"""
    n = x.shape[0]
    q = GaussianLatent.from_encoder(model.params.content_encoder(tc.reshape(Tensor(x), (n, 36))))
    z = reparam_sample(q, eps)
    x_hat = tc.reshape(model.params.content_decoder(z), x.shape)
    return elbo(log_likelihood(x, x_hat, LikelihoodModel()), [kl_to_standard_normal(q)])


def test_identity_pose_matches_plain_vae_trajectory(binary_images):
    cfg = small_config(pose="identity")
    st = StVae.create(cfg, np.random.default_rng(3))
    plain = StVae.create(cfg, np.random.default_rng(3))
    st_state, plain_state = AdagradState(0.01), AdagradState(0.01)
    noise_rng = np.random.default_rng(11)
    batch_rng = np.random.default_rng(12)
    for step in range(200):
        x = binary_images[batch_rng.choice(len(binary_images), 8, replace=False)]
        eps = noise_rng.standard_normal((8, 2))
        a = st.elbo_step(x, {"content": eps})[0].elbo
        b = _plain_vae_elbo(plain, x, eps)
        assert abs(a.item() - b.item()) <= 1e-9 * max(1.0, abs(b.item())), step
        for model, loss, state in ((st, -1.0 * a, st_state), (plain, -1.0 * b, plain_state)):
            params = model.parameters()
            for p in params.values():
                p.zero_grad()
            tc.backward(loss)
            adagrad_step(params, {k: p.grad for k, p in params.items()}, state, step=step + 1)


# ---------------------------------------------------------------- cst-vae

def test_single_layer_matches_stvae(binary_images):
    cfg = small_config()
    st = StVae.create(cfg, np.random.default_rng(5))
    cst = CstVae(cfg, n_layers=1, rng=np.random.default_rng(5))
    eps = np.random.default_rng(6)
    noise = st.draw_noise(eps, 6)
    x = binary_images[:6]
    a = st.elbo_step(x, noise)[0].elbo.item()
    b = cst.elbo_step(x, {f"0:layer0.{k}": v for k, v in noise.items()})[0].elbo.item()
    assert a == pytest.approx(b, abs=1e-12)


def test_layers_untied_by_default(rng):
    cfg = small_config()
    single = len(StVae.create(cfg, rng).parameters())
    assert len(CstVae(cfg, n_layers=2, rng=rng).parameters()) == 2 * single
    tied = CstVae(cfg, n_layers=2, tie_layers=True, rng=rng)
    assert len(tied.parameters()) == single
    assert tied.layers[0] is tied.layers[1]


def test_features_concatenate_layers(rng, binary_images):
    model = CstVae(small_config(), n_layers=2, rng=rng)
    assert model.content_means(binary_images[:4]).shape == (4, 4)


def test_decomposition_shapes_and_ranges(rng, binary_images):
    model = CstVae(small_config(), n_layers=2, rng=rng)
    d = model.decompose(binary_images[:3])
    assert len(d.layers) == 2
    assert d.reconstruction.shape == (3, 6, 6)
    assert d.reconstruction.min() >= 0.0 and d.reconstruction.max() <= 1.0
    assert np.allclose(d.reconstruction, composite(d.layers).data)


def test_residuals_never_negative(rng, binary_images):
    model = CstVae(small_config(check_ranges=True), n_layers=3, rng=rng)
    trace, kls = model.infer(binary_images[:4], model.draw_noise(rng, 4))
    assert len(kls) == 6
    for lt in trace.layers:
        assert lt.delta.data.min() >= 0.0


def test_running_composite_only_grows(rng, binary_images):
    model = CstVae(small_config(), n_layers=3, rng=rng)
    trace, _ = model.infer(binary_images[:5], model.draw_noise(rng, 5))
    previous = np.zeros((5, 6, 6))
    for lt in trace.layers:
        assert np.all(lt.composite.data >= previous)
        previous = lt.composite.data
    assert np.array_equal(trace.reconstruction.data, previous)


def test_every_network_has_two_hidden_layers(rng):
    model = build_model("cstvae", 6, 6, rng, content_dim=2, content_hidden=8, pose_hidden=4)
    for layer in model.layers:
        nets = layer.params.networks()
        assert len(nets) == 4
        assert all(len(net.weights) == 3 for net in nets)
    assert model.layers[0].params.content_encoder.sizes == [36, 8, 8, 4]


def test_build_model_kinds(rng):
    assert isinstance(build_model("vae", 6, 6, rng, content_dim=2, content_hidden=8), StVae)
    assert build_model("stvae", 6, 6, rng, content_dim=2, content_hidden=8).learns_pose
    assert isinstance(build_model("cstvae", 6, 6, rng, content_dim=2, content_hidden=8), CstVae)
    with pytest.raises(ConfigError):
        build_model("air", 6, 6, rng)
    with pytest.raises(ConfigError):
        CstVae(small_config(), n_layers=0)
