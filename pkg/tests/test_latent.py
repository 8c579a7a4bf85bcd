import numpy as np
import pytest

from ficd.autodiff import ShapeError
from ficd.diffusion import SampleConfig, ancestral_step, corrupt, estimate_x0, posterior_mean, sigma_at
from ficd.latent import (AEConfig, AutoencoderSpec, decode, encode, encode_pairs,
                         evaluate_latent, fingerprint, init_autoencoder, latent_denoiser_spec,
                         latent_sample, latent_train, load_autoencoder, reconstruction_loss,
                         save_autoencoder, train_autoencoder)
from ficd.model import init_params, oracle_denoiser
from ficd.phantom import PhantomSpec, generate_dataset
from ficd.rng import philox
from ficd.schedule import desk_schedule
from ficd.trainer import desk_config, prepare_pairs
from ficd.volume import TRAIN, Volume3

SMALL_AE = AutoencoderSpec(channels=(4, 8, 8), latent_channels=4)


@pytest.fixture(scope="module")
def pairs():
    return prepare_pairs(generate_dataset(PhantomSpec(), 10))


def test_latent_shape_and_zero_decoder(pairs):
    ae = init_autoencoder(AutoencoderSpec(), 0)
    z = encode(ae, pairs[0].target)
    assert z.shape == (4, 2, 2, 2)
    out = decode(ae, z)
    assert out.dims == (16, 16, 16)
    assert not out.voxels.any()


def test_latent_dims_and_divisibility():
    spec = AutoencoderSpec()
    assert spec.factor == 8
    assert spec.latent_dims((16, 24, 32)) == (4, 2, 3, 4)
    with pytest.raises(ShapeError, match="divisible by 8"):
        encode(init_autoencoder(spec), np.zeros((12, 16, 16)))
    with pytest.raises(ShapeError):
        decode(init_autoencoder(spec), np.zeros((3, 2, 2, 2)))


def test_encode_is_deterministic_and_batched(pairs):
    ae = init_autoencoder(SMALL_AE, 1)
    one = encode(ae, pairs[1].target)
    batch = encode(ae, np.stack([pairs[0].target, pairs[1].target]))
    np.testing.assert_allclose(batch[1], one, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(one, encode(ae, pairs[1].target))


def test_zero_epochs_is_identity(pairs):
    init = init_autoencoder(SMALL_AE, 0)
    ae, losses = train_autoencoder([p.target for p in pairs], AEConfig(epochs=0), SMALL_AE)
    assert losses == [] and fingerprint(ae) == fingerprint(init)


def test_reconstruction_training_descends(pairs):
    vols = [p.target for p in pairs]
    before = reconstruction_loss(init_autoencoder(SMALL_AE, 0), vols)
    ae, losses = train_autoencoder(vols, AEConfig(epochs=200, max_steps=200), SMALL_AE)
    assert len(losses) == 200
    assert reconstruction_loss(ae, vols) < 0.5 * before
    again, losses2 = train_autoencoder(vols, AEConfig(epochs=200, max_steps=200), SMALL_AE)
    assert losses == losses2 and fingerprint(ae) == fingerprint(again)


def test_checkpoint_round_trip(tmp_path):
    ae = init_autoencoder(SMALL_AE, 3)
    for t in ae.values():
        t.data = t.data + 1.0
    save_autoencoder(tmp_path / "ae.fckpt", ae)
    back = load_autoencoder(tmp_path / "ae.fckpt")
    assert back.spec == SMALL_AE and fingerprint(back) == fingerprint(ae)


def test_fingerprint_sees_single_bit():
    ae = init_autoencoder(SMALL_AE, 0)
    fp = fingerprint(ae)
    ae["enc0.w"].data = np.nextafter(ae["enc0.w"].data, np.inf)
    assert fingerprint(ae) != fp


# ----------------------------------------------------------------------------
# diffusion identities on codes

def random_codes(seed, n=4):
    return philox(seed).standard_normal((n, 4, 2, 2, 2)) * 3.0


def test_latent_round_trip_and_oracle():
    s = desk_schedule()
    z0 = random_codes(0)
    eps = random_codes(1) / 3.0
    t = np.array([1, 50, 150, 200])
    zt = corrupt(z0, eps, t, s)
    np.testing.assert_allclose(estimate_x0(zt, oracle_denoiser(eps)(zt, None, t), t, s), z0,
                               rtol=0, atol=1e-10)


def test_latent_posterior_equivalence():
    s = desk_schedule()
    g = philox(5)
    for _ in range(200):
        t = int(g.integers(1, 201))
        x, e = g.standard_normal((2, 4, 2, 2, 2))
        np.testing.assert_allclose(ancestral_step(x, e, t, None, s),
                                   posterior_mean(x, estimate_x0(x, e, t, s), t, s),
                                   rtol=0, atol=1e-10)


def test_latent_weighted_noise_identity():
    s = desk_schedule()
    z0, eps, eps_hat = random_codes(2, 3)
    for t in (1, 77, 200):
        ab = s.alpha_bar[t]
        z_hat = estimate_x0(corrupt(z0, eps, t, s), eps_hat, t, s)
        lhs = np.mean(np.abs(z_hat - z0))
        rhs = np.sqrt(1 - ab) / np.sqrt(ab) * np.mean(np.abs(eps_hat - eps))
        assert lhs == pytest.approx(rhs, rel=1e-10)


# ----------------------------------------------------------------------------
# latent diffusion

def test_latent_training_leaves_autoencoder_untouched(pairs):
    ae = init_autoencoder(AutoencoderSpec(), 0)
    fp = fingerprint(ae)
    lp = encode_pairs(ae, pairs[:4])
    cfg = desk_config(model=latent_denoiser_spec(ae.spec, (8, 16)), T=20)
    params, reps = latent_train(ae, lp, cfg, 5)
    assert len(reps) == 5
    assert fingerprint(ae) == fp
    scores = evaluate_latent(ae, params, lp[:2], pairs[:2], cfg.schedule(), [1, 20])
    assert set(scores) == {"latent_l1", "image_l1"}


def test_latent_sample_shape(pairs):
    ae = init_autoencoder(AutoencoderSpec(), 0)
    spec = latent_denoiser_spec(ae.spec, (8, 16))
    cond = Volume3(pairs[0].condition, TRAIN, 0.0, 2.0)
    out = latent_sample(ae, init_params(spec, 0), cond,
                        SampleConfig(desk_config(T=10).schedule(), seed=1))
    assert out.dims == (16, 16, 16) and out.range_tag == TRAIN
    assert (out.stored_min, out.stored_max) == (0.0, 2.0)


def test_thousand_step_reconstruction_under_quarter_of_untrained():
    vols = [p.target for p in prepare_pairs(generate_dataset(PhantomSpec(), 32))]
    before = reconstruction_loss(init_autoencoder(AutoencoderSpec(), 0), vols)
    ae, _ = train_autoencoder(vols, AEConfig(epochs=1000, max_steps=1000))
    assert reconstruction_loss(ae, vols) < 0.25 * before


def test_code_bound_limits_codes_and_round_trips(tmp_path):
    spec = AutoencoderSpec(channels=(4, 8, 8), code_bound=0.5)
    ae = init_autoencoder(spec, 0)
    ae["enc.out.w"].data = ae["enc.out.w"].data * 1e4
    raw = init_autoencoder(SMALL_AE, 0)
    raw["enc.out.w"].data = ae["enc.out.w"].data
    x = np.random.default_rng(0).uniform(-1, 1, (16, 16, 16))
    z, zr = encode(ae, x), encode(raw, x)
    assert np.abs(z).max() <= 0.5 and np.abs(zr).max() > 0.5
    np.testing.assert_allclose(z, 0.5 * np.tanh(zr / 0.5), rtol=1e-12, atol=1e-15)
    save_autoencoder(tmp_path / "ae.fckpt", ae)
    assert load_autoencoder(tmp_path / "ae.fckpt").spec == spec
    assert AutoencoderSpec.from_meta(SMALL_AE.to_meta()).code_bound is None
    with pytest.raises(ValueError):
        AutoencoderSpec(code_bound=0.0)
