import numpy as np
import pytest

from cdiffset import tensor as T
from cdiffset.data import SceneSpec, render_scene
from cdiffset.vae import (LOGVAR_RANGE, VAE, decode, encode, encode_moments, format_probe,
                          kl_to_standard_normal, reconstruction_probe, roundtrip, sar_to_rgb, train_vae)


@pytest.fixture(scope="module")
def small_vae():
    spec = SceneSpec(image_size=16, misalign_max=1.0)
    imgs = np.stack([render_scene(spec, s).eo for s in range(16)])
    vae, losses = train_vae(imgs, steps=30, batch_size=4, seed=1, log_every=0)
    return vae, losses, imgs


def test_shapes_and_modes():
    vae = VAE(seed=0, widths=(8, 8, 8))
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    z = encode(x, vae)
    assert z.shape == (2, 4, 2, 2)
    np.testing.assert_array_equal(encode(x, vae), z)
    zs = encode(x, vae, np.random.default_rng(1), mode="sample")
    assert zs.shape == z.shape and not np.array_equal(zs, z)
    out = decode(z, vae)
    assert out.shape == (2, 3, 16, 16) and out.min() >= 0 and out.max() <= 1
    assert encode(x[0], vae).shape == (4, 2, 2)
    with pytest.raises(ValueError):
        encode(x, vae, mode="sample")
    with pytest.raises(ValueError):
        encode(x[:, :1], vae)
    with pytest.raises(ValueError):
        encode(np.zeros((1, 3, 12, 12), np.float32), vae)


def test_logvar_is_clamped():
    vae = VAE(seed=0, widths=(8, 8, 8))
    vae.enc_out.bias.data[4:] = 1e4
    _, sd = encode_moments(np.zeros((1, 3, 8, 8), np.float32), vae)
    assert np.allclose(sd, np.exp(0.5 * LOGVAR_RANGE[1]) * vae.latent_scale)


def test_kl_matches_closed_form():
    rng = np.random.default_rng(0)
    mu, lv = rng.standard_normal(10), rng.standard_normal(10)
    val = kl_to_standard_normal(T.Tensor(mu), T.Tensor(lv)).item()
    assert val == pytest.approx(np.mean(0.5 * (mu ** 2 + np.exp(lv) - lv - 1)), rel=1e-5)
    assert kl_to_standard_normal(T.zeros(3), T.zeros(3)).item() == 0.0


def test_sar_to_rgb():
    one = np.random.default_rng(0).uniform(size=(1, 4, 4)).astype(np.float32)
    rgb = sar_to_rgb(one)
    assert rgb.shape == (3, 4, 4) and np.array_equal(rgb[0], rgb[2])
    four = np.stack([np.full((4, 4), v, np.float32) for v in (0.1, 0.2, 0.4, 0.9)])
    np.testing.assert_allclose(sar_to_rgb(four)[:, 0, 0], [0.1, 0.3, 0.9])
    with pytest.raises(ValueError):
        sar_to_rgb(np.zeros((2, 4, 4), np.float32))


def test_training_reduces_loss_and_freezes(small_vae):
    vae, losses, imgs = small_vae
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    assert vae.frozen and all(not p.requires_grad for p in vae.parameters())
    z = encode(imgs, vae)
    assert z.std() == pytest.approx(1.0, rel=1e-3)


def test_save_load_roundtrip(small_vae, tmp_path):
    vae, _, imgs = small_vae
    vae.save(tmp_path)
    again = VAE.load(tmp_path)
    assert again.checksum() == vae.checksum()
    assert again.latent_scale == vae.latent_scale
    np.testing.assert_array_equal(roundtrip(imgs[:2], again), roundtrip(imgs[:2], vae))


def test_reconstruction_probe_degrades_with_speckle(small_vae):
    vae, _, _ = small_vae
    spec = SceneSpec(image_size=16, misalign_max=1.0)
    clean = np.stack([render_scene(spec, s).sar_clean for s in range(4)])
    rows = reconstruction_probe(clean, vae, [0.0, 1.0])
    assert [r[0] for r in rows] == [0.0, 1.0]
    assert rows[0][1] > rows[1][1]
    assert format_probe(rows).startswith("level\tpsnr\n0\t")
    with pytest.raises(ValueError):
        reconstruction_probe(clean, vae, [-1.0])
