import math

import numpy as np
import pytest

from ficd.autodiff import Graph, ShapeError, gradient_check
from ficd.checkpoint import CheckpointError
from ficd.diffusion import corrupt, estimate_x0
from ficd.model import (DenoiserSpec, NetworkDenoiser, clean_target_oracle, forward,
                        init_params, load_checkpoint, oracle_denoiser, predict_noise,
                        save_checkpoint, timestep_embedding)
from ficd.rng import philox
from ficd.schedule import desk_schedule

TINY = DenoiserSpec(base_channels=(2, 4, 8), time_embed_dim=4, heads=2, head_channels=2)


def randomized(spec, seed=0, scale=0.3):
    """Params with every tensor (output head included) drawn at random."""
    p = init_params(spec, seed)
    g = philox(seed, 99)
    for t in p.values():
        t.data = t.data + scale * g.standard_normal(t.shape)
    return p


def test_init_is_deterministic():
    a, b = init_params(TINY, 3), init_params(TINY, 3)
    assert a.names() == b.names()
    for x, y in zip(a.values(), b.values()):
        np.testing.assert_array_equal(x.data, y.data)
    c = init_params(TINY, 4)
    assert not np.array_equal(a["in_conv.w"].data, c["in_conv.w"].data)


def test_output_head_is_zero_so_prediction_is_zero(rng):
    p = init_params(TINY, 0)
    assert not p["out.conv.w"].data.any() and not p["out.conv.b"].data.any()
    x = rng.standard_normal((2, 1, 8, 8, 8))
    assert not predict_noise(p, x, x, [3, 7]).any()


@pytest.mark.parametrize("dims", [(8, 8, 8), (16, 16, 16), (8, 4, 12)])
def test_output_shape_matches_input(dims):
    p = randomized(TINY)
    x = np.zeros((1, 1) + dims)
    assert predict_noise(p, x, x + 0.5, 10).shape == x.shape


def test_indivisible_dims_rejected():
    with pytest.raises(ShapeError, match="divisible by 4"):
        predict_noise(init_params(TINY), np.zeros((1, 1, 6, 8, 8)), np.zeros((1, 1, 6, 8, 8)), 1)


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="input channels"):
        predict_noise(init_params(TINY), np.zeros((1, 2, 8, 8, 8)), np.zeros((1, 1, 8, 8, 8)), 1)


def test_output_depends_on_condition_and_timestep(rng):
    p = randomized(TINY)
    x = rng.standard_normal((1, 1, 8, 8, 8))
    c1, c2 = rng.standard_normal((2, 1, 1, 8, 8, 8))
    base = predict_noise(p, x, c1, 5)
    assert np.abs(base - predict_noise(p, x, c2, 5)).max() > 1e-6
    assert np.abs(base - predict_noise(p, x, c1, 6)).max() > 1e-6
    np.testing.assert_array_equal(base, predict_noise(p, x, c1, 5))


def test_batch_entries_are_independent(rng):
    p = randomized(TINY)
    x = rng.standard_normal((2, 1, 8, 8, 8))
    c = rng.standard_normal((2, 1, 8, 8, 8))
    both = predict_noise(p, x, c, [4, 9])
    np.testing.assert_allclose(both[1:], predict_noise(p, x[1:], c[1:], 9), rtol=0, atol=1e-12)


def test_network_denoiser_accepts_bare_volumes(rng):
    p = randomized(TINY)
    x, c = rng.standard_normal((2, 8, 8, 8))
    out = NetworkDenoiser(p)(x, c, 3)
    np.testing.assert_array_equal(out, predict_noise(p, x[None, None], c[None, None], 3)[0, 0])


def test_spec_validation():
    with pytest.raises(ValueError, match="increasing"):
        DenoiserSpec(base_channels=(8, 8))
    with pytest.raises(ValueError, match="even"):
        DenoiserSpec(time_embed_dim=5)


# ----------------------------------------------------------------------------
# timestep embedding

def test_embedding_at_zero():
    e = timestep_embedding(0, 8)
    np.testing.assert_array_equal(e[:4], 0.0)
    np.testing.assert_array_equal(e[4:], 1.0)


def test_embedding_dim_two():
    np.testing.assert_allclose(timestep_embedding(1, 2), [math.sin(1), math.cos(1)], rtol=0, atol=1e-15)


def test_embedding_matches_definition():
    dim, t = 6, 37
    expect = [math.sin(t / 10000 ** (2 * i / dim)) for i in range(3)]
    expect += [math.cos(t / 10000 ** (2 * i / dim)) for i in range(3)]
    np.testing.assert_allclose(timestep_embedding(t, dim), expect, rtol=0, atol=1e-13)


def test_embedding_distinct_over_desk_range():
    e = timestep_embedding(np.arange(1, 201), 32)
    d = np.sqrt(((e[:, None, :] - e[None, :, :]) ** 2).sum(-1))
    assert d[~np.eye(200, dtype=bool)].min() > 1e-3


def test_embedding_odd_dim_rejected():
    with pytest.raises(ValueError):
        timestep_embedding(1, 3)


# ----------------------------------------------------------------------------
# test doubles

def test_oracle_returns_stored(rng):
    eps = rng.standard_normal((3, 3, 3))
    den = oracle_denoiser(eps)
    np.testing.assert_array_equal(den(np.zeros((3, 3, 3)), None, 1), eps)
    with pytest.raises(ShapeError):
        den(np.zeros((2, 2, 2)), None, 1)


def test_oracle_inverts_corruption(rng):
    s = desk_schedule()
    x0 = rng.uniform(-1, 1, (3, 3, 3))
    eps = rng.standard_normal(x0.shape)
    x_t = corrupt(x0, eps, 80, s)
    np.testing.assert_allclose(estimate_x0(x_t, oracle_denoiser(eps)(x_t, None, 80), 80, s), x0,
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(clean_target_oracle(x0, s)(x_t, None, 80), eps, rtol=0, atol=1e-12)


# ----------------------------------------------------------------------------
# gradients

def test_denoiser_gradient_sampled_coordinates(rng):
    p = randomized(TINY, seed=1)
    x, c = rng.standard_normal((2, 2, 1, 8, 8, 8))
    proj = rng.standard_normal(x.shape)

    def f(g):
        out = forward(g, p, x, c, [17, 120])
        return g.sum(g.mul(out, proj))

    coords = {i: philox(5, i).choice(t.data.size, min(4, t.data.size), replace=False)
              for i, t in enumerate(p.values())}
    report = gradient_check(f, p.values(), h=1e-5, tol=1e-4, coords=coords)
    assert report.passed, report.message
    assert report.checked >= 2 * len(p.names())


# ----------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path):
    p = randomized(TINY, seed=2)
    s = desk_schedule()
    save_checkpoint(tmp_path / "m.fckpt", p, s, extra_meta={"note": "x"})
    q, s2, meta, extra = load_checkpoint(tmp_path / "m.fckpt")
    assert q.spec == TINY and q.names() == p.names()
    for a, b in zip(p.values(), q.values()):
        np.testing.assert_array_equal(a.data, b.data)
    assert (s2.T, s2.beta_start, s2.beta_end) == (s.T, s.beta_start, s.beta_end)
    assert meta["note"] == "x" and extra == {}
    save_checkpoint(tmp_path / "n.fckpt", q, s2, extra_meta={"note": "x"})
    assert (tmp_path / "m.fckpt").read_bytes() == (tmp_path / "n.fckpt").read_bytes()


def test_checkpoint_starts_with_magic(tmp_path):
    save_checkpoint(tmp_path / "m.fckpt", init_params(TINY), desk_schedule())
    assert (tmp_path / "m.fckpt").read_bytes()[:6] == b"FCKPT1"


def test_corrupt_checkpoint_rejected(tmp_path):
    path = tmp_path / "m.fckpt"
    save_checkpoint(path, init_params(TINY), desk_schedule())
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
