import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdsr.baselines import (BaselineKind, e2e_interp, e2e_recursive, e2e_upsample_z, gaussian_blur_3d,
                             linear_rows, linear_upsample_z, ms_regression_restore, nn_rows, nn_upsample_z,
                             regression_restorer, rows_restorer)
from msdsr.denoiser.net import NetConfig, TinyDenoiserNet
from msdsr.denoiser.train import TrainConfig, train_e2e, train_regression
from msdsr.volume import RowMask, Volume, VolumeError, downsample_z, make_uniform_mask


def z_linear_volume(n=16, channels=2, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.3, 0.7, (channels, n, n, 1))
    slope = rng.uniform(-0.25, 0.25, (channels, n, n, 1)) / n
    z = np.arange(n)[None, None, None, :]
    return Volume((a + slope * z).astype(np.float32))


def test_kinds_exhaustive():
    assert {k.value for k in BaselineKind} == {"nn", "linear", "ms-regression", "e2e"}


def test_nn_examples():
    v = Volume(np.random.default_rng(0).random((1, 2, 2, 3), dtype=np.float32))
    np.testing.assert_array_equal(nn_upsample_z(v, 1).data, v.data)
    two = Volume(np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))], axis=-1))
    np.testing.assert_array_equal(nn_upsample_z(two, 2).data[0, 0, 0], [0, 0, 1, 1])


def test_linear_examples():
    two = Volume(np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))], axis=-1))
    out = linear_upsample_z(two, 2).data[0, 0, 0]
    assert out[1] == 0.5
    with pytest.raises(VolumeError):
        linear_upsample_z(Volume(np.zeros((1, 2, 2, 1))), 2)


@pytest.mark.parametrize("factor", [2, 4, 8])
def test_linear_exact_on_z_linear(factor):
    v = z_linear_volume()
    out = linear_upsample_z(downsample_z(v, factor), factor)
    np.testing.assert_allclose(out.data, v.data, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.sampled_from([1, 2, 4, 8]), st.integers(0, 1000))
def test_interpolators_keep_observed_planes(depth, factor, seed):
    low = Volume(np.random.default_rng(seed).random((2, 3, 3, depth), dtype=np.float32))
    for up in (nn_upsample_z(low, factor), linear_upsample_z(low, factor)):
        assert up.shape[3] == depth * factor
        assert up.data[..., ::factor].tobytes() == low.data.tobytes()


def test_rows_restorer_matches_volume_interpolation():
    obs = np.random.default_rng(0).random((3, 2, 4, 5))
    mask = make_uniform_mask(16, 4)
    np.testing.assert_array_equal(rows_restorer("nn")(obs, mask), nn_rows(obs, 4, axis=-2))
    np.testing.assert_array_equal(rows_restorer("linear")(obs, mask), linear_rows(obs, 4, axis=-2))


def test_ms_regression_examples():
    obs = np.random.default_rng(0).random((2, 8, 6))
    full = make_uniform_mask(8, 8)
    net = TinyDenoiserNet.create(NetConfig(2, 2, 4, 1, 2))
    np.testing.assert_array_equal(ms_regression_restore(net, obs, full, np.random.default_rng(0)), obs)
    mask = make_uniform_mask(8, 2)
    out = ms_regression_restore(net, obs[:, :2], mask, np.random.default_rng(0))
    np.testing.assert_array_equal(out[:, [0, 4]], obs[:, :2])
    assert np.all(out[:, [1, 2, 3, 5, 6, 7]] == 0)


def constant_training_set(count=32, n=8):
    levels = np.random.default_rng(0).uniform(0.2, 0.8, count)
    return np.broadcast_to(levels[:, None, None, None], (count, 1, n, n)).copy()


def test_ms_regression_learns_constants():
    data = constant_training_set()
    cfg = TrainConfig(model="ms-regression", steps=800, batch_size=16, lr=1e-2, l_min=1, l_max=4)
    net, _, _ = train_regression(data, TinyDenoiserNet.create(NetConfig(1, 1, 16, 2, 2)), cfg)
    mask = make_uniform_mask(8, 2)
    restorer = regression_restorer(net)
    for level in (0.3, 0.6):
        obs = np.full((1, 1, 2, 8), level)
        out = restorer(obs, mask, [np.random.default_rng(1)])
        free = out[0, :, [1, 2, 3, 5, 6, 7]]
        assert np.abs(free - level).mean() < 0.05


def test_e2e_examples():
    net = TinyDenoiserNet.create(NetConfig(2, 1, 4, 1, 2))
    a = np.random.default_rng(0).random((1, 6, 6))
    assert np.all(e2e_interp(net, a, a) == 0)
    planes = np.random.default_rng(1).random((3, 1, 6, 6))
    for depth in (1, 2, 3):
        assert e2e_recursive(net, planes, depth).shape[0] == (3 - 1) * 2 ** depth + 1
    low = Volume(np.random.default_rng(2).random((1, 8, 8, 2), dtype=np.float32))
    out = e2e_upsample_z(net, low, 4)
    assert out.shape == (1, 8, 8, 8)
    assert out.data[..., ::4].tobytes() == low.data.tobytes()
    with pytest.raises(VolumeError):
        e2e_upsample_z(net, low, 3)


def test_e2e_learns_identity_on_constants():
    data = constant_training_set()
    trip = np.repeat(data[:, None], 3, axis=1)
    cfg = TrainConfig(model="e2e", steps=400, batch_size=16, lr=1e-2)
    net, _, _ = train_e2e(trip, TinyDenoiserNet.create(NetConfig(2, 1, 8, 2, 2)), cfg)
    for level in (0.3, 0.6):
        plane = np.full((1, 8, 8), level)
        assert np.abs(e2e_interp(net, plane, plane) - level).max() < 0.05


def test_blur_examples():
    const = Volume(np.full((2, 5, 5, 5), 0.3, dtype=np.float32))
    np.testing.assert_allclose(gaussian_blur_3d(const).data, 0.3, rtol=1e-6)
    imp = np.zeros((1, 7, 7, 7), dtype=np.float32)
    imp[0, 3, 3, 3] = 1.0
    out = gaussian_blur_3d(Volume(imp)).data[0]
    k = np.array([0.25, 0.5, 0.25])
    expected = k[:, None, None] * k[None, :, None] * k[None, None, :]
    np.testing.assert_allclose(out[2:5, 2:5, 2:5], expected, rtol=1e-6)
    assert out.sum() == pytest.approx(1.0)


def test_blur_shift_equivariant_in_interior():
    rng = np.random.default_rng(0)
    data = rng.random((1, 12, 12, 12)).astype(np.float32)
    shifted = np.roll(data, 1, axis=1)
    a = gaussian_blur_3d(Volume(data)).data
    b = gaussian_blur_3d(Volume(shifted)).data
    np.testing.assert_allclose(b[:, 3:10, 2:10, 2:10], a[:, 2:9, 2:10, 2:10], rtol=1e-5)
