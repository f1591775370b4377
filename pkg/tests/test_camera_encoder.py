import numpy as np
import pytest

from latent_sdf import encoder
from latent_sdf.autodiff import Graph, finite_difference_check
from latent_sdf.camera import FeatureMap, WeakPerspectiveCamera, project, sample_bilinear
from latent_sdf.errors import NumericError, UsageError
from latent_sdf.nn import declare


def test_project_examples():
    assert np.allclose(project([1, 2, 3], WeakPerspectiveCamera(1.0)), [1, 2])
    out = project([0.5, -0.5, 7], WeakPerspectiveCamera(2.0, (0.1, 0.2)))
    assert np.allclose(out, [1.1, -0.8], atol=1e-15)


def test_camera_rejects_nonpositive_scale():
    with pytest.raises(UsageError):
        WeakPerspectiveCamera(0.0)
    with pytest.raises(UsageError):
        WeakPerspectiveCamera(-1.0)


def test_project_rejects_non_finite():
    with pytest.raises(NumericError):
        project([np.nan, 0, 0], WeakPerspectiveCamera(1.0))


def test_project_is_linear_without_translation():
    rng = np.random.default_rng(0)
    cam = WeakPerspectiveCamera(1.7)
    x, y = rng.normal(size=(2, 3))
    a, b = 0.3, -2.1
    assert np.allclose(project(a * x + b * y, cam), a * project(x, cam) + b * project(y, cam))


def test_bilinear_pixel_centre_and_constant():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(2, 4, 5))
    fmap = FeatureMap(data)
    i, j = 2, 3
    uv = [2 * (j + 0.5) / 5 - 1, 2 * (i + 0.5) / 4 - 1]
    assert np.allclose(sample_bilinear(fmap, uv), data[:, i, j])
    const = FeatureMap(np.full((3, 6, 6), 0.7))
    assert np.allclose(sample_bilinear(const, rng.uniform(-1.5, 1.5, size=(10, 2))), 0.7)


def test_bilinear_midpoint_of_two_pixels():
    fmap = FeatureMap(np.array([[[0.0, 1.0]]]))
    assert np.allclose(sample_bilinear(fmap, [0.0, 0.0]), [0.5])


def test_bilinear_is_convex_combination():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(3, 7, 9))
    out = sample_bilinear(FeatureMap(data), rng.uniform(-1.2, 1.2, size=(200, 2)))
    assert np.all(out >= data.min(axis=(1, 2)) - 1e-12)
    assert np.all(out <= data.max(axis=(1, 2)) + 1e-12)


def test_bilinear_empty_map():
    with pytest.raises(UsageError):
        sample_bilinear(FeatureMap(np.zeros((1, 0, 0))), [0, 0])


def test_bilinear_uv_gradient_matches_fd():
    rng = np.random.default_rng(3)
    g = Graph()
    maps, uv = g.input("maps", requires_grad=False), g.input("uv")
    out = g.sum(g.bilinear(maps, uv) * rng.normal(size=(1, 5, 2)))
    vals = {"maps": rng.normal(size=(1, 2, 8, 8)), "uv": rng.uniform(-0.8, 0.8, size=(1, 5, 2))}
    assert finite_difference_check(g, out, uv, vals, epsilon=1e-6) < 1e-4


def _encoder_setup(seed=0):
    cfg = encoder.EncoderConfig()
    params = encoder.init_params(cfg, np.random.default_rng(seed))
    return cfg, params


def test_encoder_default_config():
    cfg = encoder.EncoderConfig()
    assert cfg.widths == [16, 32, 32] and cfg.kernel == 3 and cfg.out_channels == 32


def test_encoder_zero_input_zero_output():
    cfg, params = _encoder_setup()
    out = encoder.encode(FeatureMap(np.zeros((3, 10, 12))), params, cfg)
    assert out.data.shape == (32, 10, 12)
    assert np.all(out.data == 0)


def test_encoder_shape_and_channel_check():
    cfg, params = _encoder_setup()
    out = encoder.encode(FeatureMap(np.random.default_rng(0).uniform(-1, 1, (3, 9, 7))), params, cfg)
    assert out.data.shape == (cfg.out_channels, 9, 7)
    with pytest.raises(UsageError):
        encoder.encode(FeatureMap(np.zeros((4, 8, 8))), params, cfg)


def test_encoder_translation_equivariance():
    cfg, params = _encoder_setup(1)
    rng = np.random.default_rng(5)
    img = rng.uniform(-1, 1, (3, 16, 16))
    shifted = np.roll(img, 1, axis=2)
    a = encoder.encode(FeatureMap(img), params, cfg).data
    b = encoder.encode(FeatureMap(shifted), params, cfg).data
    crop = slice(4, 12)
    assert np.allclose(a[:, crop, crop], b[:, crop, 5:13])


def test_encoder_weight_gradient_fd():
    cfg = encoder.EncoderConfig(widths=[4, 3], kernel=3)
    rng = np.random.default_rng(2)
    params = encoder.init_params(cfg, rng)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    g = Graph()
    images = g.input("images", requires_grad=False)
    nodes = declare(g, params)
    out = encoder.build(g, images, nodes, cfg)
    readout = g.sum(out * rng.normal(size=(1, 3, 6, 6)))
    vals = {"images": rng.uniform(-1, 1, (1, 3, 6, 6)), **params}
    for name in ("encoder.w0", "encoder.w1", "encoder.b0"):
        assert finite_difference_check(g, readout, nodes[name], vals, epsilon=1e-6, max_entries=30) < 1e-4
