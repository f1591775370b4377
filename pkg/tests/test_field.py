import numpy as np
import pytest

from latent_sdf import field
from latent_sdf.autodiff import Graph, finite_difference_check
from latent_sdf.errors import FormatError, UsageError
from latent_sdf.nn import declare
from latent_sdf.volume import LatentVolume, VolumeBounds

BOUNDS = VolumeBounds((-2.0,) * 3, (2.0,) * 3, 16)


@pytest.fixture(scope="module")
def sphere_field():
    cfg = field.DecoderConfig()
    params = field.init_sphere(field.init_params(cfg, 8, np.random.default_rng(0)), cfg, 1.0)
    vol = LatentVolume(BOUNDS, np.zeros((8, 16, 16, 16)))
    return field.FieldEvaluator(vol, params, cfg)


def test_sphere_init_accuracy(sphere_field):
    x = np.random.default_rng(1).uniform(-2, 2, size=(1000, 3))
    err = np.abs(sphere_field.sdf(x) - (np.linalg.norm(x, axis=1) - 1))
    assert err.max() < 0.05


def test_sphere_init_origin_surface_and_signs():
    for r in (0.5, 1.0, 1.7):
        cfg = field.DecoderConfig()
        params = field.init_sphere(field.init_params(cfg, 4, np.random.default_rng(2)), cfg, r)
        ev = field.FieldEvaluator(LatentVolume(BOUNDS, np.zeros((4, 16, 16, 16))), params, cfg)
        assert abs(ev.sdf(np.zeros((1, 3)))[0] + r) < 0.05
        dirs = np.random.default_rng(3).normal(size=(200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        assert np.abs(ev.sdf(r * dirs)).max() < 0.05
        assert np.all(ev.sdf(2 * r * dirs) > 0) and np.all(ev.sdf(0.5 * r * dirs) < 0)


def test_sphere_init_rejects_bad_radius():
    cfg = field.DecoderConfig()
    with pytest.raises(UsageError):
        field.init_sphere(field.init_params(cfg, 4, np.random.default_rng(0)), cfg, 0.0)


def test_sdf_is_deterministic(sphere_field):
    x = np.random.default_rng(4).normal(size=(50, 3))
    assert np.array_equal(sphere_field.sdf(x), sphere_field.sdf(x))


def test_sphere_gradient_direction(sphere_field):
    g = sphere_field.spatial_gradient(np.array([[0.5, 0.0, 0.0]]))[0]
    assert g @ np.array([1.0, 0, 0]) / np.linalg.norm(g) > 0.99


def test_constant_field_has_zero_gradient():
    cfg = field.DecoderConfig(hidden=[8, 8])
    params = field.init_params(cfg, 3, np.random.default_rng(0))
    for i in range(3):
        params[f"decoder.w{i}"][3:] = 0.0  # no coordinate access
    vol = LatentVolume(BOUNDS, np.ones((3, 16, 16, 16)))
    ev = field.FieldEvaluator(vol, params, cfg)
    x = np.random.default_rng(1).uniform(-1, 1, size=(10, 3))
    assert np.allclose(ev.spatial_gradient(x), 0.0)
    assert np.allclose(ev.forward_gradient(x), 0.0)


def _random_field(seed):
    rng = np.random.default_rng(seed)
    cfg = field.DecoderConfig(hidden=[16, 16], beta=10.0)
    params = field.init_params(cfg, 4, rng)
    vol = LatentVolume(BOUNDS, rng.normal(size=(4, 16, 16, 16)))
    return cfg, params, vol, rng


def test_spatial_gradient_matches_fd():
    cfg, params, vol, rng = _random_field(5)
    ev = field.FieldEvaluator(vol, params, cfg)
    x = rng.uniform(-1.5, 1.5, size=(20, 3))
    analytic = ev.spatial_gradient(x)
    h = 1e-6
    numeric = np.stack([(ev.sdf(x + h * e) - ev.sdf(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    assert rel.max() < 1e-4


def test_forward_and_reverse_gradients_agree():
    cfg, params, vol, rng = _random_field(6)
    ev = field.FieldEvaluator(vol, params, cfg)
    x = rng.uniform(-1.5, 1.5, size=(30, 3))
    assert np.allclose(ev.forward_gradient(x), ev.spatial_gradient(x), atol=1e-12)


def test_eikonal_path_parameter_gradients_fd():
    cfg, params, vol, rng = _random_field(7)
    g = Graph()
    grid = g.input("grid")
    pts = g.input("points", requires_grad=False)
    nodes = declare(g, params)
    _, grad = field.build_field(g, grid, pts, nodes, cfg, BOUNDS)
    out = g.sum(grad * grad)
    vals = {"grid": vol.grid, "points": rng.uniform(-1, 1, size=(6, 3)), **params}
    for node in (nodes["decoder.w0"], nodes["decoder.w2"], nodes["decoder.b1"], grid):
        assert finite_difference_check(g, out, node, vals, epsilon=1e-6, max_entries=20) < 1e-4


def test_zero_level_set_by_bisection(sphere_field):
    rng = np.random.default_rng(8)
    dirs = rng.normal(size=(20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lo, hi = np.zeros(20), np.full(20, 2.0)
    for _ in range(60):
        mid = (lo + hi) / 2
        inside = sphere_field.sdf(mid[:, None] * dirs) < 0
        lo, hi = np.where(inside, mid, lo), np.where(inside, hi, mid)
    assert np.abs(sphere_field.sdf(lo[:, None] * dirs)).max() < 1e-6


def test_checkpoint_roundtrip(tmp_path):
    cfg, params, _, _ = _random_field(9)
    field.save_checkpoint(params, tmp_path / "d.ckpt")
    back = field.load_checkpoint(tmp_path / "d.ckpt")
    assert back.keys() == params.keys()
    assert all(np.array_equal(back[k], params[k]) for k in params)


def test_checkpoint_version_and_truncation(tmp_path):
    cfg, params, _, _ = _random_field(10)
    path = tmp_path / "d.ckpt"
    field.save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    raw[8] = 99
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        field.load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        field.load_checkpoint(tmp_path / "t.ckpt")
