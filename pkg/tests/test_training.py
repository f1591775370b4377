import numpy as np
import pytest

from latent_sdf import encoder, field, fusion, synthetic
from latent_sdf import training as T
from latent_sdf.autodiff import Graph, backward, evaluate
from latent_sdf.errors import FormatError, UsageError
from latent_sdf.model import ModelConfig
from latent_sdf.volume import VolumeBounds


# ------------------------------------------------------------- closed forms
def test_loss_sdf_examples():
    x = np.random.default_rng(0).normal(size=7)
    assert T.loss_sdf(x, x, 0.1) == 0.0
    assert abs(T.loss_sdf([0.05], [-0.05], 0.1) - 0.1) < 1e-12
    assert T.loss_sdf([0.5], [0.3], 0.1) == 0.0
    with pytest.raises(UsageError):
        T.loss_sdf([0.0], [0.0], 0.0)


def test_loss_sdf_truncation_plateau():
    rng = np.random.default_rng(1)
    pred = rng.uniform(-0.05, 0.05, size=50)
    gt = rng.uniform(-0.05, 0.05, size=50)
    far_p = np.array([0.3, -0.4])
    far_g = np.array([0.2, -0.9])
    base = T.loss_sdf(np.r_[pred, far_p], np.r_[gt, far_g], 0.1)
    moved = T.loss_sdf(np.r_[pred, far_p + [5.0, -2.0]], np.r_[gt, far_g + [0.7, -0.1]], 0.1)
    assert abs(base - moved) <= 1e-12


def test_loss_sdf_zero_gradient_on_plateau():
    g = Graph()
    p = g.input("p")
    out = T.build_loss_sdf(g, p, np.array([0.3, 0.02]), 0.1)
    evaluate(g, {"p": np.array([0.5, 0.0])})
    grad = backward(g, out)[p]
    assert grad[0] == 0.0 and grad[1] != 0.0


def test_loss_eikonal_examples():
    rng = np.random.default_rng(2)
    unit = rng.normal(size=(9, 3))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    assert abs(T.loss_eikonal(unit)) < 1e-12
    assert abs(T.loss_eikonal(np.tile([2.0, 0, 0], (5, 1))) - 1.0) < 1e-12
    assert abs(T.loss_eikonal(np.zeros((4, 3))) - 1.0) < 1e-12


def test_total_loss_examples():
    assert abs(T.total_loss(1.0, 0.5, 1.0, 0.1) - 1.05) < 1e-12
    assert T.total_loss(0.3, 0.9, 2.0, 0.0) == 0.6
    assert T.total_loss(0.0, 0.0, 1.0, 0.1) == 0.0


# ------------------------------------------------------------------- adam
def test_adam_minimizes_square():
    params, state = {"w": np.array([1.0])}, T.AdamState()
    for _ in range(200):
        params, state = T.adam_step(params, {"w": 2 * params["w"]}, state, lr=0.1)
    assert abs(params["w"][0]) < 1e-3


def test_adam_zero_gradient_and_first_step():
    params, state = {"w": np.array([0.3, -2.0])}, T.AdamState()
    for _ in range(5):
        params, state = T.adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(params["w"], [0.3, -2.0])
    fresh, _ = T.adam_step({"w": np.zeros(3)}, {"w": np.array([3.0, -1e-3, 50.0])}, T.AdamState(), lr=0.01)
    assert np.allclose(fresh["w"], [-0.01, 0.01, -0.01], rtol=1e-4)


# --------------------------------------------------------------- sampling
def test_sample_points_mix_and_labels():
    oracle = synthetic.humanoid_oracle()
    bounds = VolumeBounds((-1.0,) * 3, (1.0,) * 3, 8)
    batch = T.sample_points(oracle, bounds, 10000, 0.2, 0.05, np.random.default_rng(3))
    assert batch.n_uniform == 2000 and len(batch.points) == 10000
    assert np.array_equal(batch.sdf, oracle(batch.points))
    uniform = batch.points[:2000]
    assert np.all((uniform >= -1) & (uniform <= 1))


def test_sample_points_on_surface_and_deterministic():
    oracle = synthetic.sphere_oracle(1.0)
    bounds = VolumeBounds((-1.2,) * 3, (1.2,) * 3, 8)
    batch = T.sample_points(oracle, bounds, 500, 0.0, 0.0, np.random.default_rng(4))
    assert np.abs(batch.sdf).max() <= 1e-12
    a = T.sample_points(oracle, bounds, 300, 0.2, 0.05, np.random.default_rng(9))
    b = T.sample_points(oracle, bounds, 300, 0.2, 0.05, np.random.default_rng(9))
    assert np.array_equal(a.points, b.points) and np.array_equal(a.sdf, b.sdf)
    with pytest.raises(UsageError):
        T.sample_points(oracle, bounds, 0, 0.2, 0.05, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(UsageError):
        T.TrainConfig(delta=0.0)
    with pytest.raises(UsageError):
        T.TrainConfig(uniform_fraction=1.5)
    with pytest.raises(UsageError):
        T.TrainConfig(lr=-1.0)


# ------------------------------------------------------------------- loop
SMALL_MODEL = ModelConfig(
    encoder=encoder.EncoderConfig(widths=[8]),
    fusion=fusion.FusionConfig(hidden=16, code_dim=8),
    decoder=field.DecoderConfig(hidden=[32, 32]),
    resolution=12,
    diffusion_layers=1,
)


@pytest.fixture(scope="module")
def small_data():
    spec = synthetic.SceneSpec(views=[0, 90, 180, 270], resolution=24, gt_resolution=24)
    scene = synthetic.make_scene(spec, np.random.default_rng(0))
    return T.TrainingData.from_scene(scene)


def _small_config(**kw):
    base = dict(steps=3, views_per_step=2, n_points=128)
    base.update(kw)
    return T.TrainConfig(**base)


def test_zero_weights_leave_parameters_unchanged(small_data):
    init = T.initial_state(SMALL_MODEL, 0)
    out = T.train(small_data, _small_config(lambda_sdf=0.0, lambda_normal=0.0), SMALL_MODEL, seed=0)
    assert all(np.array_equal(out.params[k], init.params[k]) for k in init.params)
    assert len(out.history) == 3 and all(r.total == 0.0 for r in out.history)


def test_eikonal_path_reaches_parameters(small_data):
    trainer = T.Trainer(small_data, SMALL_MODEL, _small_config(lambda_sdf=0.0, lambda_normal=1.0),
                        list(T.initial_state(SMALL_MODEL, 0).params))
    state = T.initial_state(SMALL_MODEL, 1)
    state.params = {k: v + 0.01 * state.rng.normal(size=v.shape) for k, v in state.params.items()}
    images, uv = small_data.inputs([0, 1])
    batch = T.sample_points(small_data.oracle, trainer.pipe.bounds, 64, 0.2, 0.05, state.rng)
    binds = trainer.pipe.bindings(images, uv, batch.points, state.params)
    binds["gt"] = batch.sdf
    evaluate(trainer.pipe.graph, binds)
    grads = backward(trainer.pipe.graph, trainer.total)
    for name in ("decoder.w0", "decoder.w1", "fusion.integrate.w1", "diffuse.w0", "encoder.w0"):
        assert np.abs(grads[trainer.pipe.nodes[name]]).max() > 0, name


def test_training_is_deterministic(small_data):
    a = T.train(small_data, _small_config(), SMALL_MODEL, seed=5)
    b = T.train(small_data, _small_config(), SMALL_MODEL, seed=5)
    assert [r.total for r in a.history] == [r.total for r in b.history]
    assert all(np.isfinite(r.total) for r in a.history)


def test_k_larger_than_views(small_data):
    with pytest.raises(UsageError):
        T.train(small_data, _small_config(views_per_step=5), SMALL_MODEL)


def test_checkpoint_and_resume_continue_history(tmp_path, small_data):
    cfg = _small_config(steps=4)
    full = T.train(small_data, cfg, SMALL_MODEL, seed=2)

    half = T.train(small_data, _small_config(steps=2), SMALL_MODEL, seed=2)
    T.save_checkpoint(half, tmp_path / "ck", SMALL_MODEL, cfg)
    T.write_history(half.history, tmp_path / "loss.csv")
    rows = T.read_history(tmp_path / "loss.csv")
    state, model_cfg, _ = T.load_state(tmp_path / "ck", rows)
    assert model_cfg == SMALL_MODEL
    resumed = T.train(small_data, cfg, model_cfg, state=state)
    T.write_history(resumed.history[2:], tmp_path / "loss.csv", append=True)

    rows = T.read_history(tmp_path / "loss.csv")
    assert [r.step for r in rows] == [0, 1, 2, 3]
    assert [r.total for r in rows] == [r.total for r in full.history]
    assert all(np.array_equal(resumed.params[k], full.params[k]) for k in full.params)


def test_load_model_rejects_version(tmp_path, small_data):
    state = T.initial_state(SMALL_MODEL, 0)
    T.save_checkpoint(state, tmp_path / "ck", SMALL_MODEL, _small_config())
    params, cfg, meta = T.load_model(tmp_path / "ck")
    assert meta["step"] == 0 and all(np.array_equal(params[k], state.params[k]) for k in params)
    text = (tmp_path / "ck" / "state.json").read_text().replace('"format": 1', '"format": 99')
    (tmp_path / "ck" / "state.json").write_text(text)
    with pytest.raises(FormatError, match="format"):
        T.load_model(tmp_path / "ck")
