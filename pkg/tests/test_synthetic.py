import numpy as np
import pytest

from latent_sdf import synthetic as S
from latent_sdf.camera import WeakPerspectiveCamera, project
from latent_sdf.errors import FormatError, UsageError
from latent_sdf.surface import chamfer_points, sample_surface
from latent_sdf.template import BodyParams, joint_transforms


@pytest.fixture(scope="module")
def sphere_scene():
    return S.make_scene(S.SceneSpec(gt_resolution=64), np.random.default_rng(0))


@pytest.fixture(scope="module")
def humanoid_scene():
    spec = S.SceneSpec(shape="humanoid", views=[0, 90], gt_resolution=96)
    return S.make_scene(spec, np.random.default_rng(1))


def test_oracle_examples():
    assert S.oracle_sdf(S.sphere_oracle(0.7), [0, 0, 0]) == -0.7
    assert S.oracle_sdf(S.sphere_oracle(0.5), [1, 0, 0]) == 0.5
    union = S.SdfOracle([S.Primitive("sphere", 0, (-1, 0, 0), radius=0.3),
                         S.Primitive("sphere", 0, (1, 0, 0), radius=0.5)], np.zeros((1, 3)))
    assert abs(union([-0.5, 0, 0]) - 0.2) < 1e-15


def test_primitive_distances_are_exact():
    cap = S.Primitive("capsule", 0, (0, 0, 0), (0, 1, 0), radius=0.2)
    assert np.allclose(cap.distance(np.array([[0.5, 0.5, 0], [0, 1.5, 0], [0, 0.5, 0]])), [0.3, 0.3, -0.2])
    box = S.Primitive("box", 0, (0, 0, 0), (0.5, 0.3, 0.2), radius=0.0)
    assert np.allclose(box.distance(np.array([[1.0, 0, 0], [0, 0, 0], [0.5 + 0.3, 0.3 + 0.4, 0]])), [0.5, -0.2, 0.5])


def test_surface_points_lie_on_zero_set():
    oracle = S.humanoid_oracle()
    pts = oracle.surface_points(2000, np.random.default_rng(0))
    assert pts.shape == (2000, 3)
    assert np.abs(oracle(pts)).max() < 1e-9


def test_spec_validation():
    with pytest.raises(UsageError):
        S.SceneSpec(shape="cube")
    with pytest.raises(UsageError, match="poses\\[0\\]"):
        S.SceneSpec(poses=["dance"])
    with pytest.raises(UsageError, match="unknown spec field"):
        S.SceneSpec.from_dict({"shape": "sphere", "colour": 1})


def test_normals_unit_and_mask_matches(sphere_scene):
    for obs in sphere_scene.observations:
        n = obs.normal_map.data
        norms = np.linalg.norm(n, axis=0)
        assert np.array_equal(obs.mask, norms > 0)
        assert np.abs(norms[obs.mask] - 1).max() < 1e-3


def test_sphere_front_view_and_disc_area():
    spec = S.SceneSpec(views=[0], jitter=0.0, gt_resolution=16)
    obs = S.make_scene(spec, np.random.default_rng(0)).observations[0]
    centre = obs.normal_map.data[:, 31:33, 31:33].mean(axis=(1, 2))
    assert centre[2] > 0.99
    expected = np.pi * (spec.scale * spec.radius * spec.resolution / 2) ** 2
    assert abs(obs.mask.sum() - expected) < 0.05 * expected


def test_keypoints_are_projected_joints(humanoid_scene):
    obs = humanoid_scene.observations[1]
    _, tg, _ = joint_transforms(humanoid_scene.template, obs.params)
    assert np.allclose(obs.keypoints, project(tg, obs.camera))


def test_views_rotate_about_vertical(humanoid_scene):
    views = [o.view for o in humanoid_scene.observations]
    assert views == [0.0, 90.0]
    assert np.allclose(humanoid_scene.observations[1].params.theta[0], [0, np.pi / 2, 0])


def test_scene_determinism():
    spec = S.SceneSpec(views=[0, 45], resolution=24, gt_resolution=24)
    a = S.make_scene(spec, np.random.default_rng(5))
    b = S.make_scene(spec, np.random.default_rng(5))
    for oa, ob in zip(a.observations, b.observations):
        assert np.array_equal(oa.normal_map.data, ob.normal_map.data)
        assert oa.camera == ob.camera
    assert np.array_equal(a.canonical_gt.vertices, b.canonical_gt.vertices)


def test_canonical_mesh_close_to_oracle(humanoid_scene):
    oracle = humanoid_scene.oracle
    lo, hi = oracle.bounds(0.1)
    half_voxel = 0.5 * (float(hi.max()) - float(lo.min())) / (humanoid_scene.spec.gt_resolution - 1)
    rng = np.random.default_rng(2)
    on_mesh = sample_surface(humanoid_scene.canonical_gt, 10000, rng)
    on_oracle = oracle.surface_points(10000, rng)
    assert chamfer_points(on_mesh, on_oracle) < half_voxel
    assert humanoid_scene.canonical_gt.boundary_edge_count() == 0


def test_oracle_sign_matches_ray_parity(humanoid_scene):
    oracle = humanoid_scene.oracle
    lo, hi = oracle.bounds(0.1)
    voxel = (float(hi.max()) - float(lo.min())) / (humanoid_scene.spec.gt_resolution - 1)
    pts = np.random.default_rng(3).uniform(lo, hi, size=(3000, 3))
    d = oracle(pts)
    pts = pts[np.abs(d) > voxel][:1000]  # the mesh is only voxel-accurate
    mesh_sdf = S.MeshOracle(humanoid_scene.canonical_gt)(pts)
    assert len(pts) == 1000
    assert np.array_equal(np.sign(mesh_sdf), np.sign(oracle(pts)))


def test_view_consistency(humanoid_scene):
    scene = humanoid_scene
    oracle = scene.oracle
    pts = oracle.surface_points(400, np.random.default_rng(4))
    normals = S.finite_difference_normals(oracle, pts)
    visible_all = np.ones(len(pts), bool)
    near_mask = []
    for obs in scene.observations:
        rg, tg, _ = joint_transforms(scene.template, obs.params)
        f = oracle.posed(rg, tg)
        # rest pose: every bone follows the root rigidly
        posed = (pts - scene.template.joints[0]) @ rg[0].T + tg[0]
        facing = (normals @ rg[0].T)[:, 2] > 0.3
        hit, hits, _ = S.sphere_trace(f, posed[:, :2], 3.0, -3.0)
        visible_all &= facing & hit & (np.abs(hits[:, 2] - posed[:, 2]) < 1e-4)
        uv = project(posed, obs.camera)
        res = obs.mask.shape[0]
        col = np.floor((uv[:, 0] + 1) * res / 2).astype(int)
        row = np.floor((uv[:, 1] + 1) * res / 2).astype(int)
        # thin parts can fall between pixel centres, so allow one pixel of slack
        padded = np.pad(obs.mask, 1)
        near = np.zeros(len(pts), bool)
        for dr in (0, 1, 2):
            for dc in (0, 1, 2):
                near |= padded[row + dr, col + dc]
        near_mask.append(near)
    assert visible_all.sum() > 20
    for near in near_mask:
        assert np.all(near[visible_all])


def test_render_rejects_unresolved_rays():
    tpl = S.sphere_template(0.9)
    bad = S.sphere_oracle(1.0)
    # a distance bound far below the true distance never converges
    bad.posed = lambda r, t: (lambda x: 1e-3 * np.ones(len(x)))
    with pytest.raises(S.GenerationError):
        S.render_observation(bad, tpl, BodyParams.zeros(tpl), WeakPerspectiveCamera(0.9), 16)


def test_pfm_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(6).normal(size=(3, 5, 7)).astype(np.float32).astype(np.float64)
    S.write_pfm(tmp_path / "n.pfm", img)
    assert np.array_equal(S.read_pfm(tmp_path / "n.pfm"), img)
    mask = np.random.default_rng(7).random((5, 7)) > 0.5
    S.write_pgm(tmp_path / "m.pgm", mask)
    assert np.array_equal(S.read_pgm(tmp_path / "m.pgm"), mask)
    (tmp_path / "bad.pfm").write_bytes((tmp_path / "n.pfm").read_bytes()[:-4])
    with pytest.raises(FormatError):
        S.read_pfm(tmp_path / "bad.pfm")


def test_scene_directory_roundtrip(tmp_path):
    spec = S.SceneSpec(views=[0, 180], resolution=16, gt_resolution=16)
    scene = S.make_scene(spec, np.random.default_rng(8), seed=8)
    S.save_scene(scene, tmp_path / "a")
    back = S.load_scene(tmp_path / "a")
    assert back.spec == spec and back.seed == 8 and len(back.observations) == 2
    for o, p in zip(scene.observations, back.observations):
        assert np.array_equal(o.mask, p.mask) and o.camera == p.camera
        assert np.allclose(o.normal_map.data, p.normal_map.data, atol=1e-6)
    S.save_scene(back, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    (tmp_path / "a" / "mask_1.pgm").unlink()
    with pytest.raises(UsageError, match="mask_1.pgm"):
        S.load_scene(tmp_path / "a")
