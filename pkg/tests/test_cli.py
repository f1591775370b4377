import json
from pathlib import Path

import numpy as np
import pytest

from latent_sdf import cli, surface, training

GOLDEN = Path(__file__).parent / "golden"

SMALL = {
    "seed": 0,
    "model": {
        "encoder": {"widths": [8]},
        "fusion": {"hidden": 16, "code_dim": 8},
        "decoder": {"hidden": [32, 32]},
        "resolution": 12,
        "diffusion_layers": 1,
    },
    "train": {"steps": 4, "views_per_step": 2, "n_points": 256},
}


def sphere_mesh(r, res):
    return surface.marching_cubes(lambda x: np.linalg.norm(x, axis=-1) - r, -1, 1, res)


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """generate -> train -> reconstruct once; tests inspect the artifacts."""
    root = tmp_path_factory.mktemp("chain")
    (root / "spec.json").write_text(json.dumps({"shape": "sphere", "views": [0, 90, 180, 270],
                                                "resolution": 24, "gt_resolution": 24}))
    (root / "config.json").write_text(json.dumps(SMALL))
    assert cli.main(["generate", str(root / "spec.json"), str(root / "scene"), "--seed", "3"]) == 0
    assert cli.main(["train", str(root / "scene"), str(root / "ck"), "--config", str(root / "config.json")]) == 0
    assert cli.main(["reconstruct", str(root / "ck"), str(root / "scene"), str(root / "pred.obj"),
                     "--views", "2", "--resolution", "24"]) == 0
    return root


def test_dump_config_roundtrips(capsys):
    code, out, _ = run(capsys, "--dump-config")
    assert code == 0
    cfg = json.loads(out)
    assert set(cfg) == {"seed", "scene", "model", "train", "evaluate", "fit"}
    assert cli.RunConfig.from_dict(cfg) == cli.RunConfig()


def test_unknown_config_section_is_usage_error(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"trian": {}}')
    code, _, err = run(capsys, "train", tmp_path, tmp_path / "o", "--config", tmp_path / "c.json")
    assert code == 2 and "trian" in err


def test_no_command_is_usage_error(capsys):
    assert run(capsys)[0] == 2


def test_generate_is_deterministic(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"views": [0, 180], "resolution": 16, "gt_resolution": 16}))
    for name in ("a", "b"):
        assert run(capsys, "generate", spec, tmp_path / name, "--seed", 1)[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_generate_default_spec_has_eight_views(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"resolution": 16, "gt_resolution": 16}))
    code, out, _ = run(capsys, "generate", spec, tmp_path / "scene")
    assert code == 0 and "8 observations" in out


def test_generate_errors(tmp_path, capsys):
    code, _, err = run(capsys, "generate", tmp_path / "missing.json", tmp_path / "out")
    assert code == 2 and "missing.json" in err
    bad = tmp_path / "bad.json"
    bad.write_text('{"shape": "sphere",\n "views": [0,]}')
    code, _, err = run(capsys, "generate", bad, tmp_path / "out")
    assert code == 2 and "line 2" in err
    bad.write_text('{"shape": "cube"}')
    code, _, err = run(capsys, "generate", bad, tmp_path / "out")
    assert code == 2 and "cube" in err


def test_train_outputs(chain):
    rows = training.read_history(chain / "ck" / "loss.csv")
    assert [r.step for r in rows] == [0, 1, 2, 3]
    assert json.loads((chain / "ck" / "run_config.json").read_text())["train"]["steps"] == 4


def test_train_zero_steps_keeps_initialization(chain, tmp_path, capsys):
    code, _, _ = run(capsys, "train", chain / "scene", tmp_path / "ck", "--config", chain / "config.json",
                     "--steps", 0)
    assert code == 0
    params, cfg, meta = training.load_model(tmp_path / "ck")
    init = training.initial_state(cfg, SMALL["seed"]).params
    assert meta["step"] == 0 and all(np.array_equal(params[k], init[k]) for k in init)


def test_train_resume_continues_csv(chain, tmp_path, capsys):
    base = ["train", chain / "scene", tmp_path / "ck", "--config", chain / "config.json"]
    assert run(capsys, *base, "--steps", 2)[0] == 0
    assert run(capsys, *base, "--steps", 4, "--resume")[0] == 0
    rows = training.read_history(tmp_path / "ck" / "loss.csv")
    full = training.read_history(chain / "ck" / "loss.csv")
    assert [r.step for r in rows] == [0, 1, 2, 3]
    assert [r.total for r in rows] == [r.total for r in full]


def test_train_incomplete_scene(chain, tmp_path, capsys):
    scene = tmp_path / "scene"
    scene.mkdir()
    for f in (chain / "scene").iterdir():
        if f.name != "normal_0.pfm":
            (scene / f.name).write_bytes(f.read_bytes())
    code, _, err = run(capsys, "train", scene, tmp_path / "ck", "--config", chain / "config.json")
    assert code == 2 and "normal_0.pfm" in err


def test_reconstruct_outputs(chain, tmp_path, capsys):
    pred = surface.read_obj(chain / "pred.obj")
    assert not pred.is_empty
    coarse, fine = tmp_path / "c.obj", tmp_path / "f.obj"
    for path, res in ((coarse, 16), (fine, 64)):
        assert run(capsys, "reconstruct", chain / "ck", chain / "scene", path, "--views", 2,
                   "--resolution", res)[0] == 0
    assert len(surface.read_obj(fine).vertices) > len(surface.read_obj(coarse).vertices)


def test_reconstruct_errors(chain, tmp_path, capsys):
    code, _, err = run(capsys, "reconstruct", chain / "ck", chain / "scene", tmp_path / "x.obj", "--views", 9)
    assert code == 2 and "9 views" in err
    ck = tmp_path / "ck"
    ck.mkdir()
    for f in (chain / "ck").iterdir():
        (ck / f.name).write_bytes(f.read_bytes())
    state = ck / "state.json"
    state.write_text(state.read_text().replace('"format": 1', '"format": 7'))
    assert run(capsys, "reconstruct", ck, chain / "scene", tmp_path / "x.obj")[0] == 3


def test_evaluate_reports(tmp_path, capsys):
    surface.write_obj(sphere_mesh(0.5, 128), tmp_path / "a.obj")
    surface.write_obj(sphere_mesh(0.6, 128), tmp_path / "b.obj")
    code, out, _ = run(capsys, "evaluate", tmp_path / "a.obj", tmp_path / "a.obj", "--out", tmp_path / "r.json")
    assert code == 0 and json.loads(out)["chamfer"] == 0.0
    code, out, _ = run(capsys, "evaluate", tmp_path / "a.obj", tmp_path / "b.obj", "--out", tmp_path / "r1.json")
    assert abs(json.loads(out)["chamfer"] - 0.1) < 0.005
    run(capsys, "evaluate", tmp_path / "a.obj", tmp_path / "b.obj", "--out", tmp_path / "r2.json")
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()


def test_evaluate_empty_mesh(tmp_path, capsys):
    (tmp_path / "e.obj").write_text("")
    surface.write_obj(sphere_mesh(0.5, 16), tmp_path / "a.obj")
    code, _, err = run(capsys, "evaluate", tmp_path / "e.obj", tmp_path / "a.obj")
    assert code == 2 and "empty" in err


@pytest.fixture(scope="module")
def humanoid_scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("hum")
    (root / "spec.json").write_text(json.dumps({"shape": "humanoid", "poses": ["crouch"], "views": [135],
                                                "resolution": 48, "gt_resolution": 16}))
    assert cli.main(["generate", str(root / "spec.json"), str(root / "scene")]) == 0
    return root / "scene"


def _objective(path):
    return np.loadtxt(path / "objective.csv", delimiter=",", skiprows=1)[:, 1]


def test_fit_zero_noise_is_flat(humanoid_scene_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "fit", humanoid_scene_dir, 0, tmp_path, "--init-noise", 0, "--steps", 5)
    assert code == 0
    obj = _objective(tmp_path)
    assert np.all(obj <= 1e-12)


def test_fit_recovers_root(humanoid_scene_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "fit", humanoid_scene_dir, 0, tmp_path, "--steps", 300, "--seed", 3)
    assert code == 0
    obj = _objective(tmp_path)
    assert np.all(np.diff(obj) <= 0)
    assert float(out.split("root error")[1].split()[0]) < 0.02
    assert (tmp_path / "params.json").is_file()
    recorded = cli.RunConfig.from_dict(json.loads((tmp_path / "run_config.json").read_text()))
    assert recorded.fit.steps == 300 and recorded.fit.seed == 3 and recorded.scene.shape == "humanoid"


def test_fit_missing_view(humanoid_scene_dir, tmp_path, capsys):
    code, _, err = run(capsys, "fit", humanoid_scene_dir, 4, tmp_path)
    assert code == 2 and "view 4" in err


# ------------------------------------------------------------- golden chain
def test_golden_chain(chain, tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", chain / "pred.obj", chain / "scene" / "canonical_gt.obj", "--samples", 2000, "--seed", 0)
    assert code == 0
    got = json.loads(out)
    golden = json.loads((GOLDEN / "chain_report.json").read_text())
    assert got["n_samples"] == golden["n_samples"] and got["seed"] == golden["seed"]
    assert abs(got["chamfer"] - golden["chamfer"]) < 1e-6
