"""Command-line entry point: generate, train, reconstruct, evaluate, fit.

Exit codes: 0 success, 2 bad input, 3 artifact or version problem,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as mdl
from . import surface as srf
from . import synthetic as syn
from . import template as tpl
from . import training as trn
from .errors import FormatError, LatentSdfError, NumericError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class EvalConfig:
    views: int = 4
    resolution: int = 64
    n_samples: int = 10000
    seed: int = 0


@dataclass
class FitConfig:
    init_noise: float = 0.2
    steps: int = 200
    lr: float = 0.01
    silhouette_weight: float = 0.0
    free: str = "root"  # root | all
    seed: int = 0


@dataclass
class RunConfig:
    """Every knob of a run; replaying it with the same seed reproduces the outputs."""

    seed: int = 0
    scene: syn.SceneSpec = field(default_factory=syn.SceneSpec)
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)
    train: trn.TrainConfig = field(default_factory=trn.TrainConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    fit: FitConfig = field(default_factory=FitConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise UsageError(f"unknown config section(s): {', '.join(extra)}")

        def section(name, build):
            try:
                return build(d.get(name, {}))
            except TypeError as exc:
                raise UsageError(f"config section {name!r}: {exc}") from None

        return cls(
            seed=int(d.get("seed", 0)),
            scene=section("scene", syn.SceneSpec.from_dict),
            model=section("model", mdl.ModelConfig.from_dict),
            train=section("train", lambda s: trn.TrainConfig(**s)),
            evaluate=section("evaluate", lambda s: EvalConfig(**s)),
            fit=section("fit", lambda s: FitConfig(**s)),
        )


def read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def pick_views(n_available: int, k: int) -> list[int]:
    """K evenly spaced observation indices."""
    if not 1 <= k <= n_available:
        raise UsageError(f"requested {k} views but the scene has {n_available}")
    return [int(i) for i in np.floor(np.arange(k) * n_available / k)]


# ---------------------------------------------------------------- commands
def cmd_generate(args) -> int:
    spec = syn.SceneSpec.from_dict(read_json(args.spec, "scene spec"))
    scene = syn.make_scene(spec, np.random.default_rng(args.seed), seed=args.seed)
    out = syn.save_scene(scene, args.out)
    print(f"wrote {len(scene.observations)} observations to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.from_dict(read_json(args.config, "config")) if args.config else RunConfig()
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    scene = syn.load_scene(args.scene)
    data = trn.TrainingData.from_scene(scene)
    out = Path(args.out)
    csv_path = out / "loss.csv"
    if args.resume:
        history = trn.read_history(csv_path) if csv_path.is_file() else []
        state, model_cfg, _ = trn.load_state(out, history)
        if model_cfg != cfg.model:
            raise FormatError(f"{out}: checkpoint model config differs from the requested one")
    else:
        state = trn.initial_state(cfg.model, cfg.seed)
    start = state.step
    state = trn.train(data, cfg.train, cfg.model, seed=cfg.seed, state=state)
    trn.save_checkpoint(state, out, cfg.model, cfg.train, {"scene": str(Path(args.scene).resolve())})
    trn.write_history(state.history[start:], csv_path, append=args.resume)
    _dump_json(cfg.to_dict(), out / "run_config.json")
    if state.history:
        first, last = state.history[0], state.history[-1]
        print(f"steps {start}->{state.step}  total {first.total:.5f} -> {last.total:.5f}")
    else:
        print("no steps run; checkpoint holds the initialization")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    params, model_cfg, _ = trn.load_model(args.checkpoint)
    scene = syn.load_scene(args.scene)
    views = pick_views(len(scene.observations), args.views)
    data = trn.TrainingData.from_scene(scene)
    volume = mdl.infer_volume(scene.template, model_cfg, params, *data.inputs(views))
    mesh = mdl.reconstruct_mesh(volume, params, model_cfg, args.resolution)
    if mesh.is_empty:
        raise NumericError("the reconstructed field has no zero crossing inside the volume")
    srf.write_obj(mesh, args.out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return EXIT_OK


def _load_mesh(path) -> srf.TriangleMesh:
    if not Path(path).is_file():
        raise UsageError(f"mesh not found: {path}")
    mesh = srf.read_obj(path)
    if mesh.is_empty:
        raise UsageError(f"{path}: mesh is empty")
    return mesh


def cmd_evaluate(args) -> int:
    report = srf.metric_report(_load_mesh(args.pred), _load_mesh(args.gt), args.samples, args.seed)
    text = srf.write_report(report, args.out) if args.out else json.dumps(report, indent=1, sort_keys=True) + "\n"
    sys.stdout.write(text)
    return EXIT_OK


def cmd_fit(args) -> int:
    scene = syn.load_scene(args.scene)
    if not 0 <= args.view < len(scene.observations):
        raise UsageError(f"view {args.view} does not exist (scene has {len(scene.observations)})")
    obs = scene.observations[args.view]
    init = tpl.perturb_pose(obs.params, args.init_noise, np.random.default_rng(args.seed))
    config = tpl.RefineConfig(
        steps=args.steps, lr=args.lr, silhouette_weight=args.silhouette_weight,
        free_joints=(0,) if args.free == "root" else None, optimize_shape=args.free == "all",
    )
    result = tpl.refine(scene.template, init, obs.camera, obs.keypoints,
                        obs.mask if args.silhouette_weight else None, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tpl.save_params(result.params, out / "params.json")
    fit_cfg = FitConfig(args.init_noise, args.steps, args.lr, args.silhouette_weight, args.free, args.seed)
    _dump_json(RunConfig(seed=args.seed, scene=scene.spec, fit=fit_cfg).to_dict(), out / "run_config.json")
    with open(out / "objective.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "objective"])
        w.writerows([i, repr(v)] for i, v in enumerate(result.history))
    err = tpl.rotation_angle_between(result.params.theta[0], obs.params.theta[0])
    print(f"objective {result.history[0]:.6g} -> {result.history[-1]:.6g}  root error {err:.5f} rad")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-sdf", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("--dump-config", action="store_true", help="print the full default config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("generate", help="render a synthetic scene directory")
    g.add_argument("spec", help="scene spec JSON")
    g.add_argument("out", help="output scene directory")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a scene; writes checkpoint files and loss.csv")
    t.add_argument("scene")
    t.add_argument("out", help="checkpoint directory")
    t.add_argument("--config", help="run config JSON (see --dump-config)")
    t.add_argument("--steps", type=int, help="override train.steps (total, including resumed steps)")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in OUT")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="extract a mesh from a trained checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("scene")
    r.add_argument("out", help="output OBJ path")
    r.add_argument("--views", type=int, default=EvalConfig.views, help="K input views")
    r.add_argument("--resolution", type=int, default=EvalConfig.resolution)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="Chamfer report between two meshes")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--samples", type=int, default=EvalConfig.n_samples)
    e.add_argument("--seed", type=int, default=EvalConfig.seed)
    e.add_argument("--out", help="also write the report to this path")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("fit", help="refine body parameters of one view from keypoints (and mask)")
    f.add_argument("scene")
    f.add_argument("view", type=int)
    f.add_argument("out", help="output directory for params.json and objective.csv")
    f.add_argument("--init-noise", type=float, default=FitConfig.init_noise, help="root rotation noise (rad)")
    f.add_argument("--steps", type=int, default=FitConfig.steps)
    f.add_argument("--lr", type=float, default=FitConfig.lr)
    f.add_argument("--silhouette-weight", type=float, default=FitConfig.silhouette_weight)
    f.add_argument("--free", choices=["root", "all"], default=FitConfig.free)
    f.add_argument("--seed", type=int, default=FitConfig.seed)
    f.set_defaults(func=cmd_fit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_config:
        sys.stdout.write(json.dumps(RunConfig().to_dict(), indent=1, sort_keys=True) + "\n")
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LatentSdfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
