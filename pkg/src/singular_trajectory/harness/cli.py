"""Command line entry point: ``singular-trajectory <verb> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import diffusion as dm
from ..dataset import Task, TaskSpec, make_split
from ..errors import ConfigError, SingularTrajectoryError
from ..singular_space import T_WIN, build_gists, fit_svd
from . import report, synthetic
from .predictors import PredictorHandle, PredictorKind, SingularTrajectory
from .protocol import Corpus, EvalResult, checkpoint_path, run_protocol, run_split, with_averages

log = logging.getLogger("singular_trajectory")

# Reduced training for a single CPU; every field here is reported as a
# deviation from the full-scale defaults in the run manifest.
DESK_SCALE = {"epochs": 60, "batch_size": 256, "d_model": 64, "lr": 2e-3, "augment": 3,
              "max_minutes": 11.0}

ABLATION_AXES = {
    "K": ("k", [1, 2, 3, 4, 5, 6]),
    "M": ("num_steps", [1, 2, 5, 10, 25]),
    "mode": ("mode", ["direct", "initial", "residual"]),
    "refine": ("joint", [False, True]),
}


def load_config(arg: str | None, desk_scale: bool, seed: int) -> dm.TrainConfig:
    """Merge the desk preset (if any), a JSON file or inline JSON, and the seed."""
    doc = dict(DESK_SCALE) if desk_scale else {}
    if arg:
        inline = arg.lstrip()[:1] in ("{", "[")
        try:
            user = json.loads(arg if inline else Path(arg).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config holds invalid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"--config is neither inline JSON nor a readable file: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("--config must hold a JSON object")
        doc.update(user)
    doc["seed"] = seed
    return dm.TrainConfig.from_dict(doc)


def _handle(args, config: dm.TrainConfig) -> PredictorHandle:
    kind = PredictorKind(args.model)
    params = {"config": config} if kind is PredictorKind.SINGULAR_TRAJECTORY else {"seed": args.seed, "k": config.k}
    return PredictorHandle(kind, params)


def _manifest(args, out: Path, config: dm.TrainConfig, **extra) -> Path:
    return report.write_manifest(out / "manifest.json", seed=args.seed, config=config.to_dict(),
                                 deviations=config.deviations(), command=" ".join(sys.argv[1:]) or args.verb,
                                 extra=extra)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _single_scene(args) -> str:
    if not args.scene:
        raise ConfigError(f"{args.verb} needs --scene (a scene name, letter, or A2B pair)")
    return args.scene


# --- verbs ------------------------------------------------------------------

def cmd_synth(args) -> int:
    params = synthetic.SceneParams(num_agents=args.agents)
    reg = synthetic.write_corpus(_out_dir(args), seed=args.seed, params=params)
    print(reg)
    return 0


def cmd_build_space(args) -> int:
    config = load_config(args.config, args.desk_scale, args.seed)
    spec = TaskSpec.for_task(args.task, _single_scene(args))
    corpus = Corpus.from_registry(args.registry)
    scenes = corpus.windows(spec, spec.train_scenes + spec.test_scenes)
    train, _ = make_split(spec, scenes, args.seed)
    space = fit_svd(build_gists([w.full for w in train], T_WIN, config.k), config.k)
    out = _out_dir(args)
    path = out / f"space_{spec.task.value}_{spec.label}.json"
    space.save(path)
    _manifest(args, out, config, artifact=str(path), gists=len(train))
    print(path)
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.desk_scale, args.seed)
    out = _out_dir(args)
    spec = TaskSpec.for_task(args.task, _single_scene(args))
    corpus = Corpus.from_registry(args.registry)
    names = spec.train_scenes + spec.test_scenes
    train, _ = make_split(spec, corpus.windows(spec, names), args.seed)
    t0 = time.monotonic()
    model = SingularTrajectory(spec, config).fit(train, corpus.fields(names))
    ckpt = Path(args.checkpoint) if args.checkpoint else checkpoint_path(out / "checkpoints", spec)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt)
    _manifest(args, out, config, checkpoint=str(ckpt), train_windows=len(train),
              train_seconds=round(time.monotonic() - t0, 1), final_loss=model.loss_history[-1])
    print(ckpt)
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config, args.desk_scale, args.seed)
    out = _out_dir(args)
    handle = _handle(args, config)
    corpus = Corpus.from_registry(args.registry)
    plots = out / "plots"
    plots.mkdir(exist_ok=True)

    def on_split(spec, result, test, pred):
        tmap = None
        entry = corpus.entries[spec.test_scenes[0]]
        if entry.map is not None:
            from ..adaptive_anchor import load_map
            tmap = load_map(entry.map, entry.homography)
        report.plot_predictions(plots / f"{spec.task.value}_{spec.label}.png", test, pred, tmap,
                                title=f"{spec.label}: ADE {result.ade:.2f} FDE {result.fde:.2f}")

    eval_only = args.checkpoint is not None
    ckpt_dir = Path(args.checkpoint) if eval_only else out / "checkpoints"
    scenes = [args.scene] if args.scene else None
    if scenes and Task(args.task) is Task.DOMAIN_ADAPTATION:
        scenes = [args.scene[0]]
    results = run_protocol(args.task, handle, corpus, scenes=scenes, seed=args.seed,
                           checkpoint_dir=ckpt_dir if handle.kind is PredictorKind.SINGULAR_TRAJECTORY else None,
                           eval_only=eval_only, on_split=on_split)
    paths = report.write_report(results, out, stem=f"results_{Task(args.task).value}")
    report.plot_summary(out / f"summary_{Task(args.task).value}.png", results)
    _manifest(args, out, config, model=handle.kind.value, results=[str(p) for p in paths])
    print(report.markdown_table(results))
    return 0


def cmd_predict(args) -> int:
    config = load_config(args.config, args.desk_scale, args.seed)
    if not args.checkpoint:
        raise ConfigError("predict needs --checkpoint")
    out = _out_dir(args)
    spec = TaskSpec.for_task(args.task, _single_scene(args))
    corpus = Corpus.from_registry(args.registry)
    names = spec.train_scenes + spec.test_scenes
    _, test = make_split(spec, corpus.windows(spec, names), args.seed)
    model = SingularTrajectory.load(args.checkpoint, spec)
    pred = model.predict(test, corpus.fields(names), seed=args.seed)
    path = out / f"predictions_{spec.task.value}_{spec.label}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "ped_id", "start_frame", "sample", "step", "x", "y"])
        for w, p in zip(test, pred):
            for s in range(p.shape[0]):
                for t in range(p.shape[1]):
                    writer.writerow([w.scene_id, w.ped_id, w.start_frame, s, t + 1,
                                     f"{p[s, t, 0]:.4f}", f"{p[s, t, 1]:.4f}"])
    _manifest(args, out, config, checkpoint=str(args.checkpoint), predictions=str(path), windows=len(test))
    print(path)
    return 0


def cmd_report(args) -> int:
    if not args.results:
        raise ConfigError("report needs at least one --results CSV")
    rows = [r for p in args.results for r in report.read_csv(p)]
    out = _out_dir(args)
    paths = report.write_report(rows, out, formats=args.format, stem="report")
    report.plot_summary(out / "report_summary.png", rows)
    for p in paths:
        print(p)
    return 0


def run_ablation(axis: str, values, base: dm.TrainConfig, task, scene: str, registry, seed: int = 0,
                 model_kind=PredictorKind.SINGULAR_TRAJECTORY):
    """Train and evaluate one split per setting; returns ``[(label, EvalResult)]``."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    field_name, _ = ABLATION_AXES[axis]
    corpus = registry if isinstance(registry, Corpus) else Corpus.from_registry(registry)
    spec = TaskSpec.for_task(task, scene)
    rows = []
    for v in values:
        cfg = dm.TrainConfig.from_dict({**base.to_dict(), field_name: v})
        label = f"{axis}={'joint' if v is True else 'independent' if v is False else v}"
        result, _, _ = run_split(spec, PredictorHandle(model_kind, {"config": cfg}), corpus, seed)
        log.info("ablation %s: ADE %.4f FDE %.4f", label, result.ade, result.fde)
        rows.append((label, result))
    return rows


def _parse_value(axis: str, text: str):
    if axis == "refine":
        return text.lower() in ("joint", "true", "1")
    return text if axis == "mode" else int(text)


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.desk_scale, args.seed)
    out = _out_dir(args)
    scene = args.scene or "ZARA1"
    axes = args.axis or ["K", "M"]
    sections = []
    all_rows = []
    for axis in axes:
        _, default_values = ABLATION_AXES.get(axis, (None, None))
        if default_values is None:
            raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
        values = [_parse_value(axis, v) for v in args.values.split(",")] if args.values and len(axes) == 1 \
            else default_values
        rows = run_ablation(axis, values, config, args.task, scene, args.registry, args.seed)
        all_rows += [EvalResult(**{**r.to_dict(), "model": label}) for label, r in rows]
        sections.append(f"### Ablation over {axis}\n\n" + report.ablation_table(rows, axis))
    (out / "ablation.md").write_text("\n".join(sections))
    report.write_csv(all_rows, out / "ablation.csv")
    _manifest(args, out, config, axes=axes, scene=scene)
    print("\n".join(sections))
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="singular-trajectory",
                                     description="Singular-space trajectory prediction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, task=True, data=True):
        if data:
            p.add_argument("--registry", required=True, help="scene registry JSON")
        if task:
            p.add_argument("--task", default=Task.STOCHASTIC.value, choices=[t.value for t in Task])
            p.add_argument("--scene", help="test scene (name or letter A-E) or an A2B pair")
        p.add_argument("--config", help="JSON file (or inline JSON) with training options")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--checkpoint", help="checkpoint file (train/predict) or directory (evaluate)")
        p.add_argument("--out-dir", default="runs")
        p.add_argument("--desk-scale", action="store_true", help="reduced single-CPU training preset")

    p = sub.add_parser("synth", help="write a synthetic corpus with maps and a registry")
    p.add_argument("--out-dir", default="synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--agents", type=int, default=synthetic.SceneParams.num_agents)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-space", help="fit the Singular space on a training split and save it")
    common(p)
    p.set_defaults(func=cmd_build_space)

    p = sub.add_parser("train", help="train the diffusion predictor on one split")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run a benchmark protocol and write tables and plots")
    common(p)
    p.add_argument("--model", default=PredictorKind.SINGULAR_TRAJECTORY.value,
                   choices=[k.value for k in PredictorKind])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="sample futures for the test windows of one split")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="merge result CSVs into tables and a summary plot")
    p.add_argument("--results", nargs="+", help="result CSV files")
    p.add_argument("--format", nargs="+", default=list(report.FORMATS), help="csv, md, json")
    p.add_argument("--out-dir", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="sweep K, M, denoising mode or refinement on one split")
    common(p)
    p.add_argument("--axis", nargs="+", choices=sorted(ABLATION_AXES), help="default: K and M")
    p.add_argument("--values", help="comma-separated values (single axis only)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SingularTrajectoryError, ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
