"""Benchmark protocols: splits, training per split, evaluation and averages."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from ..adaptive_anchor import VectorField, build_vector_field, load_map
from ..dataset import (SCENES, LETTER_OF, SceneEntry, Task, TaskSpec, domain_adaptation_pairs,
                       load_registry, make_split, make_windows, pair_label, parse_scene)
from ..errors import CheckpointError, ConfigError
from .metrics import ade_fde
from .predictors import PredictorHandle, PredictorKind, SingularTrajectory

log = logging.getLogger(__name__)

AVG = "AVG"


@dataclass(frozen=True)
class EvalResult:
    task: str
    scene: str            # scene name, "A2B" pair, "A2*" source average or "AVG"
    ade: float
    fde: float
    num_samples: int
    count: int            # evaluated windows (summed for average rows)
    config_hash: str
    model: str = PredictorKind.SINGULAR_TRAJECTORY.value

    def __post_init__(self):
        if not (self.ade >= 0 and self.fde >= 0):
            raise ValueError(f"negative or NaN error in {self}")

    @property
    def is_average(self) -> bool:
        return self.scene == AVG or self.scene.endswith("*")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EvalResult":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


def average(results: Iterable[EvalResult], scene: str = AVG) -> EvalResult:
    """Unweighted mean over rows, the way benchmark tables average scenes."""
    rows = list(results)
    if not rows:
        raise ValueError("cannot average an empty result list")
    first = rows[0]
    return EvalResult(first.task, scene, float(np.mean([r.ade for r in rows])),
                      float(np.mean([r.fde for r in rows])), first.num_samples,
                      sum(r.count for r in rows), first.config_hash, first.model)


class Corpus:
    """Scene registry with cached windows (per window length) and vector fields."""

    def __init__(self, entries: Mapping[str, SceneEntry]):
        self.entries = dict(entries)
        self._records: dict[str, list] = {}
        self._windows: dict[tuple, list] = {}
        self._fields: dict[str, VectorField | None] = {}

    @classmethod
    def from_registry(cls, path) -> "Corpus":
        return cls(load_registry(path))

    def records(self, name: str):
        if name not in self.entries:
            raise ConfigError(f"scene {name!r} missing from registry (have {sorted(self.entries)})")
        if name not in self._records:
            self._records[name] = parse_scene(self.entries[name].trajectory, name)
        return self._records[name]

    def windows(self, spec: TaskSpec, names: Iterable[str]) -> dict[str, list]:
        out = {}
        for name in names:
            key = (name, spec.t_hist, spec.t_fut)
            if key not in self._windows:
                self._windows[key] = make_windows(self.records(name), spec, name)
            out[name] = self._windows[key]
        return out

    def field(self, name: str) -> VectorField | None:
        if name not in self._fields:
            entry = self.entries[name]
            self._fields[name] = (None if entry.map is None
                                  else build_vector_field(load_map(entry.map, entry.homography)))
        return self._fields[name]

    def fields(self, names: Iterable[str]) -> dict[str, VectorField | None]:
        return {n: self.field(n) for n in names}


def checkpoint_path(checkpoint_dir, spec: TaskSpec) -> Path:
    return Path(checkpoint_dir) / f"{spec.task.value}_{spec.label}.pt"


def run_split(spec: TaskSpec, handle: PredictorHandle, corpus: Corpus, seed: int = 0,
              checkpoint_dir=None, eval_only: bool = False):
    """Train (or load) and evaluate one split.

    Returns ``(EvalResult, test windows, predictions)``.
    """
    names = spec.train_scenes + spec.test_scenes
    scenes = corpus.windows(spec, names)
    fields = corpus.fields(names)
    train, test = make_split(spec, scenes, seed)
    if not test:
        raise ConfigError(f"{spec.label}: no test windows of length {spec.window_len}")
    ckpt = checkpoint_path(checkpoint_dir, spec) if checkpoint_dir is not None else None
    if handle.kind is PredictorKind.SINGULAR_TRAJECTORY and ckpt is not None and (eval_only or ckpt.exists()):
        if not ckpt.exists():
            raise CheckpointError(f"eval-only run needs checkpoint {ckpt}")
        log.info("%s %s: loading %s", spec.task.value, spec.label, ckpt)
        model = SingularTrajectory.load(ckpt, spec)
    else:
        if eval_only and handle.kind is PredictorKind.SINGULAR_TRAJECTORY:
            raise CheckpointError("eval-only run needs --checkpoint")
        log.info("%s %s: fitting on %d windows", spec.task.value, spec.label, len(train))
        model = handle.build(spec).fit(train, fields)
        if ckpt is not None and isinstance(model, SingularTrajectory):
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            model.save(ckpt)
    pred = model.predict(test, fields, seed=seed)
    gt = np.stack([w.fut for w in test])
    ade, fde = ade_fde(pred, gt)
    result = EvalResult(spec.task.value, spec.label, ade, fde, spec.num_samples, len(test),
                        handle.config_hash(), handle.kind.value)
    return result, test, pred


def protocol_specs(task, scenes: Iterable[str] | None = None) -> list[TaskSpec]:
    """Every split of ``task``; ``scenes`` restricts test scenes (or pair sources)."""
    task = Task(task)
    wanted = None if scenes is None else {TaskSpec.for_task(Task.STOCHASTIC, s).test_scenes[0] for s in scenes}
    if task is Task.DOMAIN_ADAPTATION:
        return [TaskSpec.for_task(task, pair_label(a, b)) for a, b in domain_adaptation_pairs()
                if wanted is None or a in wanted]
    return [TaskSpec.for_task(task, s) for s in SCENES if wanted is None or s in wanted]


def with_averages(task, results: list[EvalResult]) -> list[EvalResult]:
    """Append the table's average rows.

    Domain adaptation gets one ``X2*`` row per source scene (placed after its
    four pairs) and a global ``AVG`` over all pairs; other tasks get ``AVG``.
    """
    task = Task(task)
    if task is not Task.DOMAIN_ADAPTATION:
        return results + [average(results)]
    out = []
    for src in SCENES:
        letter = LETTER_OF[src]
        group = [r for r in results if r.scene.startswith(f"{letter}2")]
        if group:
            out.extend(group)
            out.append(average(group, f"{letter}2*"))
    return out + [average(results)]


def run_protocol(task, handle: PredictorHandle, registry, scenes: Iterable[str] | None = None,
                 seed: int = 0, checkpoint_dir=None, eval_only: bool = False,
                 on_split: Callable | None = None) -> list[EvalResult]:
    """Run all splits of ``task`` and return per-split rows plus averages.

    ``registry`` is a path or a ``Corpus``.  ``on_split(spec, result, test,
    pred)`` is called after each split (used for plots).
    """
    corpus = registry if isinstance(registry, Corpus) else Corpus.from_registry(registry)
    results = []
    for spec in protocol_specs(task, scenes):
        result, test, pred = run_split(spec, handle, corpus, seed, checkpoint_dir, eval_only)
        log.info("%s %s: ADE %.4f FDE %.4f (%d windows)", spec.task.value, spec.label,
                 result.ade, result.fde, result.count)
        results.append(result)
        if on_split is not None:
            on_split(spec, result, test, pred)
    return with_averages(task, results)
