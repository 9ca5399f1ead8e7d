"""ETH/UCY-format ingestion, sliding windows and task protocol splits.

Scene files hold one observation per line, ``frame ped x y`` separated by
whitespace, with positions in world meters.  Frame ids are normalised by the
file's frame stride so consecutive observations (0.4 s apart) have
consecutive ids.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

SCENES = ("ETH", "HOTEL", "UNIV", "ZARA1", "ZARA2")
SCENE_LETTERS = dict(zip("ABCDE", SCENES))
LETTER_OF = {name: letter for letter, name in SCENE_LETTERS.items()}

T_FUT = 12
T_HIST = 8
T_HIST_MOMENTARY = 2


class Task(str, Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC = "deterministic"
    MOMENTARY = "momentary"
    DOMAIN_ADAPTATION = "domain_adaptation"
    FEW_SHOT = "few_shot"


@dataclass(frozen=True)
class RawRecord:
    frame_id: int
    ped_id: int
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class TrajectoryWindow:
    """One agent's contiguous ``t_hist + t_fut`` frame span.

    ``hist`` and ``fut`` are ``(T, 2)`` arrays in world meters.  Neighbor
    windows cover the same frames and carry no neighbors of their own.
    """

    ped_id: int
    scene_id: str
    start_frame: int
    hist: np.ndarray
    fut: np.ndarray
    neighbors: tuple["TrajectoryWindow", ...] = ()

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.hist, self.fut], axis=0)

    @property
    def last_obs(self) -> np.ndarray:
        return self.hist[-1]

    @property
    def frames(self) -> range:
        return range(self.start_frame, self.start_frame + len(self.hist) + len(self.fut))

    def key(self) -> tuple:
        return (self.scene_id, self.start_frame, self.ped_id)


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    t_hist: int
    t_fut: int
    num_samples: int
    train_scenes: tuple[str, ...]
    test_scenes: tuple[str, ...]
    train_fraction: float = 1.0

    def __post_init__(self):
        task = Task(self.task)
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "train_scenes", tuple(self.train_scenes))
        object.__setattr__(self, "test_scenes", tuple(self.test_scenes))
        expected_s = 1 if task in (Task.DETERMINISTIC, Task.DOMAIN_ADAPTATION) else 20
        expected_hist = T_HIST_MOMENTARY if task is Task.MOMENTARY else T_HIST
        expected_frac = 0.1 if task is Task.FEW_SHOT else 1.0
        if self.num_samples != expected_s:
            raise ConfigError(f"{task.value} requires S={expected_s}, got {self.num_samples}")
        if self.t_hist != expected_hist:
            raise ConfigError(f"{task.value} requires T_hist={expected_hist}, got {self.t_hist}")
        if self.t_fut != T_FUT:
            raise ConfigError(f"T_fut must be {T_FUT}, got {self.t_fut}")
        if not math.isclose(self.train_fraction, expected_frac):
            raise ConfigError(f"{task.value} requires train_fraction={expected_frac}")
        for name in self.train_scenes + self.test_scenes:
            if name not in SCENES:
                raise ConfigError(f"unknown scene {name!r}; expected one of {SCENES}")
        if not self.train_scenes or not self.test_scenes:
            raise ConfigError("train and test scene lists must be non-empty")
        if set(self.train_scenes) & set(self.test_scenes):
            raise ConfigError("train and test scenes overlap")

    @classmethod
    def for_task(cls, task, scene: str) -> "TaskSpec":
        """Build the canonical spec for ``task``.

        ``scene`` is the held-out test scene, or an ``"A2B"`` style pair for
        domain adaptation.
        """
        task = Task(task)
        if task is Task.DOMAIN_ADAPTATION:
            src, tgt = parse_pair(scene)
            train, test = (src,), (tgt,)
        else:
            test_scene = _scene_name(scene)
            train = tuple(s for s in SCENES if s != test_scene)
            test = (test_scene,)
        return cls(
            task=task,
            t_hist=T_HIST_MOMENTARY if task is Task.MOMENTARY else T_HIST,
            t_fut=T_FUT,
            num_samples=1 if task in (Task.DETERMINISTIC, Task.DOMAIN_ADAPTATION) else 20,
            train_scenes=train,
            test_scenes=test,
            train_fraction=0.1 if task is Task.FEW_SHOT else 1.0,
        )

    @property
    def window_len(self) -> int:
        return self.t_hist + self.t_fut

    @property
    def label(self) -> str:
        if self.task is Task.DOMAIN_ADAPTATION:
            return pair_label(self.train_scenes[0], self.test_scenes[0])
        return "+".join(self.test_scenes)


def _scene_name(name: str) -> str:
    key = name.strip().upper()
    if key in SCENE_LETTERS:
        return SCENE_LETTERS[key]
    if key not in SCENES:
        raise ConfigError(f"unknown scene {name!r}; expected one of {SCENES}")
    return key


def parse_pair(label: str) -> tuple[str, str]:
    parts = label.upper().split("2")
    if len(parts) != 2:
        raise ConfigError(f"bad domain-adaptation pair {label!r}, expected e.g. 'A2B'")
    src, tgt = _scene_name(parts[0]), _scene_name(parts[1])
    if src == tgt:
        raise ConfigError(f"domain-adaptation pair {label!r} trains and tests on one scene")
    return src, tgt


def pair_label(src: str, tgt: str) -> str:
    return f"{LETTER_OF[src]}2{LETTER_OF[tgt]}"


def domain_adaptation_pairs() -> list[tuple[str, str]]:
    """All ordered (train, test) scene pairs with train != test."""
    return [(a, b) for a in SCENES for b in SCENES if a != b]


def parse_scene(path, scene_id: str | None = None) -> list[RawRecord]:
    """Read one scene file into records sorted by ``(ped_id, frame_id)``."""
    path = Path(path)
    raw = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise ParseError(f"expected 4 fields, got {len(fields)}", path, lineno)
            try:
                frame, ped, x, y = (float(v) for v in fields)
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", path, lineno) from None
            if not (frame.is_integer() and ped.is_integer()):
                raise ParseError("frame and ped ids must be integral", path, lineno)
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError("non-finite coordinate", path, lineno)
            raw.append((int(frame), int(ped), x, y, lineno))
    return _normalise(raw, path)


def _normalise(raw, path) -> list[RawRecord]:
    if not raw:
        return []
    last_frame: dict[int, int] = {}
    for frame, ped, _, _, lineno in raw:
        prev = last_frame.get(ped)
        if prev is not None and frame <= prev:
            raise DataError(f"{path}:{lineno}: frames for ped {ped} not strictly increasing "
                            f"({prev} then {frame})")
        last_frame[ped] = frame
    base = min(r[0] for r in raw)
    stride = 0
    for r in raw:
        stride = math.gcd(stride, r[0] - base)
    stride = stride or 1
    records = [RawRecord((f - base) // stride, p, x, y) for f, p, x, y, _ in raw]
    records.sort(key=lambda r: (r.ped_id, r.frame_id))
    return records


def _tracks(records: Iterable[RawRecord]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    by_ped: dict[int, list[RawRecord]] = {}
    for r in records:
        by_ped.setdefault(r.ped_id, []).append(r)
    tracks = {}
    for ped, recs in sorted(by_ped.items()):
        recs.sort(key=lambda r: r.frame_id)
        frames = np.array([r.frame_id for r in recs], dtype=np.int64)
        xy = np.array([[r.x, r.y] for r in recs], dtype=float).reshape(-1, 2)
        tracks[ped] = (frames, xy)
    return tracks


def contiguous_runs(frames: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges ``[lo, hi)`` of gap-free frame runs."""
    if len(frames) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frames) != 1) + 1
    edges = np.concatenate([[0], breaks, [len(frames)]])
    return [(int(edges[i]), int(edges[i + 1])) for i in range(len(edges) - 1)]


def full_tracks(records: Iterable[RawRecord]) -> list[np.ndarray]:
    """Every gap-free track segment as a ``(T, 2)`` array."""
    out = []
    for frames, xy in _tracks(records).values():
        for lo, hi in contiguous_runs(frames):
            out.append(xy[lo:hi])
    return out


def make_windows(records: Sequence[RawRecord], spec: TaskSpec, scene_id: str = "") -> list[TrajectoryWindow]:
    """Cut every agent's contiguous runs into stride-1 windows."""
    length = spec.window_len
    tracks = _tracks(records)
    # (ped, start_frame) -> index into that ped's arrays, for windows that fit
    spans: dict[tuple[int, int], int] = {}
    for ped, (frames, _) in tracks.items():
        for lo, hi in contiguous_runs(frames):
            for i in range(lo, hi - length + 1):
                spans[(ped, int(frames[i]))] = i
    by_start: dict[int, list[int]] = {}
    for ped, start in spans:
        by_start.setdefault(start, []).append(ped)

    def bare(ped, start):
        i = spans[(ped, start)]
        xy = tracks[ped][1]
        return TrajectoryWindow(ped, scene_id, start, xy[i:i + spec.t_hist],
                                xy[i + spec.t_hist:i + length])

    windows = []
    for (ped, start) in sorted(spans):
        others = [p for p in sorted(by_start[start]) if p != ped]
        base = bare(ped, start)
        neighbors = tuple(bare(p, start) for p in others)
        windows.append(TrajectoryWindow(ped, scene_id, start, base.hist, base.fut, neighbors))
    return windows


def subsample(windows: Sequence, fraction: float, seed: int = 0) -> list:
    """Seeded uniform selection of ``floor(fraction * n)`` items, order kept."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"train_fraction must be in (0, 1], got {fraction}")
    n = len(windows)
    if fraction == 1:
        return list(windows)
    keep = math.floor(Fraction(str(fraction)) * n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return [windows[i] for i in idx]


def make_split(spec: TaskSpec, all_scenes: Mapping[str, Sequence], seed: int = 0):
    """Return ``(train, test)`` item lists for the task protocol."""
    for name in spec.train_scenes + spec.test_scenes:
        if name not in all_scenes:
            raise ConfigError(f"scene {name!r} not available (have {sorted(all_scenes)})")
    train = [w for name in spec.train_scenes for w in all_scenes[name]]
    test = [w for name in spec.test_scenes for w in all_scenes[name]]
    if spec.train_fraction < 1:
        train = subsample(train, spec.train_fraction, seed)
    return train, test


@dataclass(frozen=True)
class SceneEntry:
    name: str
    trajectory: Path
    map: Path | None = None
    homography: np.ndarray = field(default_factory=lambda: np.eye(3))


def load_registry(path) -> dict[str, SceneEntry]:
    """Load a scene registry JSON.

    Layout::

        {"scenes": {"ETH": {"trajectory": "eth.txt", "map": "eth.pgm",
                            "homography": [9 numbers, row-major world->pixel]}}}

    Relative paths resolve against the registry's directory.
    """
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    scenes = doc.get("scenes", doc)
    root = path.parent
    out = {}
    for name, entry in scenes.items():
        if "trajectory" not in entry:
            raise ConfigError(f"scene {name!r} has no trajectory file")
        traj = root / entry["trajectory"]
        mp = root / entry["map"] if entry.get("map") else None
        hom = entry.get("homography")
        if hom is None:
            H = np.eye(3)
        else:
            H = np.asarray(hom, dtype=float)
            if H.size != 9:
                raise ConfigError(f"scene {name!r}: homography needs 9 numbers, got {H.size}")
            H = H.reshape(3, 3)
        out[name] = SceneEntry(name, traj, mp, H)
    return out


def save_registry(path, entries: Mapping[str, SceneEntry]) -> None:
    """Write a registry; file paths are stored relative to its directory."""
    path = Path(path)
    root = path.parent.resolve()

    def rel(p):
        return Path(os.path.relpath(Path(p).resolve(), root)).as_posix()

    doc = {"scenes": {}}
    for name, e in entries.items():
        doc["scenes"][name] = {
            "trajectory": rel(e.trajectory),
            "map": None if e.map is None else rel(e.map),
            "homography": np.asarray(e.homography, dtype=float).ravel().tolist(),
        }
    path.write_text(json.dumps(doc, indent=2))


def write_scene(path, records: Iterable[RawRecord], frame_stride: int = 10) -> None:
    """Write records in the tab-separated ETH/UCY layout, sorted by frame."""
    rows = sorted(records, key=lambda r: (r.frame_id, r.ped_id))
    with open(path, "w") as fh:
        for r in rows:
            fh.write(f"{r.frame_id * frame_stride:.1f}\t{r.ped_id:.1f}\t{r.x:.4f}\t{r.y:.4f}\n")
