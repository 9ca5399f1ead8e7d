"""Synthetic ETH/UCY-style corpus with a known ground truth.

Each scene is a square plaza with one rectangular obstacle.  Agents walk at
constant velocity or make a single turn, and never enter the obstacle.  The
output is a directory of scene files, PGM maps and a registry JSON, the same
layout a real dataset uses.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..adaptive_anchor import TraversabilityMap, save_map_pgm
from ..dataset import SCENES, RawRecord, SceneEntry, save_registry, write_scene


@dataclass(frozen=True)
class SceneParams:
    size: float = 24.0            # plaza side, meters
    resolution: float = 0.1       # meters per pixel
    num_agents: int = 120
    num_frames: int = 260
    min_len: int = 20
    max_len: int = 36
    speed: tuple = (0.35, 0.6)    # meters per 0.4 s step
    turn_fraction: float = 0.5
    turn_deg: tuple = (45.0, 90.0)
    noise: float = 0.02
    margin: float = 0.3


def _obstacle(rng: np.random.Generator, p: SceneParams):
    w, h = rng.uniform(4.0, 7.0, size=2)
    cx, cy = p.size / 2 + rng.uniform(-2, 2, size=2)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def _blocked(pts: np.ndarray, box: np.ndarray, margin: float) -> np.ndarray:
    x, y = pts[..., 0], pts[..., 1]
    return ((x > box[0] - margin) & (x < box[2] + margin)
            & (y > box[1] - margin) & (y < box[3] + margin))


def _path(rng, p: SceneParams, length: int, turning: bool) -> np.ndarray:
    start = rng.uniform(1.0, p.size - 1.0, size=2)
    heading = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(*p.speed)
    headings = np.full(length - 1, heading)
    if turning:
        at = rng.integers(2, length - 2)
        turn = np.deg2rad(rng.uniform(*p.turn_deg)) * rng.choice([-1.0, 1.0])
        # spread the turn over three steps
        ramp = np.clip((np.arange(length - 1) - at + 1) / 3.0, 0.0, 1.0)
        headings = heading + turn * ramp
    steps = speed * np.stack([np.cos(headings), np.sin(headings)], axis=1)
    return np.concatenate([start[None], start + np.cumsum(steps, axis=0)])


def make_scene(seed: int, params: SceneParams = SceneParams()):
    """Return ``(records, TraversabilityMap, obstacle box)`` for one scene."""
    rng = np.random.default_rng(seed)
    p = params
    box = _obstacle(rng, p)
    records = []
    ped = 0
    attempts = 0
    while ped < p.num_agents and attempts < 200 * p.num_agents:
        attempts += 1
        length = int(rng.integers(p.min_len, p.max_len + 1))
        turning = rng.random() < p.turn_fraction
        path = _path(rng, p, length, turning)
        if (path < 0.5).any() or (path > p.size - 0.5).any() or _blocked(path, box, p.margin).any():
            continue
        path = path + rng.normal(0.0, p.noise, size=path.shape)
        start = int(rng.integers(0, p.num_frames - length))
        ped += 1
        records.extend(RawRecord(start + t, ped, float(x), float(y)) for t, (x, y) in enumerate(path))
    n = int(round(p.size / p.resolution))
    rows, cols = np.indices((n, n))
    centres = np.stack([cols * p.resolution, rows * p.resolution], axis=-1)
    grid = ~_blocked(centres, box, 0.0)
    H = np.diag([1.0 / p.resolution, 1.0 / p.resolution, 1.0])
    return records, TraversabilityMap(grid, H), box


def write_corpus(out_dir, seed: int = 0, params: SceneParams = SceneParams(), scenes=SCENES) -> Path:
    """Write all scenes and a ``registry.json``; returns the registry path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, name in enumerate(scenes):
        records, tmap, _ = make_scene(seed * 1000 + i, params)
        traj = out / f"{name.lower()}.txt"
        mp = out / f"{name.lower()}.pgm"
        write_scene(traj, records)
        save_map_pgm(mp, tmap)
        entries[name] = SceneEntry(name, traj, mp, tmap.world_to_pixel)
    reg = out / "registry.json"
    save_registry(reg, entries)
    return reg
