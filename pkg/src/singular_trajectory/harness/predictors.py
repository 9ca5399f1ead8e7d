"""Predictor plugins: the diffusion model and two sanity baselines.

Every predictor maps a list of windows to ``(N, S, T_fut, 2)`` world
coordinates.  ``fields`` maps scene name to a ``VectorField`` (or None when a
scene has no map).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import torch

from .. import diffusion as dm
from ..adaptive_anchor import AnchorSet, VectorField, adapt_batch, cluster_prototypes
from ..dataset import TaskSpec, TrajectoryWindow
from ..errors import ConfigError
from ..singular_space import (DEFAULT_K, T_WIN, SingularSpace, build_gists, fit_svd, flatten,
                              from_ego, project, reconstruct, to_ego, unflatten)

log = logging.getLogger(__name__)


class PredictorKind(str, Enum):
    SINGULAR_TRAJECTORY = "singular_trajectory"
    CONSTANT_VELOCITY = "constant_velocity"
    NEAREST_ANCHOR = "nearest_anchor"


def constant_velocity_baseline(histories, t_fut: int = 12, num_samples: int = 1) -> np.ndarray:
    """Extrapolate the last observed step; ``(N, T_hist, 2)`` -> ``(N, S, T_fut, 2)``."""
    h = np.asarray(histories, dtype=float)
    if h.ndim != 3 or h.shape[1] < 2:
        raise ValueError(f"histories must be (N, T_hist>=2, 2), got {h.shape}")
    v = h[:, -1] - h[:, -2]
    steps = np.arange(1, t_fut + 1, dtype=float)
    fut = h[:, -1, None, :] + steps[None, :, None] * v[:, None, :]
    return np.repeat(fut[:, None], num_samples, axis=1)


def _stack(windows, attr):
    return np.stack([getattr(w, attr) for w in windows])


def ego_coords(windows: Sequence[TrajectoryWindow], space: SingularSpace):
    """Singular-space history and future coordinates plus last observations."""
    hist = _stack(windows, "hist")
    fut = _stack(windows, "fut")
    origin = hist[:, -1]
    hx = project(flatten(to_ego(hist, origin)), space, hist.shape[1])
    fy = project(flatten(to_ego(fut, origin)), space, fut.shape[1])
    return hx, fy, origin


def adapt_per_scene(prototypes: np.ndarray, windows, fields: Mapping[str, VectorField | None],
                    space: SingularSpace, t_fut: int) -> np.ndarray:
    """Adapted anchors ``(N, S, K)`` for each window in its own scene map."""
    origin = np.stack([w.hist[-1] for w in windows])
    out = np.broadcast_to(prototypes, (len(windows),) + prototypes.shape).copy()
    scenes = np.array([w.scene_id for w in windows])
    for name in np.unique(scenes):
        vf = fields.get(name) if fields else None
        if vf is None:
            continue
        idx = np.flatnonzero(scenes == name)
        out[idx], _, _ = adapt_batch(prototypes, vf, space, origin[idx], t_fut)
    return out


def rotated_copies(windows: Sequence[TrajectoryWindow], fields, copies: int, seed: int = 0):
    """Training augmentation: each scene group rotated about every agent's last observation.

    One random angle per (copy, scene group) keeps the agents of a group
    mutually consistent.  Copies get a scene id ``"<scene>@<copy>"`` aliased to
    the original vector field, so anchors are still adapted on the real map.
    """
    rng = np.random.default_rng(seed)
    out = []
    aliased = dict(fields or {})
    for c in range(1, copies + 1):
        for idx in scene_groups(windows):
            theta = rng.uniform(0.0, 2 * np.pi)
            R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            for i in idx:
                w = windows[i]
                o = w.hist[-1]
                sid = f"{w.scene_id}@{c}"
                aliased.setdefault(sid, (fields or {}).get(w.scene_id))
                out.append(TrajectoryWindow(w.ped_id, sid, w.start_frame,
                                            (w.hist - o) @ R.T + o, (w.fut - o) @ R.T + o))
    return out, aliased


def scene_groups(windows: Sequence[TrajectoryWindow]) -> list[np.ndarray]:
    """Indices of windows sharing a scene and frame span (mutual neighbours)."""
    keys: dict = {}
    for i, w in enumerate(windows):
        keys.setdefault((w.scene_id, w.start_frame), []).append(i)
    return [np.array(v) for _, v in sorted(keys.items())]


class ConstantVelocity:
    kind = PredictorKind.CONSTANT_VELOCITY

    def __init__(self, spec: TaskSpec, **_):
        self.spec = spec

    def fit(self, windows, fields=None):
        return self

    def predict(self, windows, fields=None, seed: int = 0) -> np.ndarray:
        return constant_velocity_baseline(_stack(windows, "hist"), self.spec.t_fut, self.spec.num_samples)


class _SpaceMixin:
    space: SingularSpace
    anchors: AnchorSet

    def _fit_space(self, windows, k: int, num_anchors: int, seed: int):
        gists = build_gists([w.full for w in windows], T_WIN, k)
        self.space = fit_svd(gists, k)
        _, fy, _ = ego_coords(windows, self.space)
        self.anchors = cluster_prototypes(fy, num_anchors, seed)
        return fy


class NearestAnchor(_SpaceMixin):
    """Adapted prototypes ranked by closeness to the constant-velocity future."""

    kind = PredictorKind.NEAREST_ANCHOR

    def __init__(self, spec: TaskSpec, k: int = DEFAULT_K, num_anchors: int = 20, seed: int = 0, **_):
        self.spec, self.k, self.num_anchors, self.seed = spec, k, max(num_anchors, spec.num_samples), seed

    def fit(self, windows, fields=None):
        self._fit_space(windows, self.k, self.num_anchors, self.seed)
        return self

    def predict(self, windows, fields=None, seed: int = 0) -> np.ndarray:
        hist = _stack(windows, "hist")
        origin = hist[:, -1]
        adapted = adapt_per_scene(self.anchors.prototypes, windows, fields, self.space, self.spec.t_fut)
        cv = constant_velocity_baseline(hist, self.spec.t_fut, 1)[:, 0]
        cv_coord = project(flatten(to_ego(cv, origin)), self.space, self.spec.t_fut)
        order = np.argsort(np.linalg.norm(adapted - cv_coord[:, None], axis=-1), axis=1, kind="stable")
        chosen = np.take_along_axis(adapted, order[:, :self.spec.num_samples, None], axis=1)
        paths = unflatten(reconstruct(chosen, self.space, self.spec.t_fut))
        return paths + origin[:, None, None, :]


class SingularTrajectory(_SpaceMixin):
    """Singular space + adaptive anchors + residual DDIM refinement."""

    kind = PredictorKind.SINGULAR_TRAJECTORY

    def __init__(self, spec: TaskSpec, config: dm.TrainConfig | None = None, **_):
        self.spec = spec
        self.config = config or dm.TrainConfig()
        self.net: dm.DenoiserNet | None = None
        self.schedule = dm.make_schedule(self.config.num_steps, self.config.beta_start, self.config.beta_end)
        self.loss_history: list[float] = []
        self.hist_scale = self.fut_scale = None

    def _groups(self, windows, fields, hx, anchors, fy=None):
        # whitened per basis direction so the latent is O(1) next to the noise
        hx = hx / self.hist_scale
        anchors = anchors / self.fut_scale
        groups = []
        for idx in scene_groups(windows):
            g = {"hist": hx[idx], "anchors": anchors[idx], "index": idx}
            if fy is not None:
                g["fut"] = fy[idx] / self.fut_scale
            groups.append(g)
        return groups

    def fit(self, windows, fields=None):
        cfg = self.config
        torch.manual_seed(cfg.seed)
        fy = self._fit_space(windows, cfg.k, self.spec.num_samples, cfg.seed)
        if cfg.augment:
            extra, fields = rotated_copies(windows, fields, cfg.augment, cfg.seed)
            windows = list(windows) + extra
        hx, fy, _ = ego_coords(windows, self.space)
        if cfg.adapt_train:
            anchors = adapt_per_scene(self.anchors.prototypes, windows, fields, self.space, self.spec.t_fut)
        else:
            anchors = np.broadcast_to(self.anchors.prototypes, (len(windows),) + self.anchors.prototypes.shape)
        self.hist_scale = np.maximum(hx.std(axis=0), 1e-6)
        # residuals get RMS ``latent_std`` in the diffusion latent
        rms = np.sqrt(((fy[:, None] - anchors) ** 2).mean(axis=(0, 1)))
        self.fut_scale = np.maximum(rms, 1e-6) / cfg.latent_std
        groups = self._groups(windows, fields, hx, anchors, fy)
        self.net = dm.DenoiserNet(cfg.k, self.spec.num_samples, cfg.d_model, cfg.n_heads, cfg.joint)
        self.loss_history = dm.fit(self.net, groups, self.schedule, cfg,
                                   on_epoch=lambda e, l: log.debug("epoch %d loss %.4f", e, l))
        return self

    def predict_coords(self, windows, fields=None, seed: int = 0):
        """Sampled future coordinates ``(N, S, K)`` and last observations."""
        hx, _, origin = ego_coords(windows, self.space)
        anchors = adapt_per_scene(self.anchors.prototypes, windows, fields, self.space, self.spec.t_fut)
        out = np.zeros(anchors.shape)
        gen = torch.Generator().manual_seed(seed)
        groups = self._groups(windows, fields, hx, anchors)
        for batch_groups in _chunks(groups, self.config.batch_size):
            batch = dm.collate(batch_groups)
            coords = dm.sample_coords(self.net, batch, self.schedule, self.config.mode, generator=gen)
            coords = coords.double().numpy() * self.fut_scale
            for b, g in enumerate(batch_groups):
                out[g["index"]] = coords[b, :len(g["index"])]
        return out, origin

    def predict(self, windows, fields=None, seed: int = 0) -> np.ndarray:
        if self.net is None:
            raise dm.TrainingError("model has not been fitted or loaded")
        coords, origin = self.predict_coords(windows, fields, seed)
        paths = unflatten(reconstruct(coords, self.space, self.spec.t_fut))
        return paths + origin[:, None, None, :]

    def save(self, path) -> None:
        payload = {
            "space": self.space.to_dict(),
            "anchors": self.anchors.prototypes.tolist(),
            "anchor_provenance": self.anchors.provenance,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "spec": {"task": self.spec.task.value, "scene": self.spec.label},
            "loss_history": self.loss_history,
            "hist_scale": self.hist_scale.tolist(),
            "fut_scale": self.fut_scale.tolist(),
        }
        dm.save_checkpoint(path, self.net, self.schedule, payload)

    @classmethod
    def load(cls, path, spec: TaskSpec) -> "SingularTrajectory":
        net, schedule, payload = dm.load_checkpoint(path)
        cfg = dm.TrainConfig.from_dict(payload["config"])
        model = cls(spec, cfg)
        model.net, model.schedule = net, schedule
        model.space = SingularSpace.from_dict(payload["space"])
        model.anchors = AnchorSet(np.asarray(payload["anchors"]), provenance=payload.get("anchor_provenance", {}))
        model.loss_history = payload.get("loss_history", [])
        model.hist_scale = np.asarray(payload["hist_scale"])
        model.fut_scale = np.asarray(payload["fut_scale"])
        return model


def _chunks(groups, batch_size):
    chunk, count = [], 0
    for g in groups:
        chunk.append(g)
        count += len(g["hist"])
        if count >= batch_size:
            yield chunk
            chunk, count = [], 0
    if chunk:
        yield chunk


@dataclass
class PredictorHandle:
    kind: PredictorKind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.kind = PredictorKind(self.kind)
        except ValueError:
            raise ConfigError(f"unknown predictor kind {self.kind!r}") from None

    def build(self, spec: TaskSpec):
        cls = {PredictorKind.SINGULAR_TRAJECTORY: SingularTrajectory,
               PredictorKind.CONSTANT_VELOCITY: ConstantVelocity,
               PredictorKind.NEAREST_ANCHOR: NearestAnchor}[self.kind]
        return cls(spec, **self.params)

    def config_hash(self) -> str:
        cfg = self.params.get("config")
        if isinstance(cfg, dm.TrainConfig):
            return cfg.hash()
        return self.kind.value
