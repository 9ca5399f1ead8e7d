"""Prototype anchors and their deformation toward traversable space."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ClusteringError, MapError, ShapeError
from .singular_space import SingularSpace, flatten, project, reconstruct, unflatten

EPS_EQ = 1e-3
MAX_ITER = 50


@dataclass(frozen=True, eq=False)
class TraversabilityMap:
    """Binary walkable grid plus its world->pixel homography.

    Pixel coordinates are ``(u, v) = (column, row)``; cell ``(r, c)`` has its
    centre at ``u = c, v = r``.
    """

    grid: np.ndarray
    world_to_pixel: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        grid = np.asarray(self.grid).astype(bool)
        if grid.ndim != 2:
            raise MapError(f"grid must be 2-D, got shape {grid.shape}")
        if not grid.any():
            raise MapError("map has no traversable cell")
        H = np.asarray(self.world_to_pixel, dtype=float).reshape(3, 3)
        if abs(np.linalg.det(H)) < 1e-12:
            raise MapError("world_to_pixel homography is singular")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "world_to_pixel", H)
        object.__setattr__(self, "_inv", np.linalg.inv(H))

    @property
    def shape(self):
        return self.grid.shape

    @property
    def pixel_to_world(self) -> np.ndarray:
        return self._inv

    @property
    def pixel_scale(self) -> float:
        """Meters per pixel, from the local Jacobian at the pixel origin."""
        J = _jacobian(self._inv, np.zeros(2))
        return float(np.sqrt(abs(np.linalg.det(J))))

    def to_pixel(self, pts) -> np.ndarray:
        return _apply(self.world_to_pixel, pts)

    def to_world(self, pix) -> np.ndarray:
        return _apply(self._inv, pix)

    def cell_of(self, pts):
        """Nearest cell ``(row, col)`` for world points and an in-bounds mask."""
        uv = self.to_pixel(pts)
        col = np.rint(uv[..., 0]).astype(np.int64)
        row = np.rint(uv[..., 1]).astype(np.int64)
        H, W = self.grid.shape
        inside = (row >= 0) & (row < H) & (col >= 0) & (col < W)
        return row, col, inside

    def traversable_at(self, pts) -> np.ndarray:
        row, col, inside = self.cell_of(pts)
        out = np.zeros(row.shape, dtype=bool)
        out[inside] = self.grid[row[inside], col[inside]]
        return out

    def translated(self, offset) -> "TraversabilityMap":
        """The same grid placed ``offset`` meters away in world coordinates."""
        T = np.eye(3)
        T[:2, 2] = -np.asarray(offset, dtype=float)
        return TraversabilityMap(self.grid, self.world_to_pixel @ T)


def _apply(H: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 2)
    hom = flat @ H[:, :2].T + H[:, 2]
    out = hom[:, :2] / hom[:, 2:3]
    return out.reshape(pts.shape)


def _jacobian(H: np.ndarray, p: np.ndarray) -> np.ndarray:
    x = np.array([p[0], p[1], 1.0])
    h = H @ x
    return (H[:2, :2] * h[2] - np.outer(h[:2], H[2, :2])) / h[2] ** 2


def load_map(path, homography=None) -> TraversabilityMap:
    """Read a binary map: PGM/PNG via Pillow, or a plain-text 0/1 grid.

    Image pixels brighter than half the value range count as traversable.
    """
    path = Path(path)
    H = np.eye(3) if homography is None else np.asarray(homography, dtype=float).reshape(3, 3)
    if path.suffix.lower() in (".txt", ".csv", ".grid"):
        rows = [line.replace(",", " ").split() for line in path.read_text().splitlines()]
        rows = [r for r in rows if r]
        try:
            grid = np.array([[int(v) for v in r] for r in rows])
        except ValueError as exc:
            raise MapError(f"{path}: grid must contain only 0/1 ({exc})") from None
        if grid.ndim != 2 or not np.isin(grid, (0, 1)).all():
            raise MapError(f"{path}: ragged or non-binary grid")
        return TraversabilityMap(grid.astype(bool), H)
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img)
        maxval = 255 if arr.dtype == np.uint8 else max(int(arr.max()), 1)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return TraversabilityMap(arr > maxval / 2, H)


def save_map_pgm(path, tmap: TraversabilityMap) -> None:
    """Write the grid as a binary (P5) PGM, 255 = traversable."""
    from PIL import Image

    Image.fromarray(np.where(tmap.grid, 255, 0).astype(np.uint8), mode="L").save(Path(path), format="PPM")


@dataclass(frozen=True, eq=False)
class VectorField:
    """Per-cell world displacement to the nearest traversable cell centre."""

    fx: np.ndarray
    fy: np.ndarray
    nearest: np.ndarray          # (H, W, 2) row/col of the target cell
    tmap: TraversabilityMap
    _tree: cKDTree = field(repr=False, default=None)
    _cells: np.ndarray = field(repr=False, default=None)

    def sample(self, pts) -> np.ndarray:
        """Bilinearly interpolated displacement at world points ``(..., 2)``.

        Points whose nearest cell is off the grid are pushed to the nearest
        in-bounds traversable cell.
        """
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 2)
        uv = self.tmap.to_pixel(flat)
        H, W = self.fx.shape
        col = np.rint(uv[:, 0])
        row = np.rint(uv[:, 1])
        inside = (row >= 0) & (row < H) & (col >= 0) & (col < W)
        out = np.empty_like(flat)
        if inside.any():
            u = np.clip(uv[inside, 0], 0, W - 1)
            v = np.clip(uv[inside, 1], 0, H - 1)
            c0 = np.minimum(np.floor(u).astype(np.int64), max(W - 2, 0))
            r0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
            c1 = np.minimum(c0 + 1, W - 1)
            r1 = np.minimum(r0 + 1, H - 1)
            a = u - c0
            b = v - r0
            for comp, F in ((0, self.fx), (1, self.fy)):
                out[inside, comp] = ((1 - a) * (1 - b) * F[r0, c0] + a * (1 - b) * F[r0, c1]
                                     + (1 - a) * b * F[r1, c0] + a * b * F[r1, c1])
        if (~inside).any():
            _, idx = self._tree.query(np.stack([uv[~inside, 1], uv[~inside, 0]], axis=1))
            rc = self._cells[idx]
            target = self.tmap.to_world(np.stack([rc[:, 1], rc[:, 0]], axis=1).astype(float))
            out[~inside] = target - flat[~inside]
        return out.reshape(pts.shape)


def _nearest_traversable(cells: np.ndarray, tree: cKDTree, queries: np.ndarray) -> np.ndarray:
    """Index into ``cells`` of the nearest traversable cell, ties to the
    smallest ``(row, col)``; ``cells`` is in row-major order."""
    n = len(cells)
    result = np.empty(len(queries), dtype=np.int64)
    pending = np.arange(len(queries))
    k = min(8, n)
    while len(pending):
        _, idx = tree.query(queries[pending], k=k)
        idx = idx.reshape(len(pending), k)
        d2 = ((cells[idx] - queries[pending, None, :]) ** 2).sum(-1)
        best = d2.min(axis=1, keepdims=True)
        tie = d2 == best
        # if every returned neighbour ties, a farther-ranked one might too
        resolved = ~tie.all(axis=1) | (k == n)
        cand = np.where(tie, idx, np.iinfo(np.int64).max)
        result[pending[resolved]] = cand[resolved].min(axis=1)
        pending = pending[~resolved]
        k = min(2 * k, n)
    return result


def build_vector_field(tmap: TraversabilityMap) -> VectorField:
    """Exact nearest-traversable displacement field (Euclidean, in pixels).

    Displacements are converted to world meters through the homography, so
    adding ``F`` to a blocked cell centre lands on a traversable centre.
    """
    grid = tmap.grid
    cells = np.argwhere(grid).astype(np.int64)
    tree = cKDTree(cells.astype(float))
    H, W = grid.shape
    nearest = np.stack(np.meshgrid(np.arange(H), np.arange(W), indexing="ij"), axis=-1)
    blocked = np.argwhere(~grid).astype(np.int64)
    if len(blocked):
        target = cells[_nearest_traversable(cells, tree, blocked)]
        nearest[blocked[:, 0], blocked[:, 1]] = target
    rows, cols = np.indices((H, W))
    src = tmap.to_world(np.stack([cols, rows], axis=-1).astype(float))
    dst = tmap.to_world(np.stack([nearest[..., 1], nearest[..., 0]], axis=-1).astype(float))
    F = dst - src
    F[grid] = 0.0
    return VectorField(F[..., 0], F[..., 1], nearest, tmap, tree, cells)


@dataclass(frozen=True, eq=False)
class AnchorSet:
    prototypes: np.ndarray               # (S, K)
    adapted: bool = False
    provenance: dict = field(default_factory=dict)
    unresolved: np.ndarray | None = None  # (S,) bool, set after adaptation

    @property
    def num_samples(self) -> int:
        return self.prototypes.shape[0]


def cluster_prototypes(coords, num_samples: int, seed: int = 0, n_init: int = 10) -> AnchorSet:
    """k-means centroids of future coordinates, sorted for a stable order."""
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2:
        raise ShapeError(f"coordinates must be (N, K), got {coords.shape}")
    n = coords.shape[0]
    if num_samples < 1 or n < num_samples:
        raise ClusteringError(f"cannot form S={num_samples} clusters from {n} rows")
    if num_samples == 1:
        centers, n_iter = coords.mean(axis=0, keepdims=True), 0
    elif num_samples == n:
        centers, n_iter = coords.copy(), 0
    else:
        from sklearn.cluster import KMeans

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            km = KMeans(n_clusters=num_samples, n_init=n_init, random_state=seed).fit(coords)
        centers, n_iter = km.cluster_centers_, int(km.n_iter_)
    order = np.lexsort(centers.T[::-1])
    return AnchorSet(centers[order], provenance={"seed": seed, "kmeans_iter": n_iter})


def adapt_batch(prototypes, vfield: VectorField, space: SingularSpace, last_obs,
                t_fut: int | None = None, eps: float = EPS_EQ, max_iter: int = MAX_ITER):
    """Deform ``(S, K)`` or ``(N, S, K)`` prototypes per agent.

    Each iteration reconstructs the prototype path, places it at the agent's
    last observed world position, samples the field along it, projects the
    displacement path back into the space and adds it.  The step halves when
    successive updates point in opposite directions.  A prototype stops once
    its applied per-point motion falls below ``eps``.

    Returns ``(adapted (N, S, K), iterations (N, S), unresolved (N, S))``.
    """
    last_obs = np.atleast_2d(np.asarray(last_obs, dtype=float))
    N = last_obs.shape[0]
    P = np.asarray(prototypes, dtype=float)
    if P.ndim == 2:
        P = np.broadcast_to(P, (N,) + P.shape)
    P = P.copy()
    _, S, K = P.shape
    t_fut = space.t_win if t_fut is None else t_fut
    origin = np.repeat(last_obs, S, axis=0)
    flatP = P.reshape(N * S, K)
    step = np.ones(N * S)
    prev = np.zeros_like(flatP)
    iters = np.zeros(N * S, dtype=np.int64)
    active = np.ones(N * S, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        paths = unflatten(reconstruct(flatP[idx], space, t_fut)) + origin[idx, None, :]
        disp = vfield.sample(paths)
        dP = project(flatten(disp), space, t_fut)
        flip = (dP * prev[idx]).sum(axis=1) < 0
        step[idx[flip]] *= 0.5
        applied = step[idx, None] * dP
        motion = np.linalg.norm(unflatten(reconstruct(applied, space, t_fut)), axis=-1).max(axis=-1)
        settled = motion < eps
        move = idx[~settled]
        flatP[move] += applied[~settled]
        prev[move] = dP[~settled]
        iters[move] += 1
        active[idx[settled]] = False
    paths = unflatten(reconstruct(flatP, space, t_fut)) + origin[:, None, :]
    blocked = ~vfield.tmap.traversable_at(paths).all(axis=-1)
    unresolved = active | blocked
    return flatP.reshape(N, S, K), iters.reshape(N, S), unresolved.reshape(N, S)


def adapt_anchors(anchors: AnchorSet, vfield: VectorField, space: SingularSpace, last_obs_world,
                  t_fut: int | None = None, eps: float = EPS_EQ, max_iter: int = MAX_ITER) -> AnchorSet:
    """Adapt one agent's anchors to the map around ``last_obs_world``."""
    P, iters, unresolved = adapt_batch(anchors.prototypes, vfield, space, last_obs_world,
                                       t_fut, eps, max_iter)
    prov = dict(anchors.provenance)
    prov["adapt_iter"] = iters[0].tolist()
    prov["max_iter_reached"] = bool((iters[0] >= max_iter).any())
    return replace(anchors, prototypes=P[0], adapted=True, provenance=prov, unresolved=unresolved[0])
