"""Shared low-rank motion basis and length-agnostic projection.

Trajectories are flattened row-wise as ``(x_1, y_1, ..., x_T, y_T)``.  The
basis ``V_K`` holds the top-K right singular vectors of a matrix of
fixed-length track segments.  Paths of other lengths are mapped through a
cubic B-spline resampling matrix ``C_T`` of shape ``(2T, 2T_win)``.

Coordinates in the space are plain ``(N, K)`` arrays.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BuildError, ShapeError

T_WIN = 12
DEFAULT_K = 4
NORMALIZATION_TAG = "ego-last-obs/no-rotation"
FORMAT_TAG = "singular-space/1"


def flatten(paths: np.ndarray) -> np.ndarray:
    """``(..., T, 2)`` -> ``(..., 2T)``."""
    paths = np.asarray(paths, dtype=float)
    return paths.reshape(*paths.shape[:-2], -1)


def unflatten(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    return rows.reshape(*rows.shape[:-1], -1, 2)


def to_ego(paths: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """Translate ``(..., T, 2)`` paths so ``origin`` (``(..., 2)``) is zero."""
    return np.asarray(paths, dtype=float) - np.asarray(origin, dtype=float)[..., None, :]


def from_ego(paths: np.ndarray, origin: np.ndarray) -> np.ndarray:
    return np.asarray(paths, dtype=float) + np.asarray(origin, dtype=float)[..., None, :]


# --- B-spline resampling -------------------------------------------------

def clamped_uniform_knots(n_ctrl: int, degree: int = 3) -> np.ndarray:
    """Endpoint-clamped knots for interpolating ``n_ctrl`` uniform samples.

    Interior knots sit on the uniform sample sites, skipping the second and
    second-to-last (the not-a-knot placement), which keeps the interpolation
    weights well conditioned.
    """
    degree = min(degree, n_ctrl - 1)
    sites = np.linspace(0.0, 1.0, n_ctrl)
    n_interior = n_ctrl - degree - 1
    half = (degree + 1) // 2
    interior = sites[half:half + n_interior] if n_interior > 0 else np.empty(0)
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def bspline_basis(knots: np.ndarray, degree: int, u: np.ndarray) -> np.ndarray:
    """Cox-de Boor basis values, ``(len(u), len(knots) - degree - 1)``.

    On uniform interior knots the cubic basis functions are the Irwin-Hall
    density of order 4, shifted and scaled.  ``u == 1`` is assigned to the
    last non-empty span so the clamped curve ends on its last control point.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n_basis = len(knots) - degree - 1
    last = np.flatnonzero(knots[:-1] < knots[1:])[-1]
    n_spans = len(knots) - 1
    B = np.zeros((len(u), n_spans))
    for j in range(n_spans):
        if knots[j] < knots[j + 1]:
            inside = (u >= knots[j]) & (u < knots[j + 1])
            if j == last:
                inside |= u == knots[j + 1]
            B[inside, j] = 1.0
    for p in range(1, degree + 1):
        nxt = np.zeros((len(u), n_spans - p))
        for j in range(n_spans - p):
            left_den = knots[j + p] - knots[j]
            right_den = knots[j + p + 1] - knots[j + 1]
            if left_den > 0:
                nxt[:, j] += (u - knots[j]) / left_den * B[:, j]
            if right_den > 0:
                nxt[:, j] += (knots[j + p + 1] - u) / right_den * B[:, j + 1]
        B = nxt
    return B[:, :n_basis]


@lru_cache(maxsize=None)
def _channel_matrix(t_target: int, t_win: int) -> np.ndarray:
    # Interpolating spline through t_win samples, re-evaluated at t_target
    # uniform parameters: C = B(u_target) @ inv(B(u_win)).
    degree = min(3, t_win - 1)
    knots = clamped_uniform_knots(t_win, degree)
    collocation = bspline_basis(knots, degree, np.linspace(0.0, 1.0, t_win))
    target = bspline_basis(knots, degree, np.linspace(0.0, 1.0, t_target))
    C = np.linalg.solve(collocation.T, target.T).T
    C.setflags(write=False)
    return C


def bspline_matrix(t_target: int, t_win: int = T_WIN) -> np.ndarray:
    """Resampling matrix ``(2 t_target, 2 t_win)`` for interleaved xy paths.

    ``C @ p`` resamples a flattened ``t_win``-point path ``p`` to
    ``t_target`` points.  x and y are resampled independently (the matrix is
    block diagonal once the channels are de-interleaved).
    """
    if int(t_target) != t_target or t_target < 2:
        raise ValueError(f"t_target must be an integer >= 2, got {t_target}")
    if int(t_win) != t_win or t_win < 2:
        raise ValueError(f"t_win must be an integer >= 2, got {t_win}")
    return np.kron(_channel_matrix(int(t_target), int(t_win)), np.eye(2))


@lru_cache(maxsize=None)
def _pinv(t_target: int, t_win: int) -> np.ndarray:
    P = np.linalg.pinv(bspline_matrix(t_target, t_win))
    P.setflags(write=False)
    return P


# --- gists and SVD --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GistMatrix:
    A: np.ndarray
    t_win: int

    @property
    def num_segments(self) -> int:
        return self.A.shape[0]


def build_gists(tracks: Sequence[np.ndarray], t_win: int = T_WIN, k: int = DEFAULT_K) -> GistMatrix:
    """Cut every track into sliding ``t_win``-point segments.

    Each segment is expressed relative to the position one frame before it,
    the same frame a future is expressed in relative to the last
    observation.  A track of length T gives ``T - t_win`` rows.
    """
    rows = []
    for track in tracks:
        track = np.asarray(track, dtype=float)
        for s in range(len(track) - t_win):
            seg = track[s + 1:s + 1 + t_win] - track[s]
            rows.append(seg.ravel())
    if len(rows) < k:
        raise BuildError(f"need at least K={k} segments of {t_win + 1} frames, got {len(rows)}")
    return GistMatrix(np.asarray(rows), t_win)


@dataclass(frozen=True, eq=False)
class SingularSpace:
    basis: np.ndarray          # (2 t_win, K), orthonormal columns
    sigma: np.ndarray          # (K,), descending
    t_win: int = T_WIN
    padded: bool = False
    normalization: str = NORMALIZATION_TAG

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def resampler(self, t: int) -> np.ndarray:
        return bspline_matrix(t, self.t_win)

    def project(self, batch, t=None):
        return project(batch, self, t)

    def reconstruct(self, coords, t=None):
        return reconstruct(coords, self, t)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "t_win": self.t_win,
            "k": self.k,
            "basis": self.basis.tolist(),
            "sigma": self.sigma.tolist(),
            "padded": self.padded,
            "normalization": self.normalization,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SingularSpace":
        if doc.get("format") != FORMAT_TAG:
            raise ValueError(f"not a singular space artifact: format={doc.get('format')!r}")
        basis = np.asarray(doc["basis"], dtype=float)
        if basis.shape != (2 * doc["t_win"], doc["k"]):
            raise ShapeError(f"basis shape {basis.shape} inconsistent with t_win/k")
        return cls(basis, np.asarray(doc["sigma"], dtype=float), int(doc["t_win"]),
                   bool(doc.get("padded", False)), doc.get("normalization", NORMALIZATION_TAG))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SingularSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _complete_basis(V: np.ndarray, k: int) -> np.ndarray:
    dim = V.shape[0]
    cols = [V[:, i] for i in range(V.shape[1])]
    for e in np.eye(dim):
        if len(cols) == k:
            break
        v = e.copy()
        for c in cols:
            v -= (c @ v) * c
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            cols.append(v / norm)
    return np.stack(cols, axis=1)


def fit_svd(gists, k: int = DEFAULT_K) -> SingularSpace:
    """Truncated SVD of the gist matrix.

    Columns are sign-fixed so their largest-magnitude entry is positive.  A
    rank-deficient matrix gets a Gram-Schmidt completion over canonical
    vectors and ``padded=True``.
    """
    if isinstance(gists, GistMatrix):
        A, t_win = gists.A, gists.t_win
    else:
        A = np.asarray(gists, dtype=float)
        t_win = A.shape[1] // 2
    if A.ndim != 2 or A.shape[1] != 2 * t_win:
        raise ShapeError(f"gist matrix must be (L, {2 * t_win}), got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise BuildError("gist matrix has non-finite entries")
    if not 1 <= k <= min(A.shape):
        raise BuildError(f"K={k} must lie in [1, min{A.shape}]")
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    V = Vt[:k].T.copy()
    idx = np.argmax(np.abs(V), axis=0)
    V *= np.sign(V[idx, np.arange(k)])
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    padded = rank < k
    sigma = s[:k].copy()
    if padded:
        warnings.warn(f"gist matrix has rank {rank} < K={k}; padding basis", RuntimeWarning, stacklevel=2)
        V = _complete_basis(V[:, :rank], k)
        sigma[rank:] = 0.0
    return SingularSpace(V, sigma, t_win, padded)


def _check_width(batch: np.ndarray, t: int) -> None:
    if batch.shape[-1] != 2 * t:
        raise ShapeError(f"batch width {batch.shape[-1]} does not match 2*T={2 * t}")


def project(batch, space: SingularSpace, t: int | None = None) -> np.ndarray:
    """``(N, 2T)`` ego-frame paths -> ``(N, K)`` coordinates, ``X C_T V_K``."""
    batch = np.asarray(batch, dtype=float)
    t = space.t_win if t is None else t
    _check_width(batch, t)
    if t == space.t_win:
        return batch @ space.basis
    return batch @ bspline_matrix(t, space.t_win) @ space.basis


def reconstruct(coords, space: SingularSpace, t: int | None = None) -> np.ndarray:
    """``(N, K)`` coordinates -> ``(N, 2T)`` paths, ``coords V_K^T C_T^+``."""
    coords = np.asarray(coords, dtype=float)
    if coords.shape[-1] != space.k:
        raise ShapeError(f"coordinates have {coords.shape[-1]} columns, space has K={space.k}")
    t = space.t_win if t is None else t
    paths = coords @ space.basis.T
    if t == space.t_win:
        return paths
    return paths @ _pinv(t, space.t_win)
