"""Offset implicit surface from an oriented point cloud.

The function is a biharmonic RBF ``f(x) = sum_i w_i |x - c_i| + c0 + c.x``
interpolating ``f = 0`` on the samples and ``f = r`` on the samples pushed
out by ``r`` along their normals, so the level set ``f = r`` approximates the
r-offset surface.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import SingularSystem, TooManyPoints
from .shapes import PointCloud

MAX_POINTS = 4000


@numba.njit(cache=True, fastmath=False)
def _rbf_sum(queries, centers, weights):
    out = np.empty(queries.shape[0])
    for q in range(queries.shape[0]):
        x, y, z = queries[q, 0], queries[q, 1], queries[q, 2]
        acc = 0.0
        for i in range(centers.shape[0]):
            dx = x - centers[i, 0]
            dy = y - centers[i, 1]
            dz = z - centers[i, 2]
            acc += weights[i] * np.sqrt(dx * dx + dy * dy + dz * dz)
        out[q] = acc
    return out


@dataclass(frozen=True)
class ImplicitSurface:
    centers: np.ndarray  # (2n, 3): samples first, then their offset points
    weights: np.ndarray  # (2n,)
    poly: np.ndarray  # (c0, c1, c2, c3)
    r: float

    @property
    def n_samples(self) -> int:
        return len(self.centers) // 2

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = np.ascontiguousarray(x.reshape(-1, 3))
        vals = _rbf_sum(flat, self.centers, self.weights)
        vals += self.poly[0] + flat @ self.poly[1:]
        return vals.reshape(x.shape[:-1])

    @property
    def offset_points(self) -> np.ndarray:
        return self.centers[self.n_samples:]

    def residuals(self) -> dict:
        """Constraint and side-condition residuals of the fitted system."""
        f = self(self.centers)
        n = self.n_samples
        return {
            "surface": float(np.abs(f[:n]).max()),
            "offset": float(np.abs(f[n:] - self.r).max()),
            "side": float(np.abs(np.concatenate([[self.weights.sum()], self.weights @ self.centers])).max()),
        }


def fit_rbf(cloud: PointCloud, r: float, max_points: int = MAX_POINTS) -> ImplicitSurface:
    """Solve the dense ``(2n+4)`` interpolation system for the offset RBF."""
    if r <= 0:
        raise ValueError(f"offset radius must be positive, got {r}")
    n = len(cloud)
    if n > max_points:
        raise TooManyPoints(f"{n} points exceeds the cap of {max_points}; subsample first")

    centers = np.vstack([cloud.points, cloud.points + r * cloud.normals])
    close = cKDTree(centers).query_pairs(1e-9 * max(cloud.diagonal, 1.0), output_type="ndarray")
    if len(close):
        raise SingularSystem(f"{len(close)} coincident constraint points; deduplicate the cloud")

    # centered, unit-scaled coordinates keep the affine block well conditioned
    shift = centers.mean(axis=0)
    scale = np.abs(centers - shift).max()
    local = (centers - shift) / scale
    m = len(centers)
    A = np.zeros((m + 4, m + 4))
    A[:m, :m] = cdist(local, local)
    A[:m, m] = 1.0
    A[:m, m + 1:] = local
    A[m, :m] = 1.0
    A[m + 1:, :m] = local.T
    rhs = np.zeros(m + 4)
    rhs[n:m] = r / scale

    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            lu = scipy.linalg.lu_factor(A, check_finite=False)
            sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            # one refinement step squeezes the residual to round-off
            sol += scipy.linalg.lu_solve(lu, rhs - A @ sol, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            raise SingularSystem(str(exc)) from None
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("non-finite RBF solution")

    # undo the scaling: f(x) = scale * f_local((x - shift) / scale)
    weights = sol[:m].copy()
    c_local = sol[m:]
    lin = c_local[1:]
    c0 = scale * c_local[0] - lin @ shift
    return ImplicitSurface(centers, weights, np.concatenate([[c0], lin]), float(r))
