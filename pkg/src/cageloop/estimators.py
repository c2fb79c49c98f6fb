"""scikit-learn style wrappers around the surface and grasp stages.

Each estimator takes an ``(n, 6)`` array of oriented points (``x y z nx ny
nz``) or an ``(n, 3)`` array whose normals are then estimated.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .estimation import estimate_normals, principal_curvatures
from .shapes import PointCloud


def _cloud(X) -> PointCloud:
    X = check_array(X, dtype=np.float64, ensure_min_samples=4)
    if X.shape[1] == 6:
        return PointCloud(X[:, :3], X[:, 3:] / np.linalg.norm(X[:, 3:], axis=1, keepdims=True))
    if X.shape[1] == 3:
        return PointCloud(X, estimate_normals(X))
    raise ValueError(f"expected 3 or 6 columns, got {X.shape[1]}")


class RBFOffsetSurface(BaseEstimator, TransformerMixin):
    """Biharmonic implicit surface that is 0 on the points and ``r`` at
    distance ``r`` along their normals. ``transform`` evaluates it, so the
    offset surface is the level set at ``r``."""

    def __init__(self, r=0.01, max_points=4000):
        self.r = r
        self.max_points = max_points

    def fit(self, X, y=None):
        from .implicit import fit_rbf

        cloud = _cloud(X)
        self.surface_ = fit_rbf(cloud, self.r, self.max_points)
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "surface_")
        X = check_array(X, dtype=np.float64)
        return self.surface_(X[:, :3])

    def score(self, X, y=None):
        """Negative mean interpolation error on ``X`` and its offset points."""
        check_is_fitted(self, "surface_")
        cloud = _cloud(X)
        on = np.abs(self.surface_(cloud.points))
        off = np.abs(self.surface_(cloud.points + self.r * cloud.normals) - self.r)
        return -float(np.mean(np.concatenate([on, off])))


class PrincipalCurvatures(BaseEstimator, TransformerMixin):
    """Per-point principal curvatures ``(k1, k2)`` with ``k1 >= k2`` from a
    local quadric fit against the fitted cloud."""

    def __init__(self, k=20):
        self.k = k

    def fit(self, X, y=None):
        self.cloud_ = _cloud(X)
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "cloud_")
        q = _cloud(X) if np.asarray(X).shape[1] == 6 else None
        if q is None:
            pts = check_array(X, dtype=np.float64)
            from scipy.spatial import cKDTree

            _, idx = cKDTree(self.cloud_.points).query(pts)
            return principal_curvatures(self.cloud_.points, self.cloud_.normals, pts, self.cloud_.normals[idx],
                                        k=self.k)
        return principal_curvatures(self.cloud_.points, self.cloud_.normals, q.points, q.normals, k=self.k)


class CagingGraspPlanner(BaseEstimator):
    """Full pipeline as an estimator.

    ``fit`` computes the ranked caging loops of one object; ``predict``
    returns the grasp poses of the top loops. Parameters mirror the JSON
    config; ``config`` may hold any further keys as a nested dict.
    """

    def __init__(self, h=0.12, r=0.01, resolution=50, samples=500, seed=0, curvature_filter=True, top_k=5,
                 config=None):
        self.h = h
        self.r = r
        self.resolution = resolution
        self.samples = samples
        self.seed = seed
        self.curvature_filter = curvature_filter
        self.top_k = top_k
        self.config = config

    def _config(self):
        from .pipeline import PipelineConfig

        data = dict(self.config or {})
        data.setdefault("gripper", {})
        data["gripper"] = {**data["gripper"], "h": self.h, "r": self.r}
        data.setdefault("pose", {})
        data["pose"] = {**data["pose"], "top_k": self.top_k}
        data.update(resolution=self.resolution, samples=self.samples, seed=self.seed,
                    curvature_filter=self.curvature_filter)
        return PipelineConfig.from_dict(data)

    def fit(self, X, y=None):
        from .pipeline import run

        self.report_ = run(self._config(), _cloud(X), write=False)
        self.loops_ = self.report_.loops
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def predict(self, X=None):
        """Grasp poses of the top-ranked loops (None where no origin exists)."""
        check_is_fitted(self, "report_")
        return [pose for _, pose in self.report_.poses]

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)
