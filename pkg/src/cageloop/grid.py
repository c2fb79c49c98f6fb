"""Labeled voxelization of the embedding space around the target object.

Voxel ``(i, j, k)`` has flat index ``i + nx * (j + ny * k)`` (x fastest), and
its center sits at ``origin + spacing * (ijk + 0.5)``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, cKDTree

from .errors import EmptyGraspingSpace, NoObjectVoxels, ParseError
from .implicit import ImplicitSurface
from .shapes import PointCloud

log = logging.getLogger(__name__)


class Label(enum.IntEnum):
    OUTSIDE_HULL = 0
    OBJECT = 1
    BAND = 2
    GRASPING = 3


# face neighbors in the order -x, +x, -y, +y, -z, +z
FACE_OFFSETS = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.int64)


@dataclass(eq=False)
class VoxelGrid:
    origin: np.ndarray
    spacing: float
    dims: tuple
    labels: np.ndarray  # flat uint8, x-fastest
    hull_equations: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    hull_slack: float = 0.0
    surface_points: np.ndarray | None = None
    surface_normals: np.ndarray | None = None
    offset_radius: float = 0.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8).ravel()
        if self.labels.size != self.n_voxels:
            raise ValueError(f"labels size {self.labels.size} does not match dims {self.dims}")
        self.labels.setflags(write=False)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def strides(self) -> np.ndarray:
        nx, ny, _ = self.dims
        return np.array([1, nx, nx * ny], dtype=np.int64)

    def ijk(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.int64)
        nx, ny, _ = self.dims
        return np.stack([index % nx, (index // nx) % ny, index // (nx * ny)], axis=-1)

    def flat(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        return ijk @ self.strides

    def center(self, index) -> np.ndarray:
        return self.origin + self.spacing * (self.ijk(index) + 0.5)

    def index_of(self, points) -> np.ndarray:
        """Flat index of the voxel containing each point, -1 outside the grid."""
        points = np.asarray(points, dtype=np.float64)
        ijk = np.floor((points - self.origin) / self.spacing).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < np.array(self.dims)), axis=-1)
        out = np.where(inside, ijk @ self.strides, -1)
        return out

    def label_at(self, points) -> np.ndarray:
        idx = self.index_of(points)
        return np.where(idx >= 0, self.labels[np.maximum(idx, 0)], Label.OUTSIDE_HULL)

    def is_free(self, points) -> np.ndarray:
        return self.label_at(points) == Label.GRASPING

    def is_blocked(self, points) -> np.ndarray:
        lab = self.label_at(points)
        return (lab == Label.OBJECT) | (lab == Label.BAND)

    def volume(self, label) -> np.ndarray:
        return self.labels.reshape(self.dims[::-1]).transpose(2, 1, 0) == label

    def counts(self) -> dict:
        return {lab.name: int(np.count_nonzero(self.labels == lab)) for lab in Label}

    @cached_property
    def grasping_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels == Label.GRASPING)

    @cached_property
    def band_tree(self) -> cKDTree | None:
        band = np.flatnonzero(self.labels == Label.BAND)
        return cKDTree(self.center(band)) if len(band) else None

    @cached_property
    def surface_tree(self) -> cKDTree | None:
        return cKDTree(self.surface_points) if self.surface_points is not None else None

    @cached_property
    def outward(self) -> np.ndarray:
        """Per BAND voxel, the unit vector from the nearest surface sample to
        the voxel center (zero elsewhere); it points away from the object."""
        out = np.zeros((self.n_voxels, 3))
        band = np.flatnonzero(self.labels == Label.BAND)
        if len(band) and self.surface_tree is not None:
            c = self.center(band)
            _, k = self.surface_tree.query(c)
            d = c - self.surface_points[k]
            norm = np.linalg.norm(d, axis=1, keepdims=True)
            # centers sitting on a sample fall back to the sample normal
            d = np.where(norm > 1e-12, d / np.where(norm > 0, norm, 1.0), self.surface_normals[k])
            out[band] = d
        return out

    def hull_distance(self, points) -> np.ndarray:
        """Signed distance to the hull planes, negative inside."""
        points = np.atleast_2d(points)
        if len(self.hull_equations) == 0:
            return np.full(len(points), -np.inf)
        return (points @ self.hull_equations[:, :3].T + self.hull_equations[:, 3]).max(axis=1)

    def object_bbox_diagonal(self) -> float:
        obj = np.flatnonzero(self.labels == Label.OBJECT)
        if len(obj) == 0:
            raise NoObjectVoxels("grid has no OBJECT voxels")
        c = self.center(obj)
        return float(np.linalg.norm(c.max(axis=0) - c.min(axis=0)))


@numba.njit(cache=True)
def _inside_planes(points, equations, slack):
    out = np.ones(points.shape[0], dtype=np.bool_)
    last = 0
    m = equations.shape[0]
    for p in range(points.shape[0]):
        x, y, z = points[p, 0], points[p, 1], points[p, 2]
        # neighboring voxels tend to be rejected by the same facet
        e = equations[last]
        if e[0] * x + e[1] * y + e[2] * z + e[3] > slack:
            out[p] = False
            continue
        for k in range(m):
            e = equations[k]
            if e[0] * x + e[1] * y + e[2] * z + e[3] > slack:
                out[p] = False
                last = k
                break
    return out


def build_grid(
    surface: ImplicitSurface,
    cloud: PointCloud,
    resolution: int = 50,
    margin: float = 0.15,
    hull_slack: float = 2.0,
) -> VoxelGrid:
    """Voxelize the padded bounding box and label every voxel center.

    ``f < 0`` is OBJECT, ``0 <= f < r`` is BAND, ``f >= r`` inside the convex
    hull of the offset points is GRASPING, and everything else is
    OUTSIDE_HULL. The hull planes are pushed out by ``hull_slack`` voxels so
    loops resting on convex parts of the offset surface keep a connected
    corridor; ``f`` is only evaluated inside that dilated hull.
    """
    if resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {resolution}")
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    r = surface.r
    lo, hi = cloud.bbox
    pad = margin * cloud.diagonal + r
    lo, hi = lo - pad, hi + pad
    spacing = float((hi - lo).max() / resolution)
    dims = tuple(int(d) for d in np.maximum(np.ceil((hi - lo) / spacing - 1e-9), 1))
    # center the lattice on the padded box
    origin = (lo + hi) / 2 - spacing * np.array(dims) / 2

    hull = ConvexHull(surface.offset_points)
    equations = hull.equations
    slack = hull_slack * spacing

    nx, ny, nz = dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    # x-fastest flat order
    ijk = np.stack([ii.ravel("F"), jj.ravel("F"), kk.ravel("F")], axis=1)
    centers = origin + spacing * (ijk + 0.5)

    inside = _inside_planes(centers, np.ascontiguousarray(equations), slack)

    labels = np.full(len(centers), Label.OUTSIDE_HULL, dtype=np.uint8)
    f = surface(centers[inside])
    lab = np.where(f < 0, Label.OBJECT, np.where(f < r, Label.BAND, Label.GRASPING))
    labels[inside] = lab

    grid = VoxelGrid(origin, spacing, dims, labels, equations, slack, cloud.points, cloud.normals, r)
    counts = grid.counts()
    if counts["GRASPING"] == 0:
        raise EmptyGraspingSpace(
            f"no GRASPING voxels at resolution {resolution} with offset {r}; "
            "the offset radius or resolution does not fit the object scale")
    _flag_split_grasping_space(grid)
    return grid


def grasping_components(grid: VoxelGrid) -> tuple[np.ndarray, int]:
    """26-connected components of the GRASPING voxels, as an (nx, ny, nz) label volume."""
    structure = np.ones((3, 3, 3), dtype=bool)
    return ndimage.label(grid.volume(Label.GRASPING), structure=structure)


def _flag_split_grasping_space(grid):
    comp, n = grasping_components(grid)
    if n <= 1:
        return
    # components touching an OUTSIDE_HULL voxel hint at spurious RBF sheets
    outside = grid.volume(Label.OUTSIDE_HULL)
    near_hull = ndimage.binary_dilation(outside, structure=np.ones((3, 3, 3), dtype=bool))
    touching = np.unique(comp[near_hull & (comp > 0)])
    if len(touching) > 1:
        log.warning("GRASPING space splits into %d components touching the hull", len(touching))


def centroid_of_object(grid: VoxelGrid) -> np.ndarray:
    """Mean of OBJECT voxel centers (uniform density)."""
    obj = np.flatnonzero(grid.labels == Label.OBJECT)
    if len(obj) == 0:
        raise NoObjectVoxels("grid has no OBJECT voxels")
    return grid.center(obj).mean(axis=0)


_GRID_MAGIC = "cageloop-voxelgrid 1"


def write_grid(grid: VoxelGrid, path) -> None:
    """Text header (origin, spacing, dims) followed by one label byte per voxel."""
    header = (
        f"{_GRID_MAGIC}\n"
        f"origin {grid.origin[0]:.17g} {grid.origin[1]:.17g} {grid.origin[2]:.17g}\n"
        f"spacing {grid.spacing:.17g}\n"
        f"dims {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n"
        f"labels {' '.join(f'{lab.name}={lab.value}' for lab in Label)}\n"
        "data\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(grid.labels.tobytes())


def read_grid(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    marker = b"\ndata\n"
    pos = raw.find(marker)
    if pos < 0 or not raw.startswith(_GRID_MAGIC.encode()):
        raise ParseError(f"{path}: not a voxel grid dump")
    fields = {}
    for line in raw[:pos].decode("ascii").splitlines()[1:]:
        key, *vals = line.split()
        fields[key] = vals
    origin = np.array([float(v) for v in fields["origin"]])
    dims = tuple(int(v) for v in fields["dims"])
    labels = np.frombuffer(raw[pos + len(marker):], dtype=np.uint8)
    return VoxelGrid(origin, float(fields["spacing"][0]), dims, labels.copy())
