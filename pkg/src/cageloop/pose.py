"""Gripper pose from a caging loop: origin, frame and an interference test.

The gripper is a palm with three skeleton fingers of length ``h`` swept by
radius ``r``. Because BAND voxels already mark everything within ``r`` of the
object, testing skeleton samples against OBJECT and BAND voxels is the same
as testing the swept fingers against the object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadParams, CollinearLoop, NoValidOrigin
from .grid import Label, VoxelGrid
from .morse import CagingLoop

GRAVITY = np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class GripperSpec:
    h: float  # finger length; the full stretch is 2h
    r: float  # finger sweep radius
    approach_depth: float | None = None  # cone height, defaults to h
    spread_deg: float = 60.0
    palm_offset: float = 0.3  # fraction of h

    def __post_init__(self):
        if self.approach_depth is None:
            object.__setattr__(self, "approach_depth", self.h)
        for name in ("h", "r", "approach_depth"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise BadParams(f"gripper {name} must be positive, got {value}")
        if not 0 <= self.spread_deg < 180:
            raise BadParams(f"spread_deg must be in [0, 180), got {self.spread_deg}")


@dataclass(frozen=True)
class GraspPose:
    origin: np.ndarray
    dir1: np.ndarray
    dir2: np.ndarray
    plane_normal: np.ndarray
    opening_angle: float
    valid: bool
    vertex: int = -1  # index of the origin on its loop

    def frame(self) -> np.ndarray:
        """Rows dir1, dir2 and the plane normal with its dir1 part removed."""
        n = self.plane_normal - np.dot(self.plane_normal, self.dir1) * self.dir1
        return np.array([self.dir1, self.dir2, n / np.linalg.norm(n)])


def fit_plane(points, gravity=GRAVITY) -> tuple[np.ndarray, float]:
    """Least-squares plane ``n . x = b`` through ``points`` (a loop or an
    array), with ``n . gravity <= 0``."""
    pts = points.vertices if isinstance(points, CagingLoop) else np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        raise CollinearLoop(f"need 3 points for a plane, got {len(pts)}")
    center = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - center, full_matrices=False)
    scale = max(s[0], 1e-300)
    if s[1] <= 1e-9 * scale:
        raise CollinearLoop("loop vertices are collinear")
    n = vt[2]
    g = np.asarray(gravity, dtype=np.float64)
    if np.dot(n, g) > 0:
        n = -n
    elif np.dot(n, g) == 0:
        # vertical planes: make the first nonzero component positive
        nz = np.flatnonzero(np.abs(n) > 1e-12)[0]
        if n[nz] < 0:
            n = -n
    return n, float(np.dot(n, center))


def _blocked(grid, points):
    lab = grid.label_at(points)
    return (lab == Label.OBJECT) | (lab == Label.BAND)


def _basis(axis):
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    helper = np.where(np.abs(axis[..., :1]) < 0.9, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    return axis, u, np.cross(axis, u)


def opening_angles(apexes, axes, grid: VoxelGrid, depth: float, azimuths: int = 64,
                   rings: int = 8, tol: float = 0.01) -> np.ndarray:
    """Largest half-angle of a cone per apex that stays clear of OBJECT and
    BAND voxels.

    The cone opens along ``axis`` with height ``depth``. Its surface is
    sampled along ``azimuths`` generator lines, each from the apex to the top
    rim at no fewer than ``rings`` points and no coarser than half a voxel.
    Generators are clipped at the grid diagonal, beyond which every sample
    would lie outside the grid, and samples outside the grid are free.
    Bisection runs to ``tol`` radians.
    """
    apexes = np.atleast_2d(np.asarray(apexes, dtype=np.float64))
    axes = np.atleast_2d(np.asarray(axes, dtype=np.float64))
    if depth <= 0:
        raise BadParams(f"cone depth must be positive, got {depth}")
    axis, u, v = _basis(axes)
    phi = 2 * np.pi * np.arange(azimuths) / azimuths
    ring_dirs = np.cos(phi)[None, :, None] * u[:, None, :] + np.sin(phi)[None, :, None] * v[:, None, :]
    reach = grid.spacing * float(np.linalg.norm(grid.dims))
    step = grid.spacing / 2

    def clear(theta, which):
        a = apexes[which]
        th = theta[which]
        slant = np.minimum(depth / np.maximum(np.cos(th), 1e-300), reach)
        m = max(rings, int(np.ceil(slant.max() / step)))
        s = slant[:, None] * (np.arange(1, m + 1) / m)[None, :]  # (w, m)
        gen = (np.cos(th)[:, None, None] * axis[which][:, None, :]
               + np.sin(th)[:, None, None] * ring_dirs[which])  # (w, azimuths, 3)
        pts = a[:, None, None, :] + s[:, :, None, None] * gen[:, None, :, :]
        hit = _blocked(grid, pts.reshape(-1, 3)).reshape(len(which), -1)
        return ~hit.any(axis=1)

    n = len(apexes)
    out = np.zeros(n)
    idx = np.flatnonzero(~_blocked(grid, apexes))
    if len(idx):
        # a blocked axis ray leaves the angle at 0
        idx = idx[clear(np.zeros(n), idx)]
    if len(idx):
        full = clear(np.full(n, np.pi / 2), idx)
        out[idx[full]] = np.pi / 2
        idx = idx[~full]
    lo = np.zeros(n)
    hi = np.full(n, np.pi / 2)
    rest = idx
    while len(idx):
        mid = (lo + hi) / 2
        ok = clear(mid, idx)
        lo[idx[ok]] = mid[idx[ok]]
        hi[idx[~ok]] = mid[idx[~ok]]
        idx = idx[hi[idx] - lo[idx] > tol]
    out[rest] = lo[rest]
    return out


def opening_angle(vertex, axis, grid: VoxelGrid, depth: float, azimuths: int = 64, rings: int = 8,
                  tol: float = 0.01) -> float:
    return float(opening_angles([vertex], [axis], grid, depth, azimuths, rings, tol)[0])


def _on_offset_surface(grid, points):
    """Vertices resting on the offset surface: a BAND voxel is a 26-neighbor."""
    tree = grid.band_tree
    if tree is None:
        return np.zeros(len(points), dtype=bool)
    d, _ = tree.query(points, distance_upper_bound=np.sqrt(3) * grid.spacing * 1.0001)
    return np.isfinite(d)


def _normals_at(grid, points):
    _, k = grid.surface_tree.query(points)
    return grid.surface_normals[k]


def vertex_frames(loop: CagingLoop, grid: VoxelGrid, gravity=GRAVITY):
    """Cone axis and dir1 per loop vertex, the plane normal and the on-surface mask.

    Vertices on the offset surface use the outward surface normal as cone
    axis and ``dir1 = (o - c) / |o - c|``. The others use the loop tangent
    ``t``: ``dir1 = t x n``, flipped to point away from the loop center,
    serves as both.
    """
    n, _ = fit_plane(loop, gravity)
    pts = loop.vertices
    c = loop.center
    on = _on_offset_surface(grid, pts)
    radial = pts - c
    rn = np.linalg.norm(radial, axis=1, keepdims=True)
    dir1 = np.divide(radial, rn, out=np.zeros_like(radial), where=rn > 0)
    tangent = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
    remark = np.cross(tangent, n)
    remark_norm = np.linalg.norm(remark, axis=1, keepdims=True)
    remark = np.divide(remark, remark_norm, out=np.zeros_like(remark), where=remark_norm > 0)
    remark = np.where((np.einsum("ij,ij->i", remark, radial) < 0)[:, None], -remark, remark)
    dir1 = np.where(on[:, None], dir1, remark)
    if grid.surface_tree is not None:
        axis = np.where(on[:, None], _normals_at(grid, pts), remark)
    else:
        axis = dir1.copy()
    return axis, dir1, n, on


def pose_at(loop: CagingLoop, k: int, dir1, n, angle: float) -> GraspPose | None:
    """Frame at vertex ``k``; None when dir1 is parallel to the plane normal."""
    d2 = np.cross(dir1, n)
    norm = np.linalg.norm(d2)
    if norm < 1e-9 or np.linalg.norm(dir1) < 1e-9:
        return None
    return GraspPose(loop.vertices[k].copy(), np.asarray(dir1, dtype=np.float64), d2 / norm, n.copy(),
                     float(angle), False, int(k))


def gripper_samples(pose: GraspPose, gripper: GripperSpec, spacing: float) -> dict:
    """Sample points of the palm disc and the three finger skeletons.

    The palm center sits ``palm_offset * h`` beyond the origin along dir1,
    away from the loop. Two fingers leave it along dir2 tilted by half the
    spread angle to either side of the loop plane; the thumb leaves along
    -dir2. Points are spaced at ``spacing / 2``.
    """
    step = spacing / 2
    n = pose.frame()[2]
    palm = pose.origin + gripper.palm_offset * gripper.h * pose.dir1
    half = np.radians(gripper.spread_deg) / 2
    t = np.arange(0.0, gripper.h + step / 2, step)
    fingers = {
        "finger1": np.cos(half) * pose.dir2 + np.sin(half) * n,
        "finger2": np.cos(half) * pose.dir2 - np.sin(half) * n,
        "thumb": -pose.dir2,
    }
    out = {name: palm + t[:, None] * d[None, :] for name, d in fingers.items()}
    rad = 2 * gripper.r
    rings = np.arange(0.0, rad + step / 2, step)
    disc = [palm[None, :]]
    for rho in rings[1:]:
        m = max(6, int(np.ceil(2 * np.pi * rho / step)))
        phi = 2 * np.pi * np.arange(m) / m
        disc.append(palm + rho * (np.cos(phi)[:, None] * pose.dir2 + np.sin(phi)[:, None] * n))
    out["palm"] = np.vstack(disc)
    # the segment joining the origin to the palm
    s = np.arange(0.0, gripper.palm_offset * gripper.h + step / 2, step)
    out["wrist"] = pose.origin + s[:, None] * pose.dir1
    return out


def check_interference(pose: GraspPose, loop: CagingLoop | None, gripper: GripperSpec, grid: VoxelGrid) -> bool:
    """True when no gripper sample falls in an OBJECT or BAND voxel."""
    pts = np.vstack(list(gripper_samples(pose, gripper, grid.spacing).values()))
    return not bool(_blocked(grid, pts).any())


def make_pose(loop: CagingLoop, grid: VoxelGrid, gripper: GripperSpec | None = None, min_angle: float = 0.15,
              gravity=GRAVITY, azimuths: int = 64, rings: int = 8, tol: float = 0.01) -> GraspPose:
    """Pick the origin with the widest approach cone and build its frame.

    Vertices are tried in descending opening angle (ties: nearer the hull,
    then lower index). Without a gripper the best vertex is returned as is;
    with one, the first vertex whose gripper clears the object wins, and if
    none does the best vertex comes back with ``valid=False``.
    """
    depth = gripper.approach_depth if gripper is not None else 4 * grid.spacing
    axis, dir1, n, _ = vertex_frames(loop, grid, gravity)
    angles = opening_angles(loop.vertices, axis, grid, depth, azimuths, rings, tol)
    if angles.max() < min_angle:
        raise NoValidOrigin(f"best opening angle {angles.max():.3f} rad is below {min_angle} rad")
    hull = -grid.hull_distance(loop.vertices) if len(grid.hull_equations) else np.zeros(len(angles))
    order = np.lexsort((np.arange(len(angles)), hull, -angles))
    best = None
    for k in order:
        if angles[k] < min_angle:
            break
        pose = pose_at(loop, k, dir1[k], n, angles[k])
        if pose is None:
            continue
        if gripper is None:
            return pose
        if best is None:
            best = pose
        if check_interference(pose, loop, gripper, grid):
            return GraspPose(pose.origin, pose.dir1, pose.dir2, pose.plane_normal, pose.opening_angle, True,
                             pose.vertex)
    if best is None:
        raise NoValidOrigin("no vertex defines a frame")
    return best
