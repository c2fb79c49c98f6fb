"""Discrete critical points of a distance field and the loops they induce.

Each voxel's six face neighbors are labeled '-' when lower than the voxel and
'+' otherwise. Along any axis whose two neighbors are both lower, two
shortest paths leave the voxel in opposite directions; joining them at the
base point closes a loop.

Classification table, per axis pair (-x,+x), (-y,+y), (-z,+z):

* all six '-'                         -> MAXIMUM
* all six '+'                         -> MINIMUM
* some axis mixed ('-' on one side)   -> REGULAR
* otherwise (each axis '--' or '++')  -> SADDLE, one loop per '--' axis
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numba
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateLoop
from .field import DistanceField


MIN_LOOP_VERTICES = 8


class Kind(enum.Enum):
    SADDLE = "SADDLE"
    MAXIMUM = "MAXIMUM"
    MINIMUM = "MINIMUM"
    REGULAR = "REGULAR"


def classify_pattern(signs: int) -> tuple[Kind, tuple[int, ...]]:
    """Kind and descending axes for a 6-bit pattern.

    Bit ``2a`` / ``2a + 1`` is set when the neighbor at ``-axis a`` / ``+axis a``
    is lower ('-').
    """
    axes = [(signs >> (2 * a)) & 0b11 for a in range(3)]
    if signs == 0b111111:
        return Kind.MAXIMUM, (0, 1, 2)
    if signs == 0:
        return Kind.MINIMUM, ()
    if any(s in (0b01, 0b10) for s in axes):
        return Kind.REGULAR, ()
    return Kind.SADDLE, tuple(a for a, s in enumerate(axes) if s == 0b11)


_KIND_TABLE = [classify_pattern(s) for s in range(64)]
_KIND_CODE = np.array([{Kind.SADDLE: 1, Kind.MAXIMUM: 2}.get(k, 0) for k, _ in _KIND_TABLE], dtype=np.int8)
# axes a loop may leave along: the '--' axes of a saddle, any axis of a maximum
_LOOP_AXES = np.array([[k is Kind.MAXIMUM or (k is Kind.SADDLE and a in ax) for a in range(3)]
                       for k, ax in _KIND_TABLE], dtype=np.bool_)


def signs_to_string(signs: int) -> str:
    return "".join("-" if signs >> b & 1 else "+" for b in range(6))


@dataclass(frozen=True)
class CriticalPoint:
    voxel: int
    kind: Kind
    signs: int
    value: float

    @property
    def pairs(self) -> tuple[int, ...]:
        return _KIND_TABLE[self.signs][1]


@dataclass(eq=False)
class CagingLoop:
    """Closed polyline; the closing edge from the last vertex back to the
    first is implied."""

    vertices: np.ndarray
    base: np.ndarray  # position of the base point p
    source: CriticalPoint | None = None
    base_voxel: int = -1
    axis: int = -1
    voxels: np.ndarray | None = None  # voxel path, only for traced loops
    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.base = np.asarray(self.base, dtype=np.float64)

    @property
    def edges(self) -> np.ndarray:
        return np.roll(self.vertices, -1, axis=0) - self.vertices

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.edges, axis=1).sum())

    @property
    def center(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def base_vertex(self) -> int:
        return int(np.argmin(np.linalg.norm(self.vertices - self.base, axis=1)))

    def with_vertices(self, vertices) -> "CagingLoop":
        return replace(self, vertices=vertices, voxels=None, scores=dict(self.scores))


@numba.njit(cache=True)
def _signs_kernel(voxels, dist, labels, dims, mirror):
    nx, ny, nz = dims[0], dims[1], dims[2]
    bits = np.zeros(voxels.shape[0], dtype=np.int64)
    valid = np.zeros(voxels.shape[0], dtype=np.bool_)
    lower = np.zeros(6, dtype=np.bool_)
    wall = np.zeros(6, dtype=np.bool_)
    for c in range(voxels.shape[0]):
        q = voxels[c]
        i, j, k = q % nx, (q // nx) % ny, q // (nx * ny)
        d0 = dist[q]
        if i == 0 or j == 0 or k == 0 or i == nx - 1 or j == ny - 1 or k == nz - 1 or not np.isfinite(d0):
            continue
        ok = True
        for f in range(6):
            step = 1 if f % 2 else -1
            axis = f // 2
            v = q + step * (1 if axis == 0 else (nx if axis == 1 else nx * ny))
            wall[f] = labels[v] != 3
            dv = dist[v]
            if not wall[f] and not np.isfinite(dv):
                ok = False
            # ties are broken by voxel index: the lower index counts as smaller
            lower[f] = not wall[f] and (dv < d0 or (dv == d0 and v < q))
        b = 0
        for f in range(6):
            low = lower[f]
            if mirror and wall[f]:
                o = f ^ 1
                low = not wall[o] and lower[o]
            if low:
                b |= 1 << f
        bits[c] = b
        valid[c] = ok
    return bits, valid


def _signs(field, grid, voxels, walls="mirror"):
    """Sign bits per voxel plus a mask of voxels that can be classified at all.

    With ``walls="ascend"`` every non-GRASPING neighbor is '+'. With
    ``walls="mirror"`` a non-GRASPING neighbor copies the sign of the opposite
    neighbor when that one is GRASPING (an axis with walls on both sides is
    '++'), so a field rising into a wall reads as a maximum along that axis.
    Voxels on the grid border, or next to an unvisited GRASPING voxel, are
    not classifiable.
    """
    if walls not in ("mirror", "ascend"):
        raise ValueError(f"walls must be 'mirror' or 'ascend', got {walls!r}")
    voxels = np.ascontiguousarray(voxels, dtype=np.int64)
    return _signs_kernel(voxels, field.dist, grid.labels, np.array(grid.dims, dtype=np.int64), walls == "mirror")


def classify(field: DistanceField, grid: VoxelGrid, voxel: int, walls: str = "mirror") -> CriticalPoint:
    """Classify one voxel. Voxels on the grid border or next to an unvisited
    GRASPING voxel are REGULAR; see ``_signs`` for how walls are read."""
    bits, valid = _signs(field, grid, [voxel], walls)
    signs = int(bits[0])
    kind = _KIND_TABLE[signs][0] if valid[0] else Kind.REGULAR
    return CriticalPoint(int(voxel), kind, signs, float(field.dist[voxel]))


def _critical_arrays(field, grid, walls="mirror"):
    voxels = np.flatnonzero(np.isfinite(field.dist))
    bits, valid = _signs(field, grid, voxels, walls)
    hits = np.flatnonzero(valid & (_KIND_CODE[bits] > 0))
    return voxels[hits], bits[hits]


def _point(field, voxel, bits):
    return CriticalPoint(int(voxel), _KIND_TABLE[bits][0], int(bits), float(field.dist[voxel]))


def find_critical_points(field: DistanceField, grid: VoxelGrid, walls: str = "mirror") -> list[CriticalPoint]:
    """All SADDLE and MAXIMUM voxels with finite distance, by ascending index."""
    voxels, bits = _critical_arrays(field, grid, walls)
    return [_point(field, v, b) for v, b in zip(voxels, bits)]


_CUBE = np.array([(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                  if (dx, dy, dz) != (0, 0, 0)], dtype=np.int64)
_CUBE_LEN = np.sqrt((_CUBE ** 2).sum(axis=1).astype(np.float64))

DEPARTURE_RADIUS = 3.0  # voxels


@numba.njit(cache=True)
def _best_pairs(qs, allowed, dist, labels, dims, branch, dep, base, cube, cube_len, spacing):
    nx, ny, nz = dims[0], dims[1], dims[2]
    n = qs.shape[0]
    out_a = np.full(n, -1, dtype=np.int64)
    out_b = np.full(n, -1, dtype=np.int64)
    out_axis = np.full(n, -1, dtype=np.int64)
    out_len = np.full(n, np.inf)
    bi, bj, bk = base % nx, (base // nx) % ny, base // (nx * ny)
    nbr = np.empty(26, dtype=np.int64)
    slot = np.empty(26, dtype=np.int64)
    vec = np.empty((26, 3), dtype=np.int64)
    for c in range(n):
        q = qs[c]
        i, j, k = q % nx, (q // nx) % ny, q // (nx * ny)
        dq = dist[q]
        m = 0
        for t in range(26):
            ii, jj, kk = i + cube[t, 0], j + cube[t, 1], k + cube[t, 2]
            if ii < 0 or jj < 0 or kk < 0 or ii >= nx or jj >= ny or kk >= nz:
                continue
            v = ii + nx * (jj + ny * kk)
            dv = dist[v]
            if labels[v] != 3 or not np.isfinite(dv):
                continue
            if dv < dq or (dv == dq and v < q):
                d = dep[v]
                nbr[m] = v
                slot[m] = t
                vec[m, 0] = d % nx - bi
                vec[m, 1] = (d // nx) % ny - bj
                vec[m, 2] = d // (nx * ny) - bk
                m += 1
        for s in range(m):
            a = nbr[s]
            for u in range(m):
                b = nbr[u]
                if branch[a] == branch[b]:
                    continue
                if vec[s, 0] * vec[u, 0] + vec[s, 1] * vec[u, 1] + vec[s, 2] * vec[u, 2] >= 0:
                    continue
                axis = -1
                for x in range(3):
                    if allowed[c, x] and cube[slot[s], x] < 0 and cube[slot[u], x] > 0:
                        axis = x
                        break
                if axis < 0:
                    continue
                total = dist[a] + dist[b] + spacing * (cube_len[slot[s]] + cube_len[slot[u]])
                if total < out_len[c]:
                    out_len[c] = total
                    out_a[c] = a
                    out_b[c] = b
                    out_axis[c] = axis
    return out_a, out_b, out_axis, out_len


def best_pairs(field: DistanceField, grid: VoxelGrid, points, allowed=None):
    """For each critical point, the two lower 26-neighbors ``(a, b)`` on the
    negative and positive side of one of its descending axes whose shortest
    paths close the shortest loop while leaving the base more than 90 degrees
    apart and meeting only there. Returns arrays ``a, b, axis, length``, with
    ``a = -1`` and ``length = inf`` where no such pair exists.

    ``points`` is a list of CriticalPoint or a ``(voxels, sign bits)`` pair.
    """
    if isinstance(points, tuple):
        qs, bits = points
    else:
        qs = np.array([c.voxel for c in points], dtype=np.int64)
        bits = np.array([c.signs for c in points], dtype=np.int64)
    if allowed is None:
        allowed = _LOOP_AXES[bits]
    return _best_pairs(
        qs, np.ascontiguousarray(allowed, dtype=np.bool_), field.dist, grid.labels,
        np.array(grid.dims, dtype=np.int64), field.branch,
        field.departure(DEPARTURE_RADIUS * grid.spacing), field.base, _CUBE, _CUBE_LEN, grid.spacing)


def descent_axes(q: CriticalPoint) -> tuple[int, ...]:
    """Axes a loop may leave ``q`` along: every '--' axis of a saddle, any
    axis of a maximum."""
    if q.kind is Kind.SADDLE:
        return q.pairs
    if q.kind is Kind.MAXIMUM:
        return (0, 1, 2)
    raise ValueError(f"{q.kind.value} voxels do not define loops")


def _close_loop(field, grid, q, a, b, axis):
    path1 = field.path_to_base(a)
    path2 = field.path_to_base(b)
    voxels = np.array(path1[::-1] + [q.voxel] + path2[:-1], dtype=np.int64)
    if len(voxels) < MIN_LOOP_VERTICES:
        raise DegenerateLoop(f"loop has only {len(voxels)} vertices")
    vertices = grid.center(voxels)
    return CagingLoop(vertices, vertices[0].copy(), q, field.base, int(axis), voxels)


def trace_loop(field: DistanceField, grid: VoxelGrid, q: CriticalPoint, axis: int | None = None) -> CagingLoop:
    """Join two shortest paths leaving ``q`` on opposite sides of ``axis``
    (any descending axis when None).

    The result runs base -> ... -> q -> ... -> back toward the base, with the
    base as vertex 0. Raises DegenerateLoop when every candidate pair of paths
    merges before the base or the loop is too short to enclose anything.
    """
    axes = descent_axes(q)
    if axis is not None and axis not in axes:
        raise ValueError(f"axis {axis} is not a descending axis of {q}")
    allowed = np.zeros((1, 3), dtype=np.bool_)
    allowed[0, list(axes) if axis is None else [axis]] = True
    a, b, ax, _ = best_pairs(field, grid, [q], allowed)
    if a[0] < 0:
        raise DegenerateLoop("the shortest paths leaving the critical voxel merge before the base point")
    return _close_loop(field, grid, q, int(a[0]), int(b[0]), ax[0])


def trace_loops(field: DistanceField, grid: VoxelGrid, q: CriticalPoint) -> tuple[list[CagingLoop], int]:
    """One loop per descending axis of ``q``, plus the number of degenerate traces."""
    loops, degenerate = [], 0
    for axis in descent_axes(q):
        try:
            loops.append(trace_loop(field, grid, q, axis))
        except DegenerateLoop:
            degenerate += 1
    return loops, degenerate


class TraceResult(NamedTuple):
    loops: list
    critical: int  # SADDLE and MAXIMUM voxels found
    degenerate: int  # critical voxels whose paths merge before the base
    ridge: int  # loop-defining voxels superseded by a shorter neighbor


def trace_base(field: DistanceField, grid: VoxelGrid) -> TraceResult:
    """All loops one distance field yields.

    Loop-defining critical voxels that touch each other form ridges where two
    wavefronts meet; only the voxel closing the shortest loop on each ridge
    is traced, which is the discrete saddle along the ridge.
    """
    voxels, bits = _critical_arrays(field, grid)
    if len(voxels) == 0:
        return TraceResult([], 0, 0, 0)
    a, b, axis, length = best_pairs(field, grid, (voxels, bits))
    good = np.flatnonzero(a >= 0)
    degenerate = len(voxels) - len(good)
    if len(good) == 0:
        return TraceResult([], len(voxels), degenerate, 0)
    xyz = grid.ijk(voxels[good])
    pairs = cKDTree(xyz).query_pairs(1.8, output_type="ndarray")
    adj = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(good), len(good)))
    _, comp = connected_components(adj, directed=False)
    # shortest loop per ridge, ties by voxel index (points are index-sorted)
    order = np.lexsort((good, length[good], comp))
    first = order[np.r_[True, comp[order][1:] != comp[order][:-1]]]
    loops = []
    for g in sorted(good[first]):
        try:
            q = _point(field, voxels[g], bits[g])
            loops.append(_close_loop(field, grid, q, int(a[g]), int(b[g]), axis[g]))
        except DegenerateLoop:
            degenerate += 1
    return TraceResult(loops, len(voxels), degenerate, len(good) - len(first))
