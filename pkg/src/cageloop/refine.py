"""Loop relaxation, filters, de-duplication and ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np
from scipy import ndimage

from .errors import CollapsedLoop, CollinearLoop
from .grid import Label, VoxelGrid
from .morse import CagingLoop
from .pose import GRAVITY, GripperSpec, fit_plane

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.4, 0.3, 0.2, 0.1)


PUSH_STEPS = 8  # quarter-voxel steps tried when pushing a move out of BAND


@numba.njit(cache=True)
def _voxel(x, y, z, origin, spacing, nx, ny, nz):
    fi = (x - origin[0]) / spacing
    fj = (y - origin[1]) / spacing
    fk = (z - origin[2]) / spacing
    if not (fi >= 0 and fj >= 0 and fk >= 0 and fi < nx and fj < ny and fk < nz):
        return -1
    return int(fi) + nx * (int(fj) + ny * int(fk))


@numba.njit(cache=True)
def _free(x, y, z, labels, origin, spacing, nx, ny, nz):
    v = _voxel(x, y, z, origin, spacing, nx, ny, nz)
    return v >= 0 and labels[v] == 3


@numba.njit(cache=True)
def _dist(x, y, z, p):
    return np.sqrt((x - p[0]) ** 2 + (y - p[1]) ** 2 + (z - p[2]) ** 2)


@numba.njit(cache=True)
def _loop_length(v):
    n = v.shape[0]
    total = 0.0
    for i in range(n):
        j = (i + 1) % n
        dx = v[j, 0] - v[i, 0]
        dy = v[j, 1] - v[i, 1]
        dz = v[j, 2] - v[i, 2]
        total += np.sqrt(dx * dx + dy * dy + dz * dz)
    return total


@numba.njit(cache=True)
def _sweeps(v, movable, labels, outward, origin, spacing, dims, iters, step, tol, lengths):
    """Gauss-Seidel midpoint moves; returns the number of sweeps done.

    Moving one vertex toward the midpoint of its neighbors never lengthens
    the two edges it touches. A move that lands in BAND is pushed back out
    along the outward direction there, and kept only if it is free and the
    two edges still do not grow, so the length never increases.
    """
    n = v.shape[0]
    nx, ny, nz = dims[0], dims[1], dims[2]
    prev = _loop_length(v)
    for it in range(iters):
        for i in range(n):
            if not movable[i]:
                continue
            a = (i - 1) % n
            b = (i + 1) % n
            x = v[i, 0] + step * (0.5 * (v[a, 0] + v[b, 0]) - v[i, 0])
            y = v[i, 1] + step * (0.5 * (v[a, 1] + v[b, 1]) - v[i, 1])
            z = v[i, 2] + step * (0.5 * (v[a, 2] + v[b, 2]) - v[i, 2])
            cell = _voxel(x, y, z, origin, spacing, nx, ny, nz)
            if cell < 0:
                continue
            if labels[cell] == 2:
                old = _dist(v[i, 0], v[i, 1], v[i, 2], v[a]) + _dist(v[i, 0], v[i, 1], v[i, 2], v[b])
                ox, oy, oz = outward[cell, 0], outward[cell, 1], outward[cell, 2]
                pushed = False
                for k in range(1, PUSH_STEPS + 1):
                    px = x + 0.25 * k * spacing * ox
                    py = y + 0.25 * k * spacing * oy
                    pz = z + 0.25 * k * spacing * oz
                    if _free(px, py, pz, labels, origin, spacing, nx, ny, nz):
                        if _dist(px, py, pz, v[a]) + _dist(px, py, pz, v[b]) <= old:
                            x, y, z = px, py, pz
                            pushed = True
                        break
                if not pushed:
                    continue
            elif labels[cell] != 3:
                continue
            v[i, 0] = x
            v[i, 1] = y
            v[i, 2] = z
        cur = _loop_length(v)
        lengths[it] = cur
        if prev - cur < tol:
            return it + 1
        prev = cur
    return iters


@numba.njit(cache=True)
def _resample(v, target, labels, origin, spacing, dims):
    """Redistribute vertices along the closed polyline about ``target`` apart.

    New vertices lie on the old polyline in order, so the length cannot grow;
    one that lands in a blocked voxel snaps to the nearer of the two old
    vertices around it, which keeps the order.
    """
    n = v.shape[0]
    nx, ny, nz = dims[0], dims[1], dims[2]
    seg = np.empty(n)
    cum = np.empty(n + 1)
    cum[0] = 0.0
    for i in range(n):
        j = (i + 1) % n
        seg[i] = np.sqrt((v[j, 0] - v[i, 0]) ** 2 + (v[j, 1] - v[i, 1]) ** 2 + (v[j, 2] - v[i, 2]) ** 2)
        cum[i + 1] = cum[i] + seg[i]
    total = cum[n]
    m = max(8, int(round(total / target)))
    if total <= 0 or m >= 4 * n:
        return v
    out = np.empty((m, 3))
    kept = 0
    k = 0
    for s in range(m):
        u = total * s / m
        while k < n - 1 and cum[k + 1] <= u:
            k += 1
        j = (k + 1) % n
        frac = (u - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        x = v[k, 0] + frac * (v[j, 0] - v[k, 0])
        y = v[k, 1] + frac * (v[j, 1] - v[k, 1])
        z = v[k, 2] + frac * (v[j, 2] - v[k, 2])
        if not _free(x, y, z, labels, origin, spacing, nx, ny, nz):
            src = k if frac <= 0.5 else j
            x, y, z = v[src, 0], v[src, 1], v[src, 2]
        if kept > 0 and out[kept - 1, 0] == x and out[kept - 1, 1] == y and out[kept - 1, 2] == z:
            continue
        out[kept, 0] = x
        out[kept, 1] = y
        out[kept, 2] = z
        kept += 1
    if kept > 1 and out[0, 0] == out[kept - 1, 0] and out[0, 1] == out[kept - 1, 1] and out[0, 2] == out[kept - 1, 2]:
        kept -= 1
    if kept < 3:
        return v
    return out[:kept].copy()


@numba.njit(cache=True)
def _relax(v, movable, fixed_mask, labels, outward, origin, spacing, dims, iters, step, tol, resample_every):
    history = np.empty(iters)
    done = 0
    chunk = iters if fixed_mask or resample_every <= 0 else resample_every
    while done < iters:
        todo = min(chunk, iters - done)
        mask = movable if fixed_mask else np.ones(v.shape[0], dtype=np.bool_)
        lengths = np.empty(todo)
        ran = _sweeps(v, mask, labels, outward, origin, spacing, dims, todo, step, tol, lengths)
        history[done:done + ran] = lengths[:ran]
        done += ran
        if ran < todo:
            break
        if not fixed_mask and done < iters:
            v = _resample(v, spacing, labels, origin, spacing, dims)
    return v, history[:done]


def relax_vertices(vertices, grid: VoxelGrid, iters: int = 200, step: float = 0.5, resample_every: int = 20,
                   tol: float | None = None, movable=None) -> tuple[np.ndarray, np.ndarray]:
    """Shorten a closed polyline inside the GRASPING voxels.

    Vertices that would enter BAND are pushed back out (see ``_sweeps``), so
    loops can still slide along a thin shell of free voxels.

    Returns the new vertices and the loop length after every sweep. With
    ``movable`` given, only those vertices move and no resampling happens.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    v = np.array(vertices, dtype=np.float64)
    tol = 1e-4 * grid.spacing if tol is None else tol
    fixed_mask = movable is not None
    mask = np.asarray(movable, dtype=np.bool_) if fixed_mask else np.ones(len(v), dtype=np.bool_)
    return _relax(v, mask, fixed_mask, grid.labels, grid.outward, np.asarray(grid.origin, dtype=np.float64),
                  float(grid.spacing), np.array(grid.dims, dtype=np.int64), int(iters), float(step), float(tol),
                  int(resample_every))


def relax_loop(loop: CagingLoop, grid: VoxelGrid, iters: int = 200, step: float = 0.5,
               resample_every: int = 20) -> CagingLoop:
    """Relaxed copy of ``loop``; the base point is not pinned.

    Raises CollapsedLoop when the result is shorter than four voxel spacings.
    """
    v, history = relax_vertices(loop.vertices, grid, iters, step, resample_every)
    out = loop.with_vertices(v)
    out.scores["relax_sweeps"] = len(history)
    if out.length < 4 * grid.spacing:
        raise CollapsedLoop(f"loop shrank to {out.length:.4g} m, below four voxel spacings")
    return out


def filter_length(loop: CagingLoop, gripper: GripperSpec) -> bool:
    """Keep loops a gripper of stretch 2h can span: length < 4h."""
    return loop.length < 4 * gripper.h


def local_shortest_residual(loop: CagingLoop, grid: VoxelGrid, iters: int = 50, window: float = 0.10,
                            step: float = 0.5) -> float:
    """Relative length reduction from extra relaxation near the base.

    Only the vertices within ``window`` of the arclength, centered on the
    vertex nearest the base point, are moved.
    """
    v = loop.vertices
    seg = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
    total = seg.sum()
    if total <= 0:
        return 0.0
    cum = np.concatenate([[0.0], np.cumsum(seg[:-1])])
    k = loop.base_vertex()
    gap = np.abs(cum - cum[k])
    gap = np.minimum(gap, total - gap)
    movable = gap <= window * total / 2
    relaxed, _ = relax_vertices(v, grid, iters, step, resample_every=0, tol=0.0, movable=movable)
    return float((total - CagingLoop(relaxed, loop.base).length) / total)


def filter_local_shortest_at_base(loop: CagingLoop, grid: VoxelGrid, residual_max: float = 0.02,
                                  iters: int = 50, window: float = 0.10) -> tuple[float, bool]:
    residual = local_shortest_residual(loop, grid, iters, window)
    return residual, residual < residual_max


@numba.njit(cache=True)
def _directed_hausdorff(a, b, stop):
    worst = 0.0
    for i in range(a.shape[0]):
        best = np.inf
        for j in range(b.shape[0]):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                if best <= worst:
                    break
        if best > worst:
            worst = best
            if worst >= stop:
                return np.sqrt(worst)
    return np.sqrt(worst)


def hausdorff(a, b, stop: float = np.inf) -> float:
    """Symmetric Hausdorff distance between two vertex sets. Once the answer
    is known to reach ``stop`` the search may return early with a value
    that still reaches it."""
    a = np.ascontiguousarray(a.vertices if isinstance(a, CagingLoop) else a, dtype=np.float64)
    b = np.ascontiguousarray(b.vertices if isinstance(b, CagingLoop) else b, dtype=np.float64)
    s = stop * stop
    d1 = _directed_hausdorff(a, b, s)
    if d1 >= stop:
        return d1
    return max(d1, _directed_hausdorff(b, a, s))


@dataclass
class LoopCandidateSet:
    loops: list = field(default_factory=list)
    provenance: list = field(default_factory=list)  # (base voxel, critical voxel) per loop
    ranking: list = field(default_factory=list)  # loop indices, best first

    def __len__(self):
        return len(self.loops)

    def ranked(self) -> list:
        return [self.loops[i] for i in self.ranking]


def _provenance(loop):
    return (int(loop.base_voxel), int(loop.source.voxel) if loop.source is not None else -1)


def dedup(loops, tau: float, order=None) -> LoopCandidateSet:
    """Greedy de-duplication: walk ``loops`` in ``order`` (e.g. by score) and
    drop any loop within Hausdorff distance ``tau`` of one already kept."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    loops = list(loops)
    order = range(len(loops)) if order is None else order
    kept = []
    lows = np.empty((len(loops), 3))
    highs = np.empty((len(loops), 3))
    for i in order:
        loop = loops[i]
        lo, hi = loop.vertices.min(axis=0), loop.vertices.max(axis=0)
        # Hausdorff < tau needs the bounding boxes to agree within tau
        m = len(kept)
        near = np.flatnonzero(np.all(np.abs(lows[:m] - lo) < tau, axis=1) & np.all(np.abs(highs[:m] - hi) < tau, axis=1))
        if any(hausdorff(loop, loops[kept[j]], stop=tau) < tau for j in near):
            continue
        lows[m], highs[m] = lo, hi
        kept.append(i)
    out = [loops[i] for i in kept]
    return LoopCandidateSet(out, [_provenance(l) for l in out], list(range(len(out))))


def score_loop(loop: CagingLoop, h: float, centroid, bbox_diagonal: float, gravity=GRAVITY,
               weights=DEFAULT_WEIGHTS) -> dict:
    """Score terms (lower is better) and their weighted sum, stored on the loop."""
    g = np.asarray(gravity, dtype=np.float64)
    g = g / np.linalg.norm(g)
    try:
        n, _ = fit_plane(loop, g)
        horizontal = 1.0 - abs(float(np.dot(n, g)))
    except CollinearLoop:
        horizontal = 1.0
    terms = {
        "centroid": float(np.linalg.norm(loop.center - np.asarray(centroid)) / bbox_diagonal),
        "horizontal": horizontal,
        "length": loop.length / (4 * h),
        "residual": float(loop.scores.get("residual", 0.0)),
    }
    terms["score"] = float(np.dot(weights, [terms["centroid"], terms["horizontal"], terms["length"],
                                           terms["residual"]]))
    loop.scores.update(terms)
    return terms


def rank(candidates: LoopCandidateSet, grid: VoxelGrid, h: float, gravity=GRAVITY,
         weights=DEFAULT_WEIGHTS, centroid=None) -> LoopCandidateSet:
    """Order loops by weighted score, ties by length then provenance."""
    from .grid import centroid_of_object

    if centroid is None:
        centroid = centroid_of_object(grid)
    diag = grid.object_bbox_diagonal()
    for loop in candidates.loops:
        score_loop(loop, h, centroid, diag, gravity, weights)
    keys = [(l.scores["score"], l.length, candidates.provenance[i]) for i, l in enumerate(candidates.loops)]
    ranking = sorted(range(len(keys)), key=lambda i: keys[i])
    return LoopCandidateSet(candidates.loops, candidates.provenance, ranking)


def contact_count(loop: CagingLoop, grid: VoxelGrid, reach: float = 1.5) -> int:
    """Vertices within ``reach`` voxel diagonals of the offset surface."""
    tree = grid.band_tree
    if tree is None:
        return 0
    d, _ = tree.query(loop.vertices, distance_upper_bound=reach * np.sqrt(3) * grid.spacing)
    return int(np.isfinite(d).sum())


def check_contacts(loop: CagingLoop, grid: VoxelGrid) -> bool:
    """Three-contact diagnostic; logs a warning instead of rejecting."""
    count = contact_count(loop, grid)
    if count < 3:
        log.warning("loop of length %.4g touches the offset surface at only %d vertices", loop.length, count)
    return count >= 3


class DiscComponent(NamedTuple):
    size: int  # OBJECT voxels of the component in the plane slab
    inside: float  # fraction of them enclosed by the loop
    centroid: np.ndarray  # mean voxel center of the component


def _inside_polygon(pts, poly):
    """Even-odd test of 2D points against a closed polygon."""
    x, y = pts[:, 0:1], pts[:, 1:2]
    x0, y0 = poly[:, 0][None, :], poly[:, 1][None, :]
    x1, y1 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    crosses = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return (np.count_nonzero(crosses & (x < xi), axis=1) % 2) == 1


def disc_components(loop: CagingLoop, grid: VoxelGrid) -> list[DiscComponent]:
    """Which parts of the object the loop's spanning disc cuts through.

    OBJECT voxels within half a voxel diagonal of the fitted plane are split
    into 26-connected components, and each component reports the fraction of
    its voxels whose projection falls inside the projected loop.
    """
    n, b = fit_plane(loop)
    obj = np.flatnonzero(grid.labels == Label.OBJECT)
    c = grid.center(obj)
    near = np.abs(c @ n - b) <= np.sqrt(3) / 2 * grid.spacing
    obj, c = obj[near], c[near]
    if len(obj) == 0:
        return []
    mask = np.zeros(grid.dims, dtype=bool)
    mask[tuple(grid.ijk(obj).T)] = True
    comp, count = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    ids = comp[tuple(grid.ijk(obj).T)]
    u = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    poly = np.stack([loop.vertices @ u, loop.vertices @ w], axis=1)
    inside = _inside_polygon(np.stack([c @ u, c @ w], axis=1), poly)
    out = []
    for k in range(1, count + 1):
        sel = ids == k
        out.append(DiscComponent(int(sel.sum()), float(inside[sel].mean()), c[sel].mean(axis=0)))
    return out


def enclosed_components(loop: CagingLoop, grid: VoxelGrid, threshold: float = 0.5) -> tuple[int, int]:
    """(components mostly inside the loop, components cut by the plane)."""
    comps = disc_components(loop, grid)
    return sum(c.inside >= threshold for c in comps), len(comps)
