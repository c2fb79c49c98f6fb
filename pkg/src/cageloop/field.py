"""Base-point distance fields over the grasping voxels.

Distances are exact shortest paths on the voxel graph restricted to GRASPING
voxels, with Euclidean edge weights between neighboring voxel centers. The
sweep is truncated at a cap: voxels farther than the cap stay at infinity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numba
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from .errors import BaseNotInGraspingSpace
from .grid import Label, VoxelGrid

NO_PRED = -1


def neighbor_offsets(connectivity: int = 26) -> np.ndarray:
    """Half of the symmetric neighbor stencil (each undirected edge once)."""
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    out = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                step = (dx, dy, dz)
                order = abs(dx) + abs(dy) + abs(dz)
                if order == 0 or order > {6: 1, 18: 2, 26: 3}[connectivity]:
                    continue
                if step > (0, 0, 0):
                    out.append(step)
    return np.array(out, dtype=np.int64)


@dataclass(eq=False)
class VoxelGraph:
    """Sparse adjacency over GRASPING voxels (compact node numbering)."""

    matrix: sparse.csr_matrix
    node_voxel: np.ndarray  # node -> flat voxel index
    voxel_node: np.ndarray  # flat voxel index -> node, -1 if not GRASPING
    connectivity: int


def grasping_graph(grid: VoxelGrid, connectivity: int = 26) -> VoxelGraph:
    cache = grid.__dict__.setdefault("_graphs", {})
    if connectivity in cache:
        return cache[connectivity]
    nodes = grid.grasping_index
    voxel_node = np.full(grid.n_voxels, -1, dtype=np.int64)
    voxel_node[nodes] = np.arange(len(nodes))
    ijk = grid.ijk(nodes)
    dims = np.array(grid.dims)
    rows, cols, weights = [], [], []
    for step in neighbor_offsets(connectivity):
        nb = ijk + step
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        target = voxel_node[grid.flat(nb[ok])]
        ok_nodes = np.flatnonzero(ok)[target >= 0]
        target = target[target >= 0]
        rows.append(ok_nodes)
        cols.append(target)
        weights.append(np.full(len(target), grid.spacing * np.sqrt(float(step @ step))))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    w = np.concatenate(weights)
    n = len(nodes)
    matrix = sparse.csr_matrix((np.concatenate([w, w]), (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n))
    graph = VoxelGraph(matrix, nodes, voxel_node, connectivity)
    cache[connectivity] = graph
    return graph


@dataclass(eq=False)
class DistanceField:
    base: int  # flat voxel index of the base point
    dist: np.ndarray  # per voxel, inf where unvisited or not GRASPING
    pred: np.ndarray  # per voxel predecessor voxel, NO_PRED at base / unvisited
    cap: float

    def path_to_base(self, voxel: int) -> list[int]:
        """Voxel indices from ``voxel`` back to the base along predecessors."""
        path = [int(voxel)]
        while path[-1] != self.base:
            nxt = int(self.pred[path[-1]])
            if nxt == NO_PRED:
                raise ValueError(f"voxel {voxel} is not connected to the base")
            path.append(nxt)
        return path

    @cached_property
    def order(self) -> np.ndarray:
        """Visited voxels by ascending distance (each after its predecessor)."""
        order = np.flatnonzero(np.isfinite(self.dist))
        return order[np.argsort(self.dist[order], kind="stable")]

    @cached_property
    def branch(self) -> np.ndarray:
        """First voxel after the base on each voxel's predecessor path (the
        base maps to itself, unvisited voxels to NO_PRED). Two paths share
        nothing but the base exactly when their branches differ."""
        return _branches(self.order, self.pred, self.base, len(self.dist))

    def departure(self, rho: float) -> np.ndarray:
        """Per voxel, the ancestor whose distance first reaches ``rho`` on
        the way out from the base (voxels closer than ``rho`` map to
        themselves). It marks the direction a shortest path leaves the base."""
        cache = self.__dict__.setdefault("_departure", {})
        if rho not in cache:
            cache[rho] = _departures(self.order, self.pred, self.dist, float(rho), len(self.dist))
        return cache[rho]


@numba.njit(cache=True)
def _branches(order, pred, base, n):
    out = np.full(n, NO_PRED, dtype=np.int64)
    for v in order:
        if v == base:
            out[v] = v
        elif pred[v] == base:
            out[v] = v
        else:
            out[v] = out[pred[v]]
    return out


@numba.njit(cache=True)
def _departures(order, pred, dist, rho, n):
    out = np.full(n, NO_PRED, dtype=np.int64)
    for v in order:
        u = pred[v]
        if u == NO_PRED or dist[v] < rho or dist[u] < rho:
            out[v] = v
        else:
            out[v] = out[u]
    return out


def compute_field(grid: VoxelGrid, p: int, cap: float, connectivity: int = 26) -> DistanceField:
    """Shortest-path distances from voxel ``p``, truncated at ``cap``."""
    if cap <= 0:
        raise ValueError(f"cap must be positive, got {cap}")
    p = int(p)
    if not (0 <= p < grid.n_voxels) or grid.labels[p] != Label.GRASPING:
        raise BaseNotInGraspingSpace(f"voxel {p} is not a GRASPING voxel")
    graph = grasping_graph(grid, connectivity)
    source = graph.voxel_node[p]
    d, pr = dijkstra(graph.matrix, directed=False, indices=source, return_predecessors=True, limit=cap)
    dist = np.full(grid.n_voxels, np.inf)
    dist[graph.node_voxel] = d
    pred = np.full(grid.n_voxels, NO_PRED, dtype=np.int64)
    has = pr >= 0
    pred[graph.node_voxel[has]] = graph.node_voxel[pr[has]]
    return DistanceField(p, dist, pred, float(cap))


class FieldStats(NamedTuple):
    visited: int
    max_dist: float
    frontier: int


def field_stats(field: DistanceField, grid: VoxelGrid, connectivity: int = 26) -> FieldStats:
    """Visited count, largest finite distance, and the number of visited
    voxels that still have an unvisited GRASPING neighbor."""
    finite = np.isfinite(field.dist)
    graph = grasping_graph(grid, connectivity)
    node_finite = finite[graph.node_voxel]
    m = graph.matrix.tocoo()
    touching = node_finite[m.row] & ~node_finite[m.col]
    frontier = len(np.unique(m.row[touching]))
    return FieldStats(int(finite.sum()), float(field.dist[finite].max()), frontier)


def write_field(field: DistanceField, grid: VoxelGrid, path) -> None:
    """Debug dump in the voxel-grid layout: text header, then float64 per voxel."""
    header = (
        "cageloop-field 1\n"
        f"origin {grid.origin[0]:.17g} {grid.origin[1]:.17g} {grid.origin[2]:.17g}\n"
        f"spacing {grid.spacing:.17g}\n"
        f"dims {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n"
        f"base {field.base}\ncap {field.cap:.17g}\n"
        "data\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(field.dist.astype("<f8").tobytes())
