"""Local differential estimates on point clouds: normals and principal curvatures."""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .errors import BadParams
from .shapes import PointCloud, SurfaceSamplePoint


def _orient_by_mst(points, normals, neighbors):
    """Propagate a consistent sign through the k-NN graph along its minimum
    spanning tree, then flip so most normals face away from the centroid."""
    n, k = neighbors.shape
    rows = np.repeat(np.arange(n), k)
    cols = neighbors.ravel()
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    # small floor keeps parallel-normal edges from vanishing as explicit zeros
    w = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-9
    graph = coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)
    tree = minimum_spanning_tree(graph)
    tree = tree + tree.T

    out = normals.copy()
    centroid = points.mean(axis=0)
    radial = np.linalg.norm(points - centroid, axis=1)
    _, comp = connected_components(tree, directed=False)
    for c in np.unique(comp):
        members = np.flatnonzero(comp == c)
        root = members[np.argmax(radial[members])]
        if np.dot(out[root], points[root] - centroid) < 0:
            out[root] = -out[root]
        order, parent = breadth_first_order(tree, root, directed=False)
        for node in order[1:]:
            if np.dot(out[node], out[parent[node]]) < 0:
                out[node] = -out[node]
    outward = np.einsum("ij,ij->i", out, points - centroid)
    if np.sum(outward < 0) > np.sum(outward > 0):
        out = -out
    return out


def estimate_normals(points, k: int = 12) -> np.ndarray:
    """Unit normals from a PCA plane fit over ``k`` nearest neighbors,
    consistently oriented and pointing outward for the majority."""
    points = np.asarray(points, dtype=np.float64)
    k = min(k, len(points))
    _, nbr = cKDTree(points).query(points, k=k)
    local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    return _orient_by_mst(points, normals, nbr)


def smooth_points(cloud: PointCloud, k: int = 20, iters: int = 3, normal_k: int = 12) -> PointCloud:
    """Denoise by repeatedly moving each point onto a quadric height field
    fitted to its ``k`` nearest neighbors, then re-estimate normals.

    Meant for heavily noisy scans before the interpolating RBF fit, which
    otherwise reproduces the noise. A quadric rather than a plane keeps thin
    curved parts from shrinking. Points that coincide afterwards are merged.
    """
    if k < 6 or iters < 0:
        raise BadParams(f"smoothing needs k >= 6 and iters >= 0, got k={k}, iters={iters}")
    if iters == 0:
        return cloud
    p = cloud.points.copy()
    k = min(k, len(p))
    for _ in range(iters):
        _, nbr = cKDTree(p).query(p, k=k)
        mu = p[nbr].mean(axis=1)
        local = p[nbr] - mu[:, None, :]
        _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", local, local))
        n, e2, e1 = vecs[:, :, 0], vecs[:, :, 1], vecs[:, :, 2]
        u = np.einsum("nki,ni->nk", local, e1)
        v = np.einsum("nki,ni->nk", local, e2)
        w = np.einsum("nki,ni->nk", local, n)
        A = np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=-1)
        AtA = np.einsum("nki,nkj->nij", A, A) + 1e-12 * np.eye(6)
        c = np.linalg.solve(AtA, np.einsum("nki,nk->ni", A, w)[..., None])[..., 0]
        pu = np.einsum("ni,ni->n", p - mu, e1)
        pv = np.einsum("ni,ni->n", p - mu, e2)
        height = c[:, 0] + c[:, 1] * pu + c[:, 2] * pv + c[:, 3] * pu * pu + c[:, 4] * pu * pv + c[:, 5] * pv * pv
        p = mu + pu[:, None] * e1 + pv[:, None] * e2 + height[:, None] * n
    _, first = np.unique(np.round(p / max(cloud.diagonal, 1e-300), 9), axis=0, return_index=True)
    p = p[np.sort(first)]
    return PointCloud(p, estimate_normals(p, k=normal_k))


def _tangent_frames(normals):
    # any vector not parallel to n gives a stable first tangent
    helper = np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    u = np.cross(normals, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normals, u)
    return u, v


def principal_curvatures(points, normals, queries=None, query_normals=None, k: int = 20) -> np.ndarray:
    """Principal curvatures ``(k1, k2)`` with ``k1 >= k2`` per query point.

    A quadric height field ``h(u, v)`` is least-squares fitted in the tangent
    frame of each query, with the height measured along the outward normal.
    Convex regions therefore get negative curvature. Rank-deficient
    neighborhoods yield ``(0, 0)``.
    """
    if k < 6:
        raise BadParams(f"need k >= 6 neighbors for a quadric fit, got {k}")
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if queries is None:
        queries, query_normals = points, normals
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    query_normals = np.atleast_2d(np.asarray(query_normals, dtype=np.float64))
    k = min(k, len(points))

    _, nbr = cKDTree(points).query(queries, k=k)
    u, v = _tangent_frames(query_normals)
    d = points[nbr] - queries[:, None, :]
    pu = np.einsum("nkj,nj->nk", d, u)
    pv = np.einsum("nkj,nj->nk", d, v)
    ph = np.einsum("nkj,nj->nk", d, query_normals)

    scale = np.sqrt(np.mean(pu ** 2 + pv ** 2, axis=1, keepdims=True))
    scale = np.where(scale > 0, scale, 1.0)
    su, sv = pu / scale, pv / scale
    design = np.stack([su * su, su * sv, sv * sv, su, sv, np.ones_like(su)], axis=2)
    U, s, Vt = np.linalg.svd(design, full_matrices=False)
    ok = s[:, -1] > 1e-8 * s[:, 0]
    s_inv = np.where(s > 1e-12 * s[:, :1], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    coef = np.einsum("nji,nj,nkj,nk->ni", Vt, s_inv, U, ph)

    sc = scale[:, 0]
    a, b, c = coef[:, 0] / sc ** 2, coef[:, 1] / sc ** 2, coef[:, 2] / sc ** 2
    hu, hv = coef[:, 3] / sc, coef[:, 4] / sc
    E, F, G = 1 + hu ** 2, hu * hv, 1 + hv ** 2
    W = np.sqrt(1 + hu ** 2 + hv ** 2)
    L, M, N = 2 * a / W, b / W, 2 * c / W
    # eigenvalues of the shape operator I^-1 II
    det_i = E * G - F ** 2
    mean = (E * N - 2 * F * M + G * L) / (2 * det_i)
    gauss = (L * N - M ** 2) / det_i
    disc = np.sqrt(np.maximum(mean ** 2 - gauss, 0.0))
    out = np.stack([mean + disc, mean - disc], axis=1)
    out[~ok] = 0.0
    return out


def estimate_curvatures(cloud: PointCloud, k: int = 20) -> list[SurfaceSamplePoint]:
    curv = principal_curvatures(cloud.points, cloud.normals, k=k)
    return [
        SurfaceSamplePoint(p, n, float(k1), float(k2))
        for p, n, (k1, k2) in zip(cloud.points, cloud.normals, curv)
    ]
