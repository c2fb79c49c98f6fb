"""Target-shape input: point clouds, file I/O, analytic generators and noise.

All lengths are in meters. Generated shapes carry exact analytic normals so
downstream stages can be checked against closed-form geometry.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadParams, DegenerateInput, ParseError

log = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "cylinder", "torus", "genus2", "blocky-L")

_DEFAULT_PARAMS = {
    "sphere": {"radius": 0.1},
    "cylinder": {"radius": 0.04, "height": 0.16},
    "torus": {"major": 0.08, "minor": 0.025},
    # two tori whose core circles touch at the origin
    "genus2": {"major": 0.06, "minor": 0.02},
    "blocky-L": {"length": 0.16, "width": 0.06, "depth": 0.06},
}


@dataclass(frozen=True)
class PointCloud:
    """Oriented surface samples. ``normals`` point out of the object."""

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or nrm.shape != pts.shape:
            raise DegenerateInput(
                f"points/normals must both be (n, 3), got {pts.shape} and {nrm.shape}")
        if len(pts) < 4:
            raise DegenerateInput(f"need at least 4 points, got {len(pts)}")
        if not (np.isfinite(pts).all() and np.isfinite(nrm).all()):
            raise DegenerateInput("non-finite coordinates")
        norms = np.linalg.norm(nrm, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise DegenerateInput("normals must have unit length")
        pts.setflags(write=False)
        nrm.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.points[index], self.normals[index])


@dataclass(frozen=True)
class SurfaceSamplePoint:
    position: np.ndarray
    normal: np.ndarray
    k1: float
    k2: float


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _merge_coincident(points, normals, tol=1e-9):
    """Drop points closer than ``tol`` to an earlier point."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return points, normals
    drop = np.zeros(len(points), dtype=bool)
    drop[pairs.max(axis=1)] = True
    return points[~drop], normals[~drop]


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _read_numeric_rows(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.replace(",", " ").split()])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return rows


def _load_points_file(path):
    rows = _read_numeric_rows(path)
    if not rows:
        raise DegenerateInput(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1 or widths.pop() not in (3, 6):
        raise ParseError(f"{path}: every row must hold 3 (xyz) or 6 (xyz + normal) numbers")
    data = np.asarray(rows, dtype=np.float64)
    points = data[:, :3]
    normals = data[:, 3:] if data.shape[1] == 6 else np.zeros_like(points)
    return points, normals


def _load_obj(path):
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split("#", 1)[0].split()
            if not tok:
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(t) for t in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _load_off(path):
    tokens = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tokens.extend(line.split("#", 1)[0].split())
    if not tokens:
        raise DegenerateInput(f"{path}: empty mesh")
    if tokens[0].upper() == "OFF":
        tokens = tokens[1:]
    try:
        nv, nf = int(tokens[0]), int(tokens[1])
        pos = 3
        verts = np.asarray(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            k = int(tokens[pos])
            idx = [int(t) for t in tokens[pos + 1:pos + 1 + k]]
            pos += 1 + k
            for j in range(1, k - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: malformed OFF ({exc})") from None
    return verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def mesh_vertex_normals(vertices, faces):
    """Area-weighted vertex normals from triangle winding, flipped as a whole
    when the majority points toward the centroid."""
    vertices = np.asarray(vertices, dtype=np.float64)
    normals = np.zeros_like(vertices)
    if len(faces):
        a, b, c = (vertices[faces[:, k]] for k in range(3))
        # cross product magnitude is twice the face area: area weighting for free
        fn = np.cross(b - a, c - a)
        for k in range(3):
            np.add.at(normals, faces[:, k], fn)
    lengths = np.linalg.norm(normals, axis=1)
    good = lengths > 1e-12
    normals[good] /= lengths[good, None]
    outward = np.einsum("ij,ij->i", normals[good], vertices[good] - vertices.mean(axis=0))
    if good.any() and np.sum(outward < 0) > np.sum(outward > 0):
        normals = -normals
    return normals


def load_shape(path, format: str = "oriented-points") -> PointCloud:
    """Read a point cloud from disk.

    ``format="mesh"`` accepts ASCII OBJ or OFF triangle meshes; vertex normals
    are area-weighted face normals and faces are discarded afterwards.
    ``format="oriented-points"`` reads whitespace separated rows of
    ``x y z [nx ny nz]``; missing normals are estimated from neighbors.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file")
    if format == "mesh":
        if path.suffix.lower() == ".off":
            verts, faces = _load_off(path)
        else:
            verts, faces = _load_obj(path)
        if len(verts) == 0:
            raise DegenerateInput(f"{path}: mesh has no vertices")
        if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
            raise ParseError(f"{path}: face index out of range")
        points, normals = verts, mesh_vertex_normals(verts, faces)
    elif format in ("oriented-points", "points"):
        points, normals = _load_points_file(path)
    else:
        raise ParseError(f"unknown input format {format!r}")

    points, normals = _merge_coincident(points, normals)
    if len(points) < 4:
        raise DegenerateInput(f"{path}: need at least 4 distinct points, got {len(points)}")
    lengths = np.linalg.norm(normals, axis=1)
    if np.any(lengths < 1e-12):
        from .estimation import estimate_normals

        estimated = estimate_normals(points)
        missing = lengths < 1e-12
        normals = np.where(missing[:, None], estimated, normals)
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(lengths < 1e-12):
            raise DegenerateInput(f"{path}: zero-length normals could not be re-estimated")
    return PointCloud(points, normals / lengths[:, None])


def save_points(cloud: PointCloud, path) -> None:
    """Write ``x y z nx ny nz`` rows, readable by :func:`load_shape`."""
    data = np.hstack([cloud.points, cloud.normals])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# cageloop oriented points, n={len(cloud)}, meters\n")
        np.savetxt(fh, data, fmt="%.17g")


# ---------------------------------------------------------------------------
# analytic generators
# ---------------------------------------------------------------------------

def torus_implicit(p, major, minor, center=(0.0, 0.0, 0.0)):
    """Signed value (rho - R)^2 + z^2 - r^2 of a z-axis torus; negative inside."""
    q = np.asarray(p, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    rho = np.hypot(q[..., 0], q[..., 1])
    return (rho - major) ** 2 + q[..., 2] ** 2 - minor ** 2


def _torus_surface(rng, m, major, minor, center):
    # rejection on the area element (R + r cos v) gives area-uniform samples
    u = np.empty(0)
    v = np.empty(0)
    while len(u) < m:
        uu = rng.uniform(0, 2 * np.pi, 2 * m)
        vv = rng.uniform(0, 2 * np.pi, 2 * m)
        keep = rng.uniform(0, major + minor, 2 * m) < major + minor * np.cos(vv)
        u = np.concatenate([u, uu[keep]])
        v = np.concatenate([v, vv[keep]])
    u, v = u[:m], v[:m]
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    core = np.stack([major * np.cos(u), major * np.sin(u), np.zeros(m)], axis=1)
    pts = core + minor * nrm + np.asarray(center)
    return pts, nrm


def _sphere_surface(rng, m, radius):
    nrm = _unit(rng.normal(size=(m, 3)))
    return radius * nrm, nrm


def _cylinder_surface(rng, m, radius, height):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    which = rng.choice(3, size=m, p=np.array([side, cap, cap]) / (side + 2 * cap))
    pts = np.empty((m, 3))
    nrm = np.empty((m, 3))
    s = which == 0
    t = rng.uniform(0, 2 * np.pi, s.sum())
    pts[s] = np.stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(-height / 2, height / 2, s.sum())], axis=1)
    nrm[s] = np.stack([np.cos(t), np.sin(t), np.zeros(s.sum())], axis=1)
    for label, sign in ((1, 1.0), (2, -1.0)):
        c = which == label
        rr = radius * np.sqrt(rng.uniform(0, 1, c.sum()))
        t = rng.uniform(0, 2 * np.pi, c.sum())
        pts[c] = np.stack([rr * np.cos(t), rr * np.sin(t), np.full(c.sum(), sign * height / 2)], axis=1)
        nrm[c] = [0.0, 0.0, sign]
    return pts, nrm


def _genus2_surface(rng, m, major, minor):
    centers = (np.array([-major, 0.0, 0.0]), np.array([major, 0.0, 0.0]))
    pts, nrm = [], []
    total = 0
    while total < m:
        for a, b in ((0, 1), (1, 0)):
            p, n = _torus_surface(rng, m, major, minor, centers[a])
            # keep only the part of torus a that is not buried inside torus b
            keep = torus_implicit(p, major, minor, centers[b]) > 0.0
            pts.append(p[keep])
            nrm.append(n[keep])
            total += keep.sum()
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)
    order = rng.permutation(len(pts))[:m]
    return pts[order], nrm[order]


def _blocky_l_surface(rng, m, length, width, depth):
    # L = union of [0,L]x[0,W] and [0,W]x[0,L], extruded over z in [0, D]
    L, W, D = length, width, depth
    outline = np.array([[0, 0], [L, 0], [L, W], [W, W], [W, L], [0, L]], dtype=float)
    edges = [(outline[i], outline[(i + 1) % 6]) for i in range(6)]
    side_areas = [np.linalg.norm(b - a) * D for a, b in edges]
    cap_area = L * W + (L - W) * W
    areas = np.array(side_areas + [cap_area, cap_area])
    which = rng.choice(len(areas), size=m, p=areas / areas.sum())
    pts = np.empty((m, 3))
    nrm = np.empty((m, 3))
    for k, (a, b) in enumerate(edges):
        sel = which == k
        t = rng.uniform(0, 1, sel.sum())[:, None]
        xy = a + t * (b - a)
        d = (b - a) / np.linalg.norm(b - a)
        pts[sel] = np.column_stack([xy, rng.uniform(0, D, sel.sum())])
        # outline is counter-clockwise, so the outward normal is the edge turned right
        nrm[sel] = [d[1], -d[0], 0.0]
    for k, z, nz in ((6, D, 1.0), (7, 0.0, -1.0)):
        sel = which == k
        cnt = sel.sum()
        xy = np.empty((0, 2))
        while len(xy) < cnt:
            cand = rng.uniform(0, L, size=(2 * cnt + 8, 2))
            inside = (cand[:, 1] <= W) | (cand[:, 0] <= W)
            xy = np.vstack([xy, cand[inside]])
        pts[sel] = np.column_stack([xy[:cnt], np.full(cnt, z)])
        nrm[sel] = [0.0, 0.0, nz]
    pts -= np.array([L / 2, L / 2, D / 2])
    return pts, nrm


def farthest_point_sampling(points, n, start=0):
    """Greedy farthest-point subsample; returns indices in selection order."""
    points = np.asarray(points, dtype=np.float64)
    n = min(int(n), len(points))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    d = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        np.minimum(d, np.linalg.norm(points - points[nxt], axis=1), out=d)
    return chosen


def generate_shape(kind: str, params: dict | None = None, n: int = 2000, seed: int = 0) -> PointCloud:
    """Deterministic quasi-uniform sampling of an analytic shape.

    Samples are drawn area-uniformly at 4x the requested count and thinned by
    farthest-point sampling, which spreads them evenly over the surface.
    """
    if kind not in _DEFAULT_PARAMS:
        raise BadParams(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 100:
        raise BadParams(f"n must be >= 100, got {n}")
    p = dict(_DEFAULT_PARAMS[kind])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise BadParams(f"unknown parameters for {kind}: {sorted(unknown)}")
    p.update(params or {})
    if any(not np.isfinite(v) or v <= 0 for v in p.values()):
        raise BadParams(f"dimensions must be positive: {p}")

    rng = np.random.default_rng(seed)
    m = 4 * n
    if kind == "sphere":
        pts, nrm = _sphere_surface(rng, m, p["radius"])
    elif kind == "cylinder":
        pts, nrm = _cylinder_surface(rng, m, p["radius"], p["height"])
    elif kind == "torus":
        if p["minor"] >= p["major"]:
            raise BadParams("torus minor radius must be smaller than the major radius")
        pts, nrm = _torus_surface(rng, m, p["major"], p["minor"], (0.0, 0.0, 0.0))
    elif kind == "genus2":
        if p["minor"] >= p["major"] / 2:
            raise BadParams("genus2 minor radius must be below half the major radius")
        pts, nrm = _genus2_surface(rng, m, p["major"], p["minor"])
    else:
        if p["width"] >= p["length"]:
            raise BadParams("blocky-L width must be smaller than its length")
        pts, nrm = _blocky_l_surface(rng, m, p["length"], p["width"], p["depth"])

    keep = farthest_point_sampling(pts, n, start=int(rng.integers(len(pts))))
    keep.sort()
    return PointCloud(pts[keep], _unit(nrm[keep]))


def add_noise(cloud: PointCloud, sigma: float, seed: int = 0, k: int = 12) -> PointCloud:
    """Isotropic Gaussian displacement with std ``sigma`` times the bbox
    diagonal, followed by normal re-estimation."""
    if not 0.0 <= sigma <= 0.1:
        raise BadParams(f"sigma must lie in [0, 0.1], got {sigma}")
    if sigma == 0.0:
        return cloud
    from .estimation import estimate_normals

    rng = np.random.default_rng(seed)
    pts = cloud.points + rng.normal(scale=sigma * cloud.diagonal, size=cloud.points.shape)
    return PointCloud(pts, estimate_normals(pts, k=k))
