"""End-to-end loop and pose synthesis with deterministic text outputs.

Outputs written to the run directory:

* ``loops.txt``  ranked loops, one block per loop
* ``poses.txt``  one pose per line for the top-ranked loops
* ``report.txt`` counts, rejection buckets and the verbatim config
* ``timing.txt`` per-stage wall times (kept apart so the other three files
  are byte-identical across repeated runs)
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (BadParams, CageLoopError, CollapsedLoop, EmptyResult, NoBasePoints, NoValidOrigin,
                     ParseError, StageError)
from .estimation import principal_curvatures, smooth_points
from .field import compute_field, write_field
from .grid import VoxelGrid, build_grid, centroid_of_object, write_grid
from .implicit import MAX_POINTS, fit_rbf
from .morse import CagingLoop, trace_base
from .pose import GraspPose, GripperSpec, make_pose
from .refine import (DEFAULT_WEIGHTS, LoopCandidateSet, check_contacts, dedup, filter_length,
                     local_shortest_residual, rank, relax_loop, score_loop)
from .shapes import PointCloud, farthest_point_sampling, load_shape

log = logging.getLogger(__name__)

BUCKETS = ("degenerate", "collapsed", "length", "residual", "duplicate")
# the operation named in an EmptyResult for each bucket
_KILLERS = {
    "degenerate": "trace_loop",
    "collapsed": "relax_loop",
    "length": "filter_length",
    "residual": "filter_local_shortest_at_base",
}


@dataclass
class GripperBlock:
    h: float = 0.12
    r: float = 0.01
    spread_deg: float = 60.0
    palm_offset: float = 0.3
    approach_depth: float | None = None


@dataclass
class DenoiseBlock:
    iters: int = 0  # 0 disables smoothing
    k: int = 20


@dataclass
class RelaxBlock:
    iters: int = 200
    step: float = 0.5
    resample_every: int = 20


@dataclass
class FilterBlock:
    residual_max: float = 0.02
    window: float = 0.10
    iters: int = 50


@dataclass
class DedupBlock:
    tau_voxels: float = 2.0


@dataclass
class RankBlock:
    weights: list = field(default_factory=lambda: list(DEFAULT_WEIGHTS))


@dataclass
class PoseBlock:
    top_k: int = 5
    min_angle: float = 0.15
    azimuths: int = 64
    rings: int = 8
    tol: float = 0.01


@dataclass
class DebugBlock:
    grid: bool = False
    fields: int = 0  # number of distance fields to dump


@dataclass
class PipelineConfig:
    input: str | None = None
    format: str | None = None  # "oriented-points" or "mesh"; guessed from the suffix when unset
    offset_radius: float | None = None  # defaults to gripper.r
    resolution: int = 50
    margin: float = 0.15
    hull_slack: float = 2.0
    samples: int = 500
    seed: int = 0
    curvature_filter: bool = True
    curvature_k: int = 20
    max_points: int = MAX_POINTS
    connectivity: int = 26
    workers: int = 1
    out: str = "out"
    gravity: list = field(default_factory=lambda: [0.0, 0.0, -1.0])
    gripper: GripperBlock = field(default_factory=GripperBlock)
    denoise: DenoiseBlock = field(default_factory=DenoiseBlock)
    relax: RelaxBlock = field(default_factory=RelaxBlock)
    filter: FilterBlock = field(default_factory=FilterBlock)
    dedup: DedupBlock = field(default_factory=DedupBlock)
    rank: RankBlock = field(default_factory=RankBlock)
    pose: PoseBlock = field(default_factory=PoseBlock)
    debug: DebugBlock = field(default_factory=DebugBlock)
    text: str = field(default="", repr=False, compare=False)  # source text, echoed in the report

    @classmethod
    def from_dict(cls, data: dict, text: str = "") -> "PipelineConfig":
        cfg = _build(cls, data, "")
        cfg.text = text
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ParseError("config must be a JSON object")
        return cls.from_dict(data, text)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    @property
    def r(self) -> float:
        return self.gripper.r if self.offset_radius is None else self.offset_radius

    def gripper_spec(self) -> GripperSpec:
        g = self.gripper
        return GripperSpec(g.h, g.r, g.approach_depth, g.spread_deg, g.palm_offset)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("text")
        return out

    def validate(self) -> None:
        if self.resolution < 16:
            raise BadParams(f"resolution must be >= 16, got {self.resolution}")
        if self.samples < 1:
            raise BadParams(f"samples must be >= 1, got {self.samples}")
        if self.r <= 0:
            raise BadParams(f"offset radius must be positive, got {self.r}")
        if self.connectivity not in (6, 18, 26):
            raise BadParams(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.workers < 1:
            raise BadParams(f"workers must be >= 1, got {self.workers}")
        if len(self.gravity) != 3 or np.linalg.norm(self.gravity) == 0:
            raise BadParams(f"gravity must be a nonzero 3-vector, got {self.gravity}")
        if len(self.rank.weights) != 4:
            raise BadParams(f"rank.weights needs 4 entries, got {self.rank.weights}")
        if self.relax.iters < 1 or self.dedup.tau_voxels <= 0:
            raise BadParams("relax.iters must be >= 1 and dedup.tau_voxels > 0")
        self.gripper_spec()


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise BadParams(f"config block {prefix or 'root'} must be an object")
    known = {f.name: f for f in fields(cls) if f.name != "text"}
    unknown = set(data) - set(known)
    if unknown:
        raise BadParams(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


@dataclass
class RunReport:
    counts: dict = field(default_factory=dict)
    rejections: dict = field(default_factory=lambda: {b: 0 for b in BUCKETS})
    timings: dict = field(default_factory=dict)
    loops: list = field(default_factory=list)  # ranked CagingLoops
    provenance: list = field(default_factory=list)
    poses: list = field(default_factory=list)  # (rank, GraspPose or None)
    config_text: str = ""
    killed_by: str | None = None
    spacing: float = 0.0
    h: float = 0.0
    tau: float = 0.0
    residual_max: float = 0.02

    @property
    def valid_poses(self) -> int:
        return sum(1 for _, p in self.poses if p is not None and p.valid)


class _Timer:
    def __init__(self, report, name):
        self.report, self.name = report, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.report.timings[self.name] = self.report.timings.get(self.name, 0.0) + time.perf_counter() - self.t0


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (CageLoopError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def sample_base_points(cloud: PointCloud, grid: VoxelGrid, n: int, seed: int = 0, curvature_filter: bool = True,
                       k: int = 20, r: float | None = None) -> np.ndarray:
    """Base voxels: farthest-point samples of the cloud pushed just past the
    offset surface and snapped to the nearest GRASPING voxel.

    With the curvature filter on, samples whose principal curvatures are
    both negative (locally convex) are dropped first.
    """
    if n < 1:
        raise BadParams(f"need at least one base point, got {n}")
    rng = np.random.default_rng(seed)
    picks = farthest_point_sampling(cloud.points, n, start=int(rng.integers(len(cloud))))
    if curvature_filter:
        curv = principal_curvatures(cloud.points, cloud.normals, cloud.points[picks], cloud.normals[picks], k=k)
        picks = picks[~((curv[:, 0] < 0) & (curv[:, 1] < 0))]
        if len(picks) == 0:
            raise NoBasePoints("the curvature filter removed every sample (all locally convex); "
                               "set curvature_filter to false for shapes such as spheres")
    r = grid.offset_radius if r is None else r
    targets = cloud.points[picks] + (r + grid.spacing / 2) * cloud.normals[picks]
    nodes = grid.grasping_index
    _, k_near = cKDTree(grid.center(nodes)).query(targets)
    voxels = nodes[k_near]
    _, first = np.unique(voxels, return_index=True)
    return voxels[np.sort(first)]


def _per_base(grid, cap, connectivity, p):
    f = compute_field(grid, p, cap, connectivity)
    # a sweep that got within one diagonal step of the cap was cut short by it
    capped = bool(f.dist[np.isfinite(f.dist)].max() > cap - np.sqrt(3) * grid.spacing)
    return trace_base(f, grid), capped


def run(config: PipelineConfig, cloud: PointCloud | None = None, write: bool = True) -> RunReport:
    """Run every stage; raises StageError or EmptyResult (after writing the
    report) on failure."""
    report = RunReport(config_text=config.text)
    counts = report.counts
    gripper = config.gripper_spec()
    report.h = gripper.h
    report.residual_max = config.filter.residual_max
    gravity = np.asarray(config.gravity, dtype=np.float64)
    gravity = gravity / np.linalg.norm(gravity)

    with _Timer(report, "load"):
        if cloud is None:
            if not config.input:
                raise StageError("load", BadParams("no input file given"))
            fmt = config.format or ("mesh" if Path(config.input).suffix.lower() in (".obj", ".off") else
                                    "oriented-points")
            cloud = _stage("load", load_shape, config.input, fmt)
        counts["input_points"] = len(cloud)
        if len(cloud) > config.max_points:
            rng = np.random.default_rng(config.seed)
            keep = farthest_point_sampling(cloud.points, config.max_points, start=int(rng.integers(len(cloud))))
            cloud = cloud.subset(np.sort(keep))
        if config.denoise.iters:
            cloud = _stage("denoise", smooth_points, cloud, config.denoise.k, config.denoise.iters)
        counts["points"] = len(cloud)

    with _Timer(report, "fit_rbf"):
        surface = _stage("fit_rbf", fit_rbf, cloud, config.r, config.max_points)
    with _Timer(report, "build_grid"):
        grid = _stage("build_grid", build_grid, surface, cloud, config.resolution, config.margin, config.hull_slack)
        report.spacing = grid.spacing
        report.tau = config.dedup.tau_voxels * grid.spacing
        counts.update({f"voxels_{k.lower()}": v for k, v in grid.counts().items()})
    with _Timer(report, "sample_base_points"):
        bases = _stage("sample_base_points", sample_base_points, cloud, grid, config.samples, config.seed,
                       config.curvature_filter, config.curvature_k, config.r)
        counts["base_points"] = len(bases)

    cap = 2 * gripper.h
    with _Timer(report, "fields"):
        work = lambda p: _per_base(grid, cap, config.connectivity, p)  # noqa: E731
        try:
            if config.workers > 1:
                with ThreadPoolExecutor(max_workers=config.workers) as pool:
                    results = list(pool.map(work, bases))
            else:
                results = [work(p) for p in bases]
        except CageLoopError as exc:
            raise StageError("compute_field", exc) from exc
        counts["fields"] = len(results)
        for i, p in enumerate(bases[:config.debug.fields]):
            if write:
                Path(config.out).mkdir(parents=True, exist_ok=True)
                write_field(compute_field(grid, p, cap, config.connectivity), grid,
                            Path(config.out) / f"field_{i:03d}.bin")
    counts["capped_fields"] = sum(capped for _, capped in results)
    results = [res for res, _ in results]
    traced = [loop for res in results for loop in res.loops]
    counts["critical_points"] = sum(r.critical for r in results)
    counts["no_loop"] = sum(r.degenerate for r in results)
    counts["ridge_merged"] = sum(r.ridge for r in results)
    counts["traced"] = len(traced)

    relaxed = []
    with _Timer(report, "relax"):
        for loop in traced:
            try:
                relaxed.append(relax_loop(loop, grid, config.relax.iters, config.relax.step,
                                          config.relax.resample_every))
            except CollapsedLoop:
                report.rejections["collapsed"] += 1
        counts["relaxed"] = len(relaxed)

    kept = []
    with _Timer(report, "filters"):
        for loop in relaxed:
            if not filter_length(loop, gripper):
                report.rejections["length"] += 1
                continue
            residual = local_shortest_residual(loop, grid, config.filter.iters, config.filter.window)
            loop.scores["residual"] = residual
            if residual >= config.filter.residual_max:
                report.rejections["residual"] += 1
                continue
            kept.append(loop)
        counts["filtered"] = len(kept)

    with _Timer(report, "rank"):
        centroid = centroid_of_object(grid)
        diag = grid.object_bbox_diagonal()
        weights = tuple(config.rank.weights)
        for loop in kept:
            score_loop(loop, gripper.h, centroid, diag, gravity, weights)
        order = sorted(range(len(kept)), key=lambda i: (kept[i].scores["score"], kept[i].length, i))
        cands = dedup(kept, report.tau, order)
        report.rejections["duplicate"] = len(kept) - len(cands)
        cands = rank(cands, grid, gripper.h, gravity, weights, centroid)
        report.loops = cands.ranked()
        report.provenance = [cands.provenance[i] for i in cands.ranking]
        counts["retained"] = len(report.loops)
        counts["three_contact"] = sum(check_contacts(l, grid) for l in report.loops)

    if not report.loops:
        report.killed_by = _killed_by(counts, report.rejections)
        if write:
            write_outputs(report, config.out)
        if counts["traced"] == 0 and report.killed_by == "filter_length":
            msg = (f"no critical point closed a loop within the sweep radius 2h = {2 * gripper.h:g}, so every "
                   f"loop here is at least 4h = {4 * gripper.h:g} long; h is too small for this object")
        elif counts["traced"] == 0:
            msg = f"no loop could be traced; the candidates ran out at {report.killed_by}"
        else:
            msg = f"no loop survived; the last candidates were removed by {report.killed_by}"
        raise EmptyResult(msg, report.killed_by, report)

    with _Timer(report, "poses"):
        for i, loop in enumerate(report.loops[:config.pose.top_k]):
            try:
                pose = make_pose(loop, grid, gripper, config.pose.min_angle, gravity, config.pose.azimuths,
                                 config.pose.rings, config.pose.tol)
            except NoValidOrigin:
                pose = None
            report.poses.append((i, pose))
        counts["valid_poses"] = report.valid_poses

    if write:
        if config.debug.grid:
            write_grid(grid, Path(config.out) / "grid.bin")
        write_outputs(report, config.out)
    return report


def _killed_by(counts, rejections):
    if counts.get("traced", 0) == 0:
        # the 2h sweep cap is the 4h length bound applied before tracing
        if counts.get("capped_fields", 0):
            return "filter_length"
        return "trace_loop" if counts.get("critical_points", 0) else "find_critical_points"
    remaining = counts["traced"]
    last = None
    for bucket in ("collapsed", "length", "residual"):
        if rejections[bucket]:
            last = bucket
        remaining -= rejections[bucket]
        if remaining <= 0:
            return _KILLERS[bucket]
    return _KILLERS.get(last, "dedup")


def synthesize(config: PipelineConfig, cloud: PointCloud | None = None, write: bool = True) -> RunReport:
    return run(config, cloud, write)


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return "%.17g" % x


def _vec(v) -> str:
    return " ".join(_fmt(x) for x in v)


def write_outputs(report: RunReport, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# cageloop loops 1"]
    for i, loop in enumerate(report.loops):
        base, crit = report.provenance[i]
        s = loop.scores
        lines += [
            f"loop {i}",
            f"score {_fmt(s.get('score', 0.0))}",
            f"length {_fmt(loop.length)}",
            f"terms centroid={_fmt(s.get('centroid', 0.0))} horizontal={_fmt(s.get('horizontal', 0.0))} "
            f"length={_fmt(s.get('length', 0.0))} residual={_fmt(s.get('residual', 0.0))}",
            f"base {base} {_vec(loop.base)}",
            f"critical {crit}",
            f"vertices {len(loop.vertices)}",
        ]
        lines += [_vec(v) for v in loop.vertices]
        lines.append("end")
    (out / "loops.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["# loop origin(3) dir1(3) dir2(3) normal(3) opening_angle valid"]
    for i, pose in report.poses:
        if pose is None:
            lines.append(f"{i} none")
            continue
        lines.append(f"{i} {_vec(pose.origin)} {_vec(pose.dir1)} {_vec(pose.dir2)} {_vec(pose.plane_normal)} "
                     f"{_fmt(pose.opening_angle)} {int(pose.valid)}")
    (out / "poses.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["# cageloop report 1", "[run]",
             f"status {'ok' if report.valid_poses else ('empty' if not report.loops else 'no-valid-pose')}",
             f"killed_by {report.killed_by or '-'}", f"spacing {_fmt(report.spacing)}", f"h {_fmt(report.h)}",
             f"tau {_fmt(report.tau)}", f"residual_max {_fmt(report.residual_max)}", "[counts]"]
    lines += [f"{k} {v}" for k, v in report.counts.items()]
    lines.append("[rejections]")
    lines += [f"{k} {v}" for k, v in report.rejections.items()]
    lines.append("[config]")
    (out / "report.txt").write_text("\n".join(lines) + "\n" + report.config_text, encoding="utf-8")

    lines = [f"{k} {v:.6f}" for k, v in report.timings.items()]
    lines.append(f"total {sum(report.timings.values()):.6f}")
    (out / "timing.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loops(path) -> list[dict]:
    """Parse ``loops.txt`` into dicts with index, score, length, base, vertices."""
    out, cur, verts, want = [], None, [], 0
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        try:
            if want:
                verts.append([float(t) for t in line.split()])
                want -= 1
                continue
            key, _, rest = line.partition(" ")
            if key == "loop":
                cur = {"index": int(rest)}
                verts = []
            elif key == "end":
                cur["vertices"] = np.array(verts)
                out.append(cur)
                cur = None
            elif key == "vertices":
                want = int(rest)
            elif key in ("score", "length"):
                cur[key] = float(rest)
            elif key == "base":
                parts = rest.split()
                cur["base_voxel"] = int(parts[0])
                cur["base"] = np.array([float(t) for t in parts[1:]])
            elif key == "critical":
                cur["critical"] = int(rest)
            elif key == "terms":
                cur["terms"] = {k: float(v) for k, v in (t.split("=") for t in rest.split())}
            else:
                raise ValueError(f"unknown record {key!r}")
        except (ValueError, TypeError, KeyError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    if cur is not None or want:
        raise ParseError(f"{path}: truncated loop block")
    return out


def read_poses(path) -> list[tuple[int, GraspPose | None]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[1] == "none":
                out.append((int(tok[0]), None))
                continue
            x = [float(t) for t in tok[1:14]]
            if len(tok) != 15:
                raise ValueError(f"expected 15 fields, got {len(tok)}")
            out.append((int(tok[0]), GraspPose(np.array(x[0:3]), np.array(x[3:6]), np.array(x[6:9]),
                                               np.array(x[9:12]), x[12], bool(int(tok[14])))))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return out


def read_report(path) -> dict:
    """Sections of ``report.txt``; the config echo comes back as raw text."""
    text = Path(path).read_text(encoding="utf-8")
    head, sep, config = text.partition("[config]\n")
    if not sep:
        raise ParseError(f"{path}: missing [config] section")
    out = {"config": config}
    section = None
    for line in head.splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            section = line.strip("[]")
            out[section] = {}
            continue
        key, _, value = line.partition(" ")
        out.setdefault(section, {})[key] = value
    return out


def validate(directory) -> list[str]:
    """Check a result directory against the output invariants; returns the
    list of problems found (empty when everything holds)."""
    from .refine import hausdorff

    d = Path(directory)
    problems = []
    for name in ("loops.txt", "poses.txt", "report.txt"):
        if not (d / name).exists():
            problems.append(f"missing {name}")
    if problems:
        return problems
    rep = read_report(d / "report.txt")
    loops = read_loops(d / "loops.txt")
    poses = read_poses(d / "poses.txt")
    run_info = rep.get("run", {})
    h = float(run_info.get("h", "nan"))
    tau = float(run_info.get("tau", "nan"))
    residual_max = float(run_info.get("residual_max", "0.02"))
    counts = {k: int(v) for k, v in rep.get("counts", {}).items()}
    rejections = {k: int(v) for k, v in rep.get("rejections", {}).items()}

    for i, loop in enumerate(loops):
        v = loop["vertices"]
        if loop["index"] != i:
            problems.append(f"loop {i}: index {loop['index']} out of order")
        if len(v) < 3:
            problems.append(f"loop {i}: fewer than 3 vertices")
            continue
        length = float(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1).sum())
        if abs(length - loop["length"]) > 1e-9:
            problems.append(f"loop {i}: stored length {loop['length']} != polyline length {length}")
        if not length < 4 * h:
            problems.append(f"loop {i}: length {length} is not below 4h = {4 * h}")
        if loop.get("terms", {}).get("residual", 0.0) >= residual_max:
            problems.append(f"loop {i}: residual {loop['terms']['residual']} too large")
    scores = [l["score"] for l in loops]
    if any(b < a - 1e-15 for a, b in zip(scores, scores[1:])):
        problems.append("loops are not sorted by score")
    for i in range(len(loops)):
        for j in range(i + 1, len(loops)):
            if hausdorff(loops[i]["vertices"], loops[j]["vertices"], stop=tau) < tau:
                problems.append(f"loops {i} and {j} are closer than tau = {tau}")

    for i, pose in poses:
        if not 0 <= i < len(loops):
            problems.append(f"pose for unknown loop {i}")
            continue
        if pose is None:
            continue
        frame = pose.frame()
        if np.abs(frame @ frame.T - np.eye(3)).max() > 1e-6:
            problems.append(f"pose {i}: frame is not orthonormal")
        if np.min(np.linalg.norm(loops[i]["vertices"] - pose.origin, axis=1)) > 1e-12:
            problems.append(f"pose {i}: origin is not a loop vertex")

    if counts:
        if counts.get("retained", 0) != len(loops):
            problems.append(f"report retains {counts.get('retained')} loops, loops.txt has {len(loops)}")
        chain = counts.get("traced", 0) - rejections.get("collapsed", 0) - rejections.get("length", 0) \
            - rejections.get("residual", 0) - rejections.get("duplicate", 0)
        if chain != counts.get("retained", 0):
            problems.append("rejection buckets do not account for every traced loop")
        if not counts.get("retained", 0) <= counts.get("filtered", 0) <= counts.get("relaxed", 0) \
                <= counts.get("traced", 0):
            problems.append("counts are not monotone")
    return problems
