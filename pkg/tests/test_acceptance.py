"""Acceptance criteria T1-T10, one line each in the terminal summary.

Every run made here is kept in RUNS so that T7 (filter soundness) and T9
(frame orthogonality) can sweep all of them.
"""

import time

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from cageloop.estimation import smooth_points
from cageloop.field import compute_field
from cageloop.grid import Label, build_grid
from cageloop.implicit import fit_rbf
from cageloop.morse import CagingLoop, classify, classify_pattern, signs_to_string
from cageloop.pipeline import PipelineConfig, run
from cageloop.pose import fit_plane, pose_at
from cageloop.refine import disc_components, local_shortest_residual
from cageloop.shapes import add_noise, generate_shape
from conftest import TORUS, as_volume, random_wall_grid
from oracles import bellman_ford, circle, linking_number, morse_truth, polyline_length, symmetric_hausdorff
from test_morse import _pattern_field

RUNS: dict = {}


def _run(name, cloud, data):
    cfg = PipelineConfig.from_dict(data)
    t0 = time.perf_counter()
    report = run(cfg, cloud, write=False)
    RUNS[name] = (cloud, cfg, report)
    return report, time.perf_counter() - t0


def _grid_of(cloud, cfg):
    """The run's grid, rebuilt the way the pipeline builds it."""
    if cfg.denoise.iters:
        cloud = smooth_points(cloud, cfg.denoise.k, cfg.denoise.iters)
    return build_grid(fit_rbf(cloud, cfg.r), cloud, cfg.resolution, cfg.margin, cfg.hull_slack)


def _links(loop, core):
    return abs(linking_number(loop.vertices, core)) > 0.5


TORUS_CORE = circle((0.0, 0.0, 0.0), TORUS["major"], n=200)


def test_t1_sphere_great_circle(record, sphere_cloud):
    data = {"gripper": {"h": 0.5, "r": 0.02}, "curvature_filter": False}
    report, secs = _run("sphere", sphere_cloud, data)
    want = 2 * np.pi * 0.12
    got = report.loops[0].length
    ok = abs(got / want - 1) <= 0.08 and secs < 30
    record("T1", ok, f"top loop {got:.4f} vs {want:.4f} ({got / want - 1:+.1%}), {secs:.1f} s")
    assert got == pytest.approx(want, rel=0.08)
    assert secs < 30


def test_t2_torus_handle_loop(record, torus_cloud, torus_report, torus_grid):
    RUNS["torus"] = (torus_cloud, PipelineConfig.from_dict({"gripper": {"h": 0.12, "r": 0.01}}), torus_report)
    want = 2 * np.pi * (TORUS["minor"] + 0.01)
    hits = []
    for i, loop in enumerate(torus_report.loops):
        if abs(loop.length / want - 1) > 0.10 or not _links(loop, TORUS_CORE):
            continue
        # the disc must cut the tube and hold its cross-section inside the loop
        if any(c.inside >= 0.5 for c in disc_components(loop, torus_grid)):
            hits.append(i)
    detail = f"{len(hits)} tube loops within 10% of {want:.4f}"
    if hits:
        detail += f", best rank {hits[0]} length {torus_report.loops[hits[0]].length:.4f}"
    record("T2", bool(hits), detail)
    assert hits


def _enclosed_handles(loop, grid, cores, reach):
    """For each enclosed disc component, which handle cores run through it."""
    out = []
    for comp in disc_components(loop, grid):
        if comp.inside >= 0.5:
            d = [np.min(np.linalg.norm(core - comp.centroid, axis=1)) for core in cores]
            out.append(tuple(i for i, x in enumerate(d) if x < reach))
    return out


def test_t3_scale_awareness(record):
    cloud = generate_shape("genus2", None, 2000, 0)
    major, minor = 0.06, 0.02
    cores = [circle((-major, 0.0, 0.0), major, n=200), circle((major, 0.0, 0.0), major, n=200)]
    # girth: perimeter of the silhouette seen along the handles' common axis
    girth = ConvexHull(cloud.points[:, [0, 2]]).area
    # a tube cross-section is centered on its core; the junction sits on both
    reach = minor / 2
    results = {}
    for label, h in (("small", 0.06), ("large", max(0.4, 0.6 * girth))):
        report, _ = _run(f"genus2-{label}", cloud, {"gripper": {"h": h, "r": 0.01}})
        grid = _grid_of(cloud, RUNS[f"genus2-{label}"][1])
        top = report.loops[0]
        results[label] = (h, [_links(top, c) for c in cores], _enclosed_handles(top, grid, cores, reach))
    h_s, link_s, enc_s = results["small"]
    h_l, link_l, enc_l = results["large"]
    small_ok = sum(link_s) == 1 and len(enc_s) == 1 and len(enc_s[0]) == 1
    large_ok = h_l >= 0.6 * girth and all(link_l) and any(len(e) == 2 for e in enc_l)
    record("T3", small_ok and large_ok,
           f"h={h_s}: links {sum(link_s)} handle(s), encloses {enc_s}; "
           f"h={h_l:.3f} (girth {girth:.3f}): links {sum(link_l)}, encloses {enc_l}")
    assert small_ok
    assert large_ok


@pytest.mark.parametrize("sigma", [0.01, 0.03])
def test_t4_low_noise_top_loop_is_stable(record, torus_cloud, torus_report, sigma):
    noisy = add_noise(torus_cloud, sigma, seed=0)
    report, _ = _run(f"torus-noise-{sigma}", noisy, {"gripper": {"h": 0.12, "r": 0.01}})
    d = symmetric_hausdorff(report.loops[0].vertices, torus_report.loops[0].vertices)
    spacings = d / torus_report.spacing
    record("T4", spacings < 4, f"sigma {sigma}: top-loop Hausdorff {spacings:.1f} spacings (bound 4)")
    assert spacings < 4


@pytest.mark.parametrize("sigma", [0.05, 0.07])
def test_t4_high_noise_keeps_a_tube_loop(record, torus_cloud, sigma):
    noisy = add_noise(torus_cloud, sigma, seed=0)
    data = {"gripper": {"h": 0.12, "r": 0.01}, "denoise": {"k": 20, "iters": 3}}
    try:
        report, _ = _run(f"torus-noise-{sigma}", noisy, data)
        tube = [i for i, l in enumerate(report.loops) if _links(l, TORUS_CORE) and l.length < 0.5]
        detail = f"sigma {sigma}: {len(tube)} tube loops among {len(report.loops)} retained"
    except Exception as exc:  # an empty run is a failed criterion, not an error
        tube = []
        detail = f"sigma {sigma}: no loops ({type(exc).__name__})"
    record("T4", bool(tube), detail)
    assert tube


def test_t5_morse_truth_table(record):
    bad = []
    for signs in range(64):
        pattern = signs_to_string(signs)
        kind, axes = classify_pattern(signs)
        want_kind, want_axes = morse_truth(pattern)
        g, f, q = _pattern_field(pattern)
        if kind.value != want_kind or set(axes) != want_axes or classify(f, g, q).kind is not kind:
            bad.append(pattern)
    record("T5", not bad, f"{64 - len(bad)}/64 patterns match")
    assert not bad


def test_t6_distance_oracle(record):
    rng = np.random.default_rng(2024)
    mismatched = 0
    pairs = 0
    asym = 0.0
    for _ in range(25):
        g = random_wall_grid(rng, 20)
        p = int(rng.choice(g.grasping_index))
        cap = float(rng.uniform(0.05, 0.4))
        f = compute_field(g, p, cap)
        want = bellman_ford(g.volume(Label.GRASPING), g.spacing, tuple(g.ijk(p)), cap)
        got = as_volume(g, f.dist)
        fin = np.isfinite(want)
        if not np.array_equal(np.isfinite(got), fin) or not np.allclose(got[fin], want[fin], rtol=1e-12, atol=0):
            mismatched += 1
        # symmetry on pairs reached from p
        reached = np.flatnonzero(np.isfinite(f.dist) & (f.dist > 0))
        for q in rng.choice(reached, size=min(4, len(reached)), replace=False):
            back = compute_field(g, int(q), cap).dist[p]
            asym = max(asym, abs(back - f.dist[q]) / f.dist[q])
            pairs += 1
    while pairs < 100:
        g = random_wall_grid(rng, 20)
        p, q = (int(v) for v in rng.choice(g.grasping_index, 2, replace=False))
        a = compute_field(g, p, 1e6).dist[q]
        b = compute_field(g, q, 1e6).dist[p]
        if np.isfinite(a) or np.isfinite(b):
            asym = max(asym, abs(a - b) / max(a, b))
            pairs += 1
    ok = mismatched == 0 and asym <= 1e-12
    record("T6", ok, f"{25 - mismatched}/25 grids match, {pairs} pairs, max asymmetry {asym:.1e}")
    assert mismatched == 0
    assert asym <= 1e-12


def test_t7_filter_soundness(record):
    assert RUNS, "run the other acceptance tests first"
    failures = []
    checked = 0
    for name, (cloud, cfg, report) in RUNS.items():
        grid = _grid_of(cloud, cfg)
        loops = report.loops
        for i, loop in enumerate(loops):
            checked += 1
            if not polyline_length(loop.vertices) < 4 * cfg.gripper.h:
                failures.append(f"{name}#{i} length")
            if not loop.scores["residual"] < cfg.filter.residual_max:
                failures.append(f"{name}#{i} residual")
            if not grid.is_free(loop.vertices).all():
                failures.append(f"{name}#{i} not in grasping space")
        # stored residuals are the real ones
        for loop in loops[:5]:
            again = local_shortest_residual(loop, grid, cfg.filter.iters, cfg.filter.window)
            if again != loop.scores["residual"]:
                failures.append(f"{name} residual not reproducible")
        for i in range(len(loops)):
            for j in range(i):
                if symmetric_hausdorff(loops[i].vertices, loops[j].vertices) < report.tau:
                    failures.append(f"{name}#{i},{j} closer than tau")
    record("T7", not failures, f"{checked} loops over {len(RUNS)} runs, {len(failures)} violations")
    assert not failures, failures[:10]


def test_t8_rbf_residuals(record, torus_cloud):
    worst = 0.0
    names = []
    clouds = [(k, generate_shape(k, None, 2000, 1)) for k in ("sphere", "cylinder", "torus", "genus2", "blocky-L")]
    clouds.append(("noisy torus", add_noise(torus_cloud, 0.03, seed=0)))
    for name, cloud in clouds:
        for r in (0.01, 0.02):
            res = fit_rbf(cloud, r).residuals()
            worst = max(worst, max(res["surface"], res["offset"]) / r)
        names.append(name)
    record("T8", worst <= 1e-6, f"worst residual {worst:.1e}*r over {len(names)} models at 2000 points")
    assert worst <= 1e-6


def test_t9_pose_frames(record):
    t = 2 * np.pi * np.arange(48) / 48
    v = np.stack([0.3 * np.cos(t), 0.3 * np.sin(t), np.full(48, 0.1)], axis=1)
    loop = CagingLoop(v, v[0])
    n, b = fit_plane(loop)
    errs = [np.abs(n - [0.0, 0.0, 1.0]).max(), abs(b - 0.1)]
    for k in (0, 7, 30):
        d1 = v[k] - [0.0, 0.0, 0.1]
        d1 /= np.linalg.norm(d1)
        pose = pose_at(loop, k, d1, n, 1.0)
        # closed form: o = v_k, dir1 = outward radial, dir2 = dir1 x n with n = +z
        errs.append(np.abs(pose.origin - v[k]).max())
        errs.append(np.abs(pose.dir1 - d1).max())
        errs.append(np.abs(pose.dir2 - np.cross(d1, [0.0, 0.0, 1.0])).max())
    worst_orth = 0.0
    poses = 0
    for _, _, report in RUNS.values():
        for _, pose in report.poses:
            if pose is not None:
                f = pose.frame()
                worst_orth = max(worst_orth, np.abs(f @ f.T - np.eye(3)).max())
                poses += 1
    ok = max(errs) <= 1e-6 and worst_orth <= 1e-6
    record("T9", ok, f"circle frame error {max(errs):.1e}, orthogonality error {worst_orth:.1e} over {poses} poses")
    assert max(errs) <= 1e-6
    assert worst_orth <= 1e-6


def test_t10_speed_and_determinism(record, tmp_path, torus_cloud, torus_report):
    # torus_report has already compiled every numba kernel
    times = []
    for name in ("a", "b"):
        cfg = PipelineConfig.from_dict({"gripper": {"h": 0.12, "r": 0.01}, "out": str(tmp_path / name)})
        t0 = time.perf_counter()
        report = run(cfg, torus_cloud)
        times.append(time.perf_counter() - t0)
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("loops.txt", "poses.txt"))
    ok = max(times) <= 10 and same and report.counts["base_points"] <= 500
    record("T10", ok, f"{len(torus_cloud)} points, 50^3 grid: {times[0]:.2f} s and {times[1]:.2f} s, "
                      f"outputs {'identical' if same else 'differ'}")
    assert max(times) <= 10
    assert same
