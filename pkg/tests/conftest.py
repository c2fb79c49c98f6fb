import numpy as np
import pytest

from cageloop.grid import Label, VoxelGrid, build_grid
from cageloop.implicit import fit_rbf
from cageloop.pipeline import PipelineConfig, run
from cageloop.shapes import generate_shape

TORUS = {"major": 0.08, "minor": 0.025}

# acceptance outcomes, printed once at the end of the session
CRITERIA: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: int(k[1:])):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def record():
    def _record(key, ok, detail):
        prev = CRITERIA.get(key)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}"
        CRITERIA[key] = (bool(ok), detail)
        print(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")

    return _record


def open_grid(n=21, spacing=1.0, label=Label.GRASPING):
    """Cube of ``n**3`` voxels, all with one label, origin at 0."""
    return VoxelGrid(np.zeros(3), spacing, (n, n, n), np.full(n ** 3, label, dtype=np.uint8))


@pytest.fixture(scope="session")
def torus_cloud():
    return generate_shape("torus", TORUS, 2000, 7)


@pytest.fixture(scope="session")
def torus_grid(torus_cloud):
    return build_grid(fit_rbf(torus_cloud, 0.01), torus_cloud)


@pytest.fixture(scope="session")
def sphere_cloud():
    return generate_shape("sphere", {"radius": 0.1}, 2000, 7)


@pytest.fixture(scope="session")
def sphere_surface(sphere_cloud):
    return fit_rbf(sphere_cloud, 0.02)


@pytest.fixture(scope="session")
def sphere_grid(sphere_cloud, sphere_surface):
    return build_grid(sphere_surface, sphere_cloud)


def torus_config(**extra):
    data = {"gripper": {"h": 0.12, "r": 0.01}}
    data.update(extra)
    return PipelineConfig.from_dict(data)


@pytest.fixture(scope="session")
def torus_report(torus_cloud):
    return run(torus_config(), torus_cloud, write=False)


@pytest.fixture(scope="session")
def torus_run_dir(tmp_path_factory, torus_cloud):
    from cageloop.shapes import save_points

    root = tmp_path_factory.mktemp("torus")
    save_points(torus_cloud, root / "torus.xyz")
    text = '{"input": "%s", "gripper": {"h": 0.12, "r": 0.01}, "out": "%s"}' % (root / "torus.xyz", root / "out")
    (root / "config.json").write_text(text)
    report = run(PipelineConfig.from_json(text))
    return root, report


def random_wall_grid(rng, max_side=20, spacing=0.01):
    """Open box with a few random OBJECT slabs, each pierced by a hole."""
    dims = tuple(int(d) for d in rng.integers(6, max_side + 1, size=3))
    lab = np.full(dims, Label.GRASPING, dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        axis = int(rng.integers(3))
        at = int(rng.integers(1, dims[axis] - 1))
        sl = [slice(None)] * 3
        sl[axis] = at
        lab[tuple(sl)] = Label.OBJECT
        others = [a for a in range(3) if a != axis]
        hole = [slice(None)] * 3
        hole[axis] = at
        for a in others:
            lo = int(rng.integers(0, dims[a] - 1))
            hole[a] = slice(lo, lo + int(rng.integers(1, 3)))
        lab[tuple(hole)] = Label.GRASPING
    # scattered single blockers
    lab[rng.random(dims) < 0.05] = Label.BAND
    flat = lab.transpose(2, 1, 0).ravel()
    return VoxelGrid(np.zeros(3), spacing, dims, flat)


def as_volume(grid, values):
    """Per-voxel flat array viewed as an [i, j, k] volume."""
    return np.asarray(values).reshape(grid.dims[::-1]).transpose(2, 1, 0)
